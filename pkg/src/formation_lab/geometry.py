"""Point-set geometry for formation scoring.

Points are float64 arrays of shape (2,), point sets arrays of shape (n, 2).
Hausdorff distances measure how far a swarm is from a target shape without
assigning agents to slots; the point-to-point reward is the assigned
baseline. Formation templates are fixed coordinate tables, one per fleet
size, centred on the origin.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

N_MIN = 5
N_MAX = 8

_SQ2H = math.sqrt(2.0) / 2.0  # half-diagonal of a unit-side diamond
_ROW = math.sqrt(3.0) / 2.0   # row drop for unit equilateral spacing


def _wedge5():
    # V of five: apex plus two legs, 1.0 m along-leg spacing
    return [
        (0.0, 0.0),
        (-0.5, -_ROW), (0.5, -_ROW),
        (-1.0, -2 * _ROW), (1.0, -2 * _ROW),
    ]


def _wedge6():
    # two stacked three-point wedges (equilateral rows)
    return [
        (0.0, 0.0),
        (-0.5, -_ROW), (0.5, -_ROW),
        (0.0, -2 * _ROW),
        (-0.5, -3 * _ROW), (0.5, -3 * _ROW),
    ]


def _hex7():
    pts = [(math.cos(i * math.pi / 3), math.sin(i * math.pi / 3)) for i in range(6)]
    return [(0.0, 0.0)] + pts


def _double_diamond8():
    cx = 0.5 + _SQ2H  # puts the two facing vertices 1.0 m apart
    left = [(-cx - _SQ2H, 0.0), (-cx + _SQ2H, 0.0), (-cx, _SQ2H), (-cx, -_SQ2H)]
    right = [(-x, y) for x, y in left]
    return left + right


_TEMPLATE_BUILDERS = {5: _wedge5, 6: _wedge6, 7: _hex7, 8: _double_diamond8}


def euclidean_distance(a, b) -> float:
    """Plain 2-D Euclidean distance between two points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("points must be finite")
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _as_point_set(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ValueError("point set must be a non-empty (n, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point set must be finite")
    return pts


def directed_hausdorff(a, b) -> float:
    """max_{x in a} min_{y in b} d(x, y)."""
    return float(kernels.directed_hausdorff(_as_point_set(a), _as_point_set(b)))


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance: the larger of the two directed ones."""
    a = _as_point_set(a)
    b = _as_point_set(b)
    return max(
        float(kernels.directed_hausdorff(a, b)),
        float(kernels.directed_hausdorff(b, a)),
    )


def centroid_relative(points):
    """Split a point set into (centroid, centred copies of the points)."""
    pts = _as_point_set(points)
    center = pts.mean(axis=0)
    return center, pts - center


@dataclass(frozen=True)
class FormationTemplate:
    """Target shape for a given fleet size, centred on the origin."""

    n: int
    points: np.ndarray  # (n, 2)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "points": self.points.tolist()})


def formation_template(n: int) -> FormationTemplate:
    """Fixed template for ``n`` agents (wedge / two-row wedge / hex / double diamond)."""
    if not N_MIN <= n <= N_MAX:
        raise ValueError(f"fleet size {n} outside [{N_MIN}, {N_MAX}]")
    pts = np.array(_TEMPLATE_BUILDERS[n](), dtype=np.float64)
    pts -= pts.mean(axis=0)
    return FormationTemplate(n=n, points=pts)


def ptp_reward(relative, template: FormationTemplate, prev: float, lag: float) -> float:
    """Assigned-position formation reward: slot k belongs to agent k.

    Negative mean distance to the assigned template point, with the same
    previous-reward recursion the Hausdorff variant uses.
    """
    rel = _as_point_set(relative)
    if rel.shape[0] != template.n:
        raise ValueError(
            f"expected {template.n} points for the template, got {rel.shape[0]}"
        )
    dists = np.hypot(*(rel - template.points).T)
    return float(-dists.mean() - lag * prev)
