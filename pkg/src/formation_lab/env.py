"""Partially observable 2-D point-mass swarm world.

Agents accelerate in the plane, observe peers inside a sensing radius,
and exchange fixed-width latent messages through a one-step outbox. Every
step pays a shared reward: formation shape error (Hausdorff or assigned
point-to-point), distance of the swarm centre to the destination, and a
collision count, each with its own weight; the shape and navigation terms
carry a lagged-previous-reward recursion so the trend is rewarded too.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import N_MAX, N_MIN
from .kernels import collision_count as _collision_count


@dataclass
class EnvConfig:
    n_active: int = 5
    n_max: int = N_MAX
    obs_radius: float = 3.0
    safe_radius: float = 0.15
    destination: tuple = (0.0, 10.0)
    # 0.25 s steps give one action enough position authority to show up
    # inside the reward discount horizon; at 0.1 s the discounted return is
    # nearly invariant to behavior and the policy gradient starves
    dt: float = 0.25
    accel_limit: float = 0.5
    v_max: float = 1.0
    # per-step velocity retention factor keeps exploration noise from
    # integrating into a runaway velocity random walk; at full throttle the
    # equilibrium speed equals v_max, so the destination stays reachable
    damping: float = 0.05
    episode_length: int = 100
    lag_formation: float = 0.9
    lag_navigation: float = 0.7
    w_formation: float = 10.0
    w_navigation: float = 5.0
    w_collision: float = 6.0
    init_box: float = 2.0
    message_dim: int = 256
    formation_metric: str = "hd"  # "hd" | "ptp"

    def __post_init__(self):
        if not N_MIN <= self.n_active <= self.n_max:
            raise ValueError(f"n_active must be in [{N_MIN}, {self.n_max}]")
        if self.safe_radius >= self.obs_radius:
            raise ValueError("safe_radius must be below obs_radius")
        if self.formation_metric not in ("hd", "ptp"):
            raise ValueError(f"unknown formation metric {self.formation_metric!r}")

    @property
    def obs_dim(self) -> int:
        return 4 * self.n_max


@dataclass
class WorldState:
    positions: np.ndarray   # (n_max, 2)
    velocities: np.ndarray  # (n_max, 2)
    active: np.ndarray      # (n_max,) bool
    outbox: np.ndarray      # (n_max, message_dim), messages readable this step
    t: int = 0
    prev_r_f: float = 0.0
    prev_r_v: float = 0.0

    def copy(self) -> "WorldState":
        return WorldState(
            self.positions.copy(), self.velocities.copy(), self.active.copy(),
            self.outbox.copy(), self.t, self.prev_r_f, self.prev_r_v,
        )


@dataclass
class LocalState:
    """Everything one agent can act on: its view plus received messages."""

    agent: int
    obs: np.ndarray       # (4 * n_max,)
    self_msg: np.ndarray  # (message_dim,)
    nb_idx: np.ndarray    # (k,) neighbor agent ids, ascending distance
    nb_dist: np.ndarray   # (k,)
    nb_msgs: np.ndarray   # (k, message_dim)


@dataclass
class StepResult:
    reward: float
    components: tuple     # (r_f, r_v, r_c)
    locals: list = field(default_factory=list)
    done: bool = False


class SwarmEnv:
    """Single-writer world; queries between steps are read-only."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: WorldState | None = None
        self._templates: dict[int, geometry.FormationTemplate] = {}

    # -- lifecycle -----------------------------------------------------

    def reset(self, seed: int) -> WorldState:
        cfg = self.config
        rng = np.random.default_rng(seed)
        positions = np.zeros((cfg.n_max, 2))
        velocities = np.zeros((cfg.n_max, 2))
        active = np.zeros(cfg.n_max, dtype=bool)
        active[: cfg.n_active] = True
        positions[: cfg.n_active] = rng.uniform(
            -cfg.init_box, cfg.init_box, size=(cfg.n_active, 2)
        )
        self.state = WorldState(
            positions=positions,
            velocities=velocities,
            active=active,
            outbox=np.zeros((cfg.n_max, cfg.message_dim)),
        )
        return self.state

    def template(self, n: int) -> geometry.FormationTemplate:
        if n not in self._templates:
            self._templates[n] = geometry.formation_template(n)
        return self._templates[n]

    # -- queries ---------------------------------------------------------

    @property
    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.state.active)

    @property
    def n_active(self) -> int:
        return int(self.state.active.sum())

    def neighbors(self, i: int):
        """(ids, distances) of active agents strictly inside the sensing radius,
        ascending distance with index tie-break; self excluded."""
        st = self.state
        if not st.active[i]:
            raise ValueError(f"agent {i} is inactive")
        ids = np.flatnonzero(st.active)
        ids = ids[ids != i]
        d = np.hypot(*(st.positions[ids] - st.positions[i]).T)
        keep = d < self.config.obs_radius
        ids, d = ids[keep], d[keep]
        order = np.lexsort((ids, d))
        return ids[order], d[order]

    def observe(self, i: int) -> np.ndarray:
        """Fixed-width local view: slot 0 self, then neighbors by distance, zero tail."""
        st = self.state
        if not st.active[i]:
            raise ValueError(f"agent {i} is inactive")
        obs = np.zeros(self.config.obs_dim)
        obs[0:2] = st.positions[i]
        obs[2:4] = st.velocities[i]
        ids, _ = self.neighbors(i)
        for slot, j in enumerate(ids, start=1):
            obs[4 * slot : 4 * slot + 2] = st.positions[j]
            obs[4 * slot + 2 : 4 * slot + 4] = st.velocities[j]
        return obs

    def global_observation(self) -> np.ndarray:
        """All (p, v) pairs by agent index; inactive slots stay zero."""
        st = self.state
        return np.concatenate([st.positions, st.velocities], axis=1).reshape(-1)

    def local_state(self, i: int) -> LocalState:
        ids, dists = self.neighbors(i)
        return LocalState(
            agent=i,
            obs=self.observe(i),
            self_msg=self.state.outbox[i].copy(),
            nb_idx=ids,
            nb_dist=dists,
            nb_msgs=self.state.outbox[ids].copy(),
        )

    def local_states(self) -> list:
        return [self.local_state(i) for i in self.active_ids]

    def formation_distance(self) -> float:
        """Hausdorff distance of the centred active swarm to its template."""
        _, rel = geometry.centroid_relative(self.state.positions[self.active_ids])
        return geometry.hausdorff(rel, self.template(self.n_active).points)

    # -- reward engine -----------------------------------------------------

    def formation_reward(self) -> float:
        st = self.state
        _, rel = geometry.centroid_relative(st.positions[self.active_ids])
        tpl = self.template(self.n_active)
        if self.config.formation_metric == "ptp":
            r_f = geometry.ptp_reward(rel, tpl, st.prev_r_f, self.config.lag_formation)
        else:
            d = geometry.hausdorff(rel, tpl.points)
            r_f = -d - self.config.lag_formation * st.prev_r_f
        st.prev_r_f = r_f
        return r_f

    def navigation_reward(self) -> float:
        st = self.state
        center = st.positions[self.active_ids].mean(axis=0)
        d = geometry.euclidean_distance(center, self.config.destination)
        r_v = -d - self.config.lag_navigation * st.prev_r_v
        st.prev_r_v = r_v
        return r_v

    def collision_penalty(self) -> int:
        st = self.state
        return _collision_count(st.positions, st.active, self.config.safe_radius)

    def total_reward(self, r_f: float, r_v: float, r_c: float) -> float:
        cfg = self.config
        return cfg.w_formation * r_f + cfg.w_navigation * r_v - cfg.w_collision * r_c

    # -- dynamics ---------------------------------------------------------

    def step(self, actions: np.ndarray, messages: np.ndarray) -> StepResult:
        cfg = self.config
        st = self.state
        ids = self.active_ids
        actions = np.asarray(actions, dtype=np.float64)
        messages = np.asarray(messages, dtype=np.float64)
        if actions.shape != (len(ids), 2):
            raise ValueError(f"expected {(len(ids), 2)} actions, got {actions.shape}")
        if messages.shape != (len(ids), cfg.message_dim):
            raise ValueError(
                f"expected {(len(ids), cfg.message_dim)} messages, got {messages.shape}"
            )

        u = np.clip(actions, -cfg.accel_limit, cfg.accel_limit)
        v = np.clip(
            (1.0 - cfg.damping) * st.velocities[ids] + u * cfg.dt,
            -cfg.v_max, cfg.v_max,
        )
        st.velocities[ids] = v
        st.positions[ids] += v * cfg.dt
        st.outbox[:] = 0.0
        st.outbox[ids] = messages
        st.t += 1

        r_f = self.formation_reward()
        r_v = self.navigation_reward()
        r_c = float(self.collision_penalty())
        reward = self.total_reward(r_f, r_v, r_c)
        done = st.t >= cfg.episode_length
        return StepResult(
            reward=reward,
            components=(r_f, r_v, r_c),
            locals=self.local_states(),
            done=done,
        )

    def deactivate_agent(self, i: int) -> WorldState:
        st = self.state
        if not st.active[i]:
            raise ValueError(f"agent {i} is already inactive")
        if self.n_active - 1 < N_MIN:
            raise ValueError(f"cannot drop below {N_MIN} active agents")
        st.active[i] = False
        st.positions[i] = 0.0
        st.velocities[i] = 0.0
        st.outbox[i] = 0.0
        return st


class TrajectoryLogger:
    """One CSV row per step: t, per-agent (x, y, vx, vy, active), rewards."""

    def __init__(self, path, n_max: int = N_MAX):
        self.n_max = n_max
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        header = ["t"]
        for i in range(n_max):
            header += [f"a{i}_x", f"a{i}_y", f"a{i}_vx", f"a{i}_vy", f"a{i}_active"]
        header += ["r_f", "r_v", "r_c", "r"]
        self._writer.writerow(header)

    def append(self, state: WorldState, components, reward: float):
        row = [state.t]
        for i in range(self.n_max):
            row += [
                f"{state.positions[i, 0]:.9g}",
                f"{state.positions[i, 1]:.9g}",
                f"{state.velocities[i, 0]:.9g}",
                f"{state.velocities[i, 1]:.9g}",
                int(state.active[i]),
            ]
        row += [f"{c:.9g}" for c in components] + [f"{reward:.9g}"]
        self._writer.writerow(row)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
