"""Backend selection for the numeric hot kernels.

``FORMATION_LAB_BACKEND=numba`` or ``=numpy`` forces a backend; unset, numba
is used when importable and the pure-numpy path otherwise. The active choice
is exposed as ``BACKEND``. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

_requested = os.environ.get("FORMATION_LAB_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"FORMATION_LAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import numpy_impl as _impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import numpy_impl as _impl
        BACKEND = "numpy"

directed_hausdorff = _impl.directed_hausdorff
collision_count = _impl.collision_count
gae_advantages = _impl.gae_advantages
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "directed_hausdorff",
    "collision_count",
    "gae_advantages",
    "attention_forward",
    "attention_backward",
    "adam_update",
]
