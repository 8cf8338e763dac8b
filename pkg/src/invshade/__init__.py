"""Differentiable inverse shading on triangle meshes with per-pixel offset detail."""

import os

# The TBB layer shipped with some numba wheels is too old; workqueue is always available.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numba  # noqa: E402


def _apply_thread_cap():
    cap = os.environ.get("DIS_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError:
        raise ValueError(f"DIS_THREADS must be an integer, got {cap!r}") from None
    if n < 1:
        raise ValueError("DIS_THREADS must be at least 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


_apply_thread_cap()

__version__ = "0.1.0"
