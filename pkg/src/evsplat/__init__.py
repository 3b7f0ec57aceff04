"""Differentiable Gaussian splatting trained from event-camera streams."""
import os

# numba's default TBB layer is often missing; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")


def _apply_thread_cap() -> None:
    cap = os.environ.get("EVENT3DGS_THREADS")
    if not cap:
        return
    import numba

    try:
        n = int(cap)
    except ValueError:
        return
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


_apply_thread_cap()

__version__ = "0.1.0"
