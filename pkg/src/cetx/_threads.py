"""Thread-cap handling. Imported before numpy so the BLAS pools pick it up.

CETX_THREADS caps internal parallelism; the default of 1 keeps every run
deterministic. Values already set explicitly in the environment win.
"""

import os


def thread_cap() -> int:
    raw = os.environ.get("CETX_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"CETX_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ValueError(f"CETX_THREADS must be >= 1, got {cap}")
    return cap


def _apply_cap() -> None:
    cap = str(thread_cap())
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


_apply_cap()
