"""Kernel backend selection.

The tensor engine routes every hot loop through one kernel module.  Two
interchangeable implementations exist:

* ``fedcast._ckernels`` -- Cython extension built at install time (fast)
* ``fedcast._pykernels`` -- pure Python (slow, zero build requirements)

Selection happens once at import.  The environment variable
``FEDCAST_BACKEND`` forces a choice: ``compiled``, ``python``, or ``auto``
(the default, which prefers the compiled module and silently falls back).
``benchmarks/bench_kernels.py`` measures the gap between the two.
"""

import os

_choice = os.environ.get("FEDCAST_BACKEND", "auto").lower()

if _choice == "python":
    from . import _pykernels as kern

    BACKEND = "python"
elif _choice == "compiled":
    from . import _ckernels as kern  # type: ignore[no-redef]

    BACKEND = "compiled"
elif _choice == "auto":
    try:
        from . import _ckernels as kern  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        from . import _pykernels as kern

        BACKEND = "python"
else:
    raise RuntimeError(
        f"FEDCAST_BACKEND must be 'auto', 'compiled' or 'python', got {_choice!r}"
    )

__all__ = ["kern", "BACKEND"]
