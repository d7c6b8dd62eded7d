"""Backend selection for the recurrent kernels.

The compiled Cython module is preferred when importable; set
``ADATRIG_KERNELS=py`` to force the pure-NumPy fallback (e.g. to benchmark
one against the other, see benchmarks/bench_kernels.py).
"""

import os

from . import _kernels_py

if os.environ.get("ADATRIG_KERNELS", "").lower() in ("py", "numpy", "python"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward


def backend_name() -> str:
    return _impl.BACKEND


def available_backends():
    names = ["numpy"]
    try:
        from . import _kernels  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names
