"""Domain-adaptive event trigger tagger.

Library and CLI for token-level event trigger identification that transfers
across text domains: adversarial training with a gradient reversal layer,
a supervised feature-augmentation ceiling, low-resource finetuning, and
teacher/student self-training, verified end to end on synthetic two-domain
corpora.
"""

import os
import sys

__version__ = "0.1.0"

CONFIG_SCHEMA_VERSION = 1

# The linear algebra here is all small matrices (hidden size ~100, batch 16);
# multi-threaded BLAS loses an order of magnitude to synchronization overhead
# on them, so pin BLAS to one thread unless the user overrides.
_blas_threads = os.environ.get("ADATRIG_BLAS_THREADS", "1")
if _blas_threads != "0":
    if "numpy" not in sys.modules:
        # BLAS not loaded yet: env vars still take effect
        for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(_var, _blas_threads)
    # force both BLAS instances to load (NumPy's, and SciPy's used by the
    # compiled kernels) so the runtime limit catches them
    import numpy  # noqa: F401
    import scipy.linalg  # noqa: F401

    try:
        from threadpoolctl import threadpool_limits

        _blas_limiter = threadpool_limits(limits=int(_blas_threads), user_api="blas")
    except Exception:  # noqa: BLE001 - best effort; env vars may still apply
        _blas_limiter = None

