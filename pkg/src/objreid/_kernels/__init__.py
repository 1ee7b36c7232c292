"""Hot numeric kernels with two interchangeable backends.

The compiled Cython extension (``_core``) is preferred when importable; the
pure numpy module (``pure``) implements identical semantics and is used as a
fallback. Set ``OBJREID_KERNELS=pure`` or ``=compiled`` to force a backend.
Both backends are exercised by the test suite and compared by
``benchmarks/bench_kernels.py``.
"""

import os

from . import pure

_choice = os.environ.get("OBJREID_KERNELS", "").strip().lower()

if _choice == "pure":
    _impl = pure
elif _choice == "compiled":
    from . import _core as _impl  # noqa: F401  (ImportError is the intent)
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = pure

BACKEND = _impl.BACKEND
dbscan_labels = _impl.dbscan_labels
points_in_box_count = _impl.points_in_box_count
supcon_loss_grad = _impl.supcon_loss_grad
rank_stats = _impl.rank_stats
