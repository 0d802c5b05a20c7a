"""Selects the coordinate-descent core at import time.

The compiled extension is preferred; the pure NumPy module is the
fallback. Set CPKERN_BACKEND=python or CPKERN_BACKEND=c to force one.
"""

import logging
import os

logger = logging.getLogger(__name__)

_forced = os.environ.get("CPKERN_BACKEND", "").strip().lower()
if _forced not in ("", "c", "python"):
    raise ImportError(
        "CPKERN_BACKEND must be 'c' or 'python', got %r" % _forced
    )

if _forced == "python":
    from . import _cdcore_py as _impl
    BACKEND = "python"
elif _forced == "c":
    from . import _cdcore as _impl  # raises if the extension is missing
    BACKEND = "c"
else:
    try:
        from . import _cdcore as _impl
        BACKEND = "c"
    except ImportError:
        from . import _cdcore_py as _impl
        BACKEND = "python"
        logger.info("compiled core unavailable, using the python fallback")

gene_sweep = _impl.gene_sweep
