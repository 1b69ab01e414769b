"""Backend selection for compiled kernels.

The Cython extension is used when it imports; otherwise the numpy fallback.
Set ``TSFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from tsflow import _lsa_py

logger = logging.getLogger(__name__)

BACKEND = "python"
lsa_solve = _lsa_py.solve

if os.environ.get("TSFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from tsflow import _lsa
    except ImportError:  # extension not built
        logger.debug("compiled assignment kernel unavailable; using numpy fallback")
    else:
        lsa_solve = _lsa.solve
        BACKEND = "cython"
