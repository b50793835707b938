"""Backend selection: compiled cell solver when available, numpy otherwise."""

from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("HDRPANEL_FORCE_PY_KERNELS"):
    from . import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build environment
        from . import _kernels_py as kernels

        BACKEND = "python"
        logger.info("compiled kernels unavailable; using numpy fallback")

fit_cells = kernels.fit_cells
