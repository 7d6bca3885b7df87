"""Backend selection for the mixture kernels.

The compiled Cython extension is preferred; the pure-numpy fallback is used
when the extension is missing or when ``SDLAB_FORCE_NUMPY`` is set in the
environment. Both backends implement the same functions with matching
semantics (tested for agreement to ~1e-12).
"""

import os

if os.environ.get("SDLAB_FORCE_NUMPY"):
    from . import _kernels_np as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_np as _impl

        BACKEND = "numpy"

mixture_logpdf = _impl.mixture_logpdf
mixture_responsibilities = _impl.mixture_responsibilities
mixture_score = _impl.mixture_score

__all__ = [
    "BACKEND",
    "mixture_logpdf",
    "mixture_responsibilities",
    "mixture_score",
]
