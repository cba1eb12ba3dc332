"""Backend selection for the hot kernels.

The compiled extension is used when importable. Set ``DARAP_KERNELS=python``
to force the NumPy fallback, or ``DARAP_KERNELS=cython`` to fail loudly when
the extension is missing.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)


def _load_compiled():
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


compiled = _load_compiled()
python = _kernels_py

_choice = os.environ.get("DARAP_KERNELS", "auto").lower()
if _choice == "python":
    backend = python
elif _choice == "cython":
    if compiled is None:
        raise ImportError("DARAP_KERNELS=cython but the compiled extension is not built")
    backend = compiled
else:
    backend = compiled if compiled is not None else python
    if compiled is None:
        log.debug("compiled kernels unavailable; using NumPy fallback")


def get(name=None):
    """Return a backend module by name (``"cython"``/``"python"``), or the active one."""
    if name is None:
        return backend
    if name == "python":
        return python
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def available():
    return ["cython", "python"] if compiled is not None else ["python"]
