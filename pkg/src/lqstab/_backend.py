"""Pick the compiled kernels when available, else the pure-Python ones.

Set ``LQSTAB_BACKEND=python`` to force the fallback (``compiled`` to require
the extension and fail loudly if it is missing).
"""
import os

from . import _pykernels
from .errors import ConfigurationError

python_kernels = _pykernels

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

_choice = os.environ.get("LQSTAB_BACKEND", "auto").lower()
if _choice == "python":
    kernels = _pykernels
elif _choice == "compiled":
    if compiled_kernels is None:
        raise ImportError("LQSTAB_BACKEND=compiled but lqstab._kernels is not built")
    kernels = compiled_kernels
else:
    kernels = compiled_kernels if compiled_kernels is not None else _pykernels

BACKEND = "compiled" if kernels is compiled_kernels else "python"


def get_kernels(name=None):
    """Return the kernel module for ``name`` ('compiled', 'python' or None for active)."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        if compiled_kernels is None:
            raise ImportError("compiled kernels are not built")
        return compiled_kernels
    raise ConfigurationError(f"unknown backend {name!r}")
