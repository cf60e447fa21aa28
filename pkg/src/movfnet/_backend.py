"""Kernel backend selection.

The compiled Cython core is used when it imports; otherwise (or when
``MOVFNET_BACKEND=python``) the numpy/scipy twins in ``_kernels_py`` run.
"""

import os

from . import _kernels_py

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

_NAMES = ("apply_csr_axis", "apply_band_axis", "eigh3_batch", "apply_frame", "apply_frame_adjoint")

_active = None


def available():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names


def set_backend(name):
    """Switch kernels globally; ``name`` is ``"compiled"`` or ``"python"``."""
    global _active
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernel core is not built")
        mod = _compiled
    elif name == "python":
        mod = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    for fn in _NAMES:
        globals()[fn] = getattr(mod, fn)
    _active = name


def current():
    return _active


_default = os.environ.get("MOVFNET_BACKEND", "").strip().lower()
if _default not in ("compiled", "python"):
    _default = "compiled" if _compiled is not None else "python"
set_backend(_default)
