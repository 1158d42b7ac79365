"""Backend selection for the hot loops.

The compiled extension ``_ckernels`` is used when importable; otherwise, or
when ``PSFCENTER_PURE_PYTHON=1`` is set, the numpy twin in ``_pykernels``.
Both expose ``pd_loop`` with the same signature and semantics.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("PSFCENTER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

pd_loop = _impl.pd_loop


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython" or "python"), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
