"""Kernel backend selection.

Two interchangeable implementations of the hot per-voxel kernels exist:
a numba @njit backend (default when numba imports) and a pure-numpy one.
Set RESPMODEL_BACKEND=numpy or RESPMODEL_BACKEND=numba before import to
force one; use_backend() switches at runtime (tests, benchmarks).
"""

import os
import warnings

from . import _numpy

_BACKENDS = {"numpy": _numpy}

try:
    from . import _numba

    _BACKENDS["numba"] = _numba
except ImportError:  # numba missing or broken: numpy fallback only
    _numba = None

_active_name = "numba" if "numba" in _BACKENDS else "numpy"

_env = os.environ.get("RESPMODEL_BACKEND", "").strip().lower()
if _env:
    if _env in _BACKENDS:
        _active_name = _env
    else:
        warnings.warn(
            f"RESPMODEL_BACKEND={_env!r} unavailable, using {_active_name!r}",
            RuntimeWarning,
        )


def use_backend(name: str) -> str:
    """Switch the active kernel backend ('numba' or 'numpy'); returns the previous one."""
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_BACKENDS)}")
    previous = _active_name
    _active_name = name
    return previous


def active_backend() -> str:
    return _active_name


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def pull_scalar(src, disp, inv_sp, out):
    return _BACKENDS[_active_name].pull_scalar(src, disp, inv_sp, out)


def pull_vectors(src_u, disp, inv_sp, out):
    return _BACKENDS[_active_name].pull_vectors(src_u, disp, inv_sp, out)


def sample_points_scalar(src, fidx, out):
    return _BACKENDS[_active_name].sample_points_scalar(src, fidx, out)


def resample_scalar(src, scale, offset, out):
    return _BACKENDS[_active_name].resample_scalar(src, scale, offset, out)


def resample_vectors(src_u, scale, offset, out):
    return _BACKENDS[_active_name].resample_vectors(src_u, scale, offset, out)


def diffusion_energy_grad(u, labels, inv_sp, grad):
    return _BACKENDS[_active_name].diffusion_energy_grad(u, labels, inv_sp, grad)


def diffusion_energy(u, labels, inv_sp):
    return _BACKENDS[_active_name].diffusion_energy(u, labels, inv_sp)
