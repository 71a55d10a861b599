"""Numba-compiled per-voxel kernels.

All loops are serial on purpose: bit-reproducible results matter more here
than multicore speed, and @njit alone already removes the interpreter from
the inner loops. Arrays are float64, C-contiguous, shaped (nz, ny, nx[, 3])
with the x index fastest; displacement components are ordered (ux, uy, uz)
in mm.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _corners(f, n):
    """Clamped floor/ceil pair and interpolation weight for one axis."""
    if f < 0.0:
        f = 0.0
    elif f > n - 1:
        f = n - 1.0
    i0 = int(np.floor(f))
    if i0 > n - 2:
        i0 = n - 2
    if i0 < 0:
        i0 = 0
    return i0, i0 + 1, f - i0


@njit(cache=True, inline="always")
def _trilerp(src, fx, fy, fz):
    nz, ny, nx = src.shape
    x0, x1, wx = _corners(fx, nx)
    y0, y1, wy = _corners(fy, ny)
    z0, z1, wz = _corners(fz, nz)
    c00 = src[z0, y0, x0] * (1.0 - wx) + src[z0, y0, x1] * wx
    c10 = src[z0, y1, x0] * (1.0 - wx) + src[z0, y1, x1] * wx
    c01 = src[z1, y0, x0] * (1.0 - wx) + src[z1, y0, x1] * wx
    c11 = src[z1, y1, x0] * (1.0 - wx) + src[z1, y1, x1] * wx
    c0 = c00 * (1.0 - wy) + c10 * wy
    c1 = c01 * (1.0 - wy) + c11 * wy
    return c0 * (1.0 - wz) + c1 * wz


@njit(cache=True)
def pull_scalar(src, disp, inv_sp, out):
    """out(x) = src sampled at x + disp(x); coordinates in voxel units via inv_sp."""
    nz, ny, nx = src.shape
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                fx = ix + disp[iz, iy, ix, 0] * inv_sp[0]
                fy = iy + disp[iz, iy, ix, 1] * inv_sp[1]
                fz = iz + disp[iz, iy, ix, 2] * inv_sp[2]
                out[iz, iy, ix] = _trilerp(src, fx, fy, fz)


@njit(cache=True)
def pull_vectors(src_u, disp, inv_sp, out):
    """Componentwise trilinear sampling of a vector field at x + disp(x)."""
    nz, ny, nx = src_u.shape[:3]
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                fx = ix + disp[iz, iy, ix, 0] * inv_sp[0]
                fy = iy + disp[iz, iy, ix, 1] * inv_sp[1]
                fz = iz + disp[iz, iy, ix, 2] * inv_sp[2]
                x0, x1, wx = _corners(fx, nx)
                y0, y1, wy = _corners(fy, ny)
                z0, z1, wz = _corners(fz, nz)
                for c in range(3):
                    c00 = src_u[z0, y0, x0, c] * (1.0 - wx) + src_u[z0, y0, x1, c] * wx
                    c10 = src_u[z0, y1, x0, c] * (1.0 - wx) + src_u[z0, y1, x1, c] * wx
                    c01 = src_u[z1, y0, x0, c] * (1.0 - wx) + src_u[z1, y0, x1, c] * wx
                    c11 = src_u[z1, y1, x0, c] * (1.0 - wx) + src_u[z1, y1, x1, c] * wx
                    c0 = c00 * (1.0 - wy) + c10 * wy
                    c1 = c01 * (1.0 - wy) + c11 * wy
                    out[iz, iy, ix, c] = c0 * (1.0 - wz) + c1 * wz


@njit(cache=True)
def sample_points_scalar(src, fidx, out):
    """Trilinear samples at fractional index coordinates fidx[i] = (fx, fy, fz)."""
    for i in range(fidx.shape[0]):
        out[i] = _trilerp(src, fidx[i, 0], fidx[i, 1], fidx[i, 2])


@njit(cache=True)
def resample_scalar(src, scale, offset, out):
    """out[k] = src at fractional index offset + k*scale, per axis."""
    nz, ny, nx = out.shape
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                fx = offset[0] + ix * scale[0]
                fy = offset[1] + iy * scale[1]
                fz = offset[2] + iz * scale[2]
                out[iz, iy, ix] = _trilerp(src, fx, fy, fz)


@njit(cache=True)
def resample_vectors(src_u, scale, offset, out):
    nz, ny, nx = out.shape[:3]
    snz, sny, snx = src_u.shape[:3]
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                fx = offset[0] + ix * scale[0]
                fy = offset[1] + iy * scale[1]
                fz = offset[2] + iz * scale[2]
                x0, x1, wx = _corners(fx, snx)
                y0, y1, wy = _corners(fy, sny)
                z0, z1, wz = _corners(fz, snz)
                for c in range(3):
                    c00 = src_u[z0, y0, x0, c] * (1.0 - wx) + src_u[z0, y0, x1, c] * wx
                    c10 = src_u[z0, y1, x0, c] * (1.0 - wx) + src_u[z0, y1, x1, c] * wx
                    c01 = src_u[z1, y0, x0, c] * (1.0 - wx) + src_u[z1, y0, x1, c] * wx
                    c11 = src_u[z1, y1, x0, c] * (1.0 - wx) + src_u[z1, y1, x1, c] * wx
                    c0 = c00 * (1.0 - wy) + c10 * wy
                    c1 = c01 * (1.0 - wy) + c11 * wy
                    out[iz, iy, ix, c] = c0 * (1.0 - wz) + c1 * wz


@njit(cache=True)
def diffusion_energy_grad(u, labels, inv_sp, grad):
    """Raw label-decoupled diffusion energy and its exact gradient.

    Energy is the sum over grid edges joining same-label voxels of
    (finite difference)^2, per component; edges straddling a label change
    contribute nothing. Returns the raw edge sum; callers normalize.
    grad must be zero-initialized.
    """
    nz, ny, nx = labels.shape
    e = 0.0
    ihx = inv_sp[0]
    ihy = inv_sp[1]
    ihz = inv_sp[2]
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                lab = labels[iz, iy, ix]
                if ix + 1 < nx and labels[iz, iy, ix + 1] == lab:
                    for c in range(3):
                        d = (u[iz, iy, ix + 1, c] - u[iz, iy, ix, c]) * ihx
                        e += d * d
                        g = d * ihx
                        grad[iz, iy, ix, c] -= g
                        grad[iz, iy, ix + 1, c] += g
                if iy + 1 < ny and labels[iz, iy + 1, ix] == lab:
                    for c in range(3):
                        d = (u[iz, iy + 1, ix, c] - u[iz, iy, ix, c]) * ihy
                        e += d * d
                        g = d * ihy
                        grad[iz, iy, ix, c] -= g
                        grad[iz, iy + 1, ix, c] += g
                if iz + 1 < nz and labels[iz + 1, iy, ix] == lab:
                    for c in range(3):
                        d = (u[iz + 1, iy, ix, c] - u[iz, iy, ix, c]) * ihz
                        e += d * d
                        g = d * ihz
                        grad[iz, iy, ix, c] -= g
                        grad[iz + 1, iy, ix, c] += g
    return e


@njit(cache=True)
def diffusion_energy(u, labels, inv_sp):
    """Energy-only variant of diffusion_energy_grad (line searches)."""
    nz, ny, nx = labels.shape
    e = 0.0
    ihx = inv_sp[0]
    ihy = inv_sp[1]
    ihz = inv_sp[2]
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                lab = labels[iz, iy, ix]
                if ix + 1 < nx and labels[iz, iy, ix + 1] == lab:
                    for c in range(3):
                        d = (u[iz, iy, ix + 1, c] - u[iz, iy, ix, c]) * ihx
                        e += d * d
                if iy + 1 < ny and labels[iz, iy + 1, ix] == lab:
                    for c in range(3):
                        d = (u[iz, iy + 1, ix, c] - u[iz, iy, ix, c]) * ihy
                        e += d * d
                if iz + 1 < nz and labels[iz + 1, iy, ix] == lab:
                    for c in range(3):
                        d = (u[iz + 1, iy, ix, c] - u[iz, iy, ix, c]) * ihz
                        e += d * d
    return e
