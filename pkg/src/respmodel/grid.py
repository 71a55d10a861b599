"""Volume and displacement-field containers plus the field algebra.

Conventions, fixed package-wide:

- Grids are axis-aligned; world position of voxel (ix, iy, iz) is
  origin + index * spacing, in mm. No orientation matrices.
- Arrays are C-contiguous float64 shaped (nz, ny, nx) so the x index is
  fastest in memory; ``values.ravel()`` therefore yields the canonical
  x-fastest flat ordering.
- A displacement field u (mm) defines the mapping phi(x) = x + u(x); all
  warps are backward (each output voxel pulls from the input volume), and
  sampling outside the grid clamps to the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import GridMismatch, InvalidDims, NonConvergence, ValidationError

__all__ = [
    "GridMeta",
    "ScalarVolume",
    "MaskVolume",
    "DisplacementField",
    "sample_trilinear",
    "warp_image",
    "compose_fields",
    "invert_field",
    "inversion_residual",
    "resample_volume",
    "resample_field",
]


@dataclass(frozen=True)
class GridMeta:
    """Grid geometry: dims (nx, ny, nz), spacing mm/voxel, origin mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InvalidDims("dims, spacing, origin must have length 3")
        if any(d < 2 for d in dims):
            raise InvalidDims(f"dims must be >= 2 per axis, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(spacing)) or not all(np.isfinite(origin)):
            raise ValidationError("spacing and origin must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_vox(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        return (self.dims[2], self.dims[1], self.dims[0])

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical extent dims*spacing in mm (the quantity resampling preserves)."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """World mm -> fractional voxel index, (..., 3) arrays, (x, y, z) order."""
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        i = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + i * np.asarray(self.spacing)

    def coordinate_grid(self) -> np.ndarray:
        """World coordinates of every voxel, shape (nz, ny, nx, 3), (x, y, z) order."""
        nx, ny, nz = self.dims
        iz, iy, ix = np.meshgrid(
            np.arange(nz, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            np.arange(nx, dtype=np.float64),
            indexing="ij",
        )
        out = np.empty((nz, ny, nx, 3), dtype=np.float64)
        out[..., 0] = self.origin[0] + ix * self.spacing[0]
        out[..., 1] = self.origin[1] + iy * self.spacing[1]
        out[..., 2] = self.origin[2] + iz * self.spacing[2]
        return out

    def _inv_spacing(self) -> np.ndarray:
        return 1.0 / np.asarray(self.spacing, dtype=np.float64)


def _require_same_grid(a: GridMeta, b: GridMeta, what: str = "inputs") -> None:
    if a != b:
        raise GridMismatch(f"{what} live on different grids: {a} vs {b}")


def _as_volume_array(meta: GridMeta, values, n_comp: int | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    want = meta.shape_zyx if n_comp is None else meta.shape_zyx + (n_comp,)
    if arr.size == np.prod(want):
        arr = arr.reshape(want)
    if arr.shape != want:
        raise ValidationError(f"array shape {arr.shape} does not match grid {want}")
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Dense scalar grid (image); values shaped (nz, ny, nx) float64."""

    meta: GridMeta
    values: np.ndarray

    def __post_init__(self):
        arr = _as_volume_array(self.meta, self.values)
        if not np.isfinite(arr).all():
            raise ValidationError("volume values must be finite")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, meta: GridMeta, flat: np.ndarray) -> "ScalarVolume":
        """Build from the canonical x-fastest flat ordering."""
        return cls(meta, np.asarray(flat).reshape(meta.shape_zyx))

    @classmethod
    def full(cls, meta: GridMeta, value: float) -> "ScalarVolume":
        return cls(meta, np.full(meta.shape_zyx, float(value)))

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass(frozen=True)
class MaskVolume:
    """Binary labels on a grid; stored uint8 in {0, 1}."""

    meta: GridMeta
    labels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels)
        want = self.meta.shape_zyx
        if arr.size == np.prod(want):
            arr = arr.reshape(want)
        if arr.shape != want:
            raise ValidationError(f"mask shape {arr.shape} does not match grid {want}")
        if arr.dtype != np.uint8:
            if not np.isin(arr, (0, 1)).all():
                raise ValidationError("mask labels must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > 1:
            raise ValidationError("mask labels must be 0 or 1")
        object.__setattr__(self, "labels", np.ascontiguousarray(arr))

    def volume_f64(self) -> ScalarVolume:
        return ScalarVolume(self.meta, self.labels.astype(np.float64))

    def count(self) -> int:
        return int(self.labels.sum())


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors u (mm), shaped (nz, ny, nx, 3) as (ux, uy, uz)."""

    meta: GridMeta
    u: np.ndarray

    def __post_init__(self):
        arr = _as_volume_array(self.meta, self.u, n_comp=3)
        if not np.isfinite(arr).all():
            raise ValidationError("displacement components must be finite")
        object.__setattr__(self, "u", arr)

    @classmethod
    def zeros(cls, meta: GridMeta) -> "DisplacementField":
        return cls(meta, np.zeros(meta.shape_zyx + (3,)))

    @classmethod
    def constant(cls, meta: GridMeta, vec) -> "DisplacementField":
        u = np.empty(meta.shape_zyx + (3,))
        u[...] = np.asarray(vec, dtype=np.float64)
        return cls(meta, u)

    def max_norm(self) -> float:
        """Largest displacement magnitude over the grid, mm."""
        return float(np.sqrt((self.u ** 2).sum(axis=-1)).max())


# ---------------------------------------------------------------------------
# Field algebra
# ---------------------------------------------------------------------------

def sample_trilinear(vol: ScalarVolume, p) -> float | np.ndarray:
    """Trilinear sample of vol at world point(s) p (mm); out-of-grid clamps to edge.

    p may be a single (3,) point or an (n, 3) batch; returns a scalar or (n,).
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    fidx = np.ascontiguousarray(vol.meta.world_to_index(pts.reshape(-1, 3)))
    out = np.empty(fidx.shape[0], dtype=np.float64)
    _kernels.sample_points_scalar(vol.values, fidx, out)
    return float(out[0]) if single else out


def warp_image(img: ScalarVolume, field: DisplacementField) -> ScalarVolume:
    """Backward warp: out(x) = img(x + u(x)), trilinear, clamp at the boundary."""
    _require_same_grid(img.meta, field.meta, "image and field")
    out = np.empty_like(img.values)
    _kernels.pull_scalar(img.values, field.u, field.meta._inv_spacing(), out)
    return ScalarVolume(img.meta, out)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Composition phi_outer o phi_inner: u(x) = u_in(x) + u_out(x + u_in(x))."""
    _require_same_grid(outer.meta, inner.meta, "fields")
    pulled = np.empty_like(outer.u)
    _kernels.pull_vectors(outer.u, inner.u, outer.meta._inv_spacing(), pulled)
    return DisplacementField(outer.meta, inner.u + pulled)


def invert_field(
    field: DisplacementField, tol: float = 0.01, max_iter: int = 50
) -> DisplacementField:
    """Fixed-point inverse: iterate v <- -u(x + v(x)) from v = 0.

    Stops when the largest update falls below tol (mm). Raises NonConvergence
    if after max_iter the update still exceeds 10*tol. Intended for smooth,
    small (diffeomorphic-in-practice) respiratory displacements.
    """
    inv_sp = field.meta._inv_spacing()
    v = np.zeros_like(field.u)
    pulled = np.empty_like(field.u)
    delta = 0.0
    for _ in range(max_iter):
        _kernels.pull_vectors(field.u, v, inv_sp, pulled)
        np.negative(pulled, out=pulled)
        delta = float(np.sqrt(((pulled - v) ** 2).sum(axis=-1)).max())
        v, pulled = pulled, v
        if delta < tol:
            break
    else:
        if delta > 10.0 * tol:
            raise NonConvergence(
                f"field inversion update {delta:.4g} mm after {max_iter} iterations "
                f"(tol {tol:g} mm)"
            )
    return DisplacementField(field.meta, v)


def inversion_residual(field: DisplacementField, inverse: DisplacementField) -> float:
    """Max |phi o phi^-1 - id| in mm, via the composition oracle."""
    return compose_fields(field, inverse).max_norm()


def _resample_geometry(src: GridMeta, new_dims) -> GridMeta:
    dims = tuple(int(d) for d in new_dims)
    if len(dims) != 3 or any(d < 2 for d in dims):
        raise InvalidDims(f"new_dims must be 3 integers >= 2, got {new_dims!r}")
    spacing = tuple(s * d / nd for s, d, nd in zip(src.spacing, src.dims, dims))
    return GridMeta(dims, spacing, src.origin)


def _index_map(src: GridMeta, dst: GridMeta):
    """Per-axis scale/offset turning a dst voxel index into a src fractional index."""
    scale = np.asarray(dst.spacing) / np.asarray(src.spacing)
    offset = (np.asarray(dst.origin) - np.asarray(src.origin)) / np.asarray(src.spacing)
    return np.ascontiguousarray(scale), np.ascontiguousarray(offset)


def resample_volume(vol: ScalarVolume, new_dims) -> ScalarVolume:
    """Resample to new dims; spacing rescales so the physical extent is unchanged."""
    dst = _resample_geometry(vol.meta, new_dims)
    if dst == vol.meta:
        return ScalarVolume(vol.meta, vol.values.copy())
    scale, offset = _index_map(vol.meta, dst)
    out = np.empty(dst.shape_zyx, dtype=np.float64)
    _kernels.resample_scalar(vol.values, scale, offset, out)
    return ScalarVolume(dst, out)


def resample_field(field: DisplacementField, new_dims) -> DisplacementField:
    """Componentwise resample of a displacement field; vectors stay in mm."""
    dst = _resample_geometry(field.meta, new_dims)
    if dst == field.meta:
        return DisplacementField(field.meta, field.u.copy())
    scale, offset = _index_map(field.meta, dst)
    out = np.empty(dst.shape_zyx + (3,), dtype=np.float64)
    _kernels.resample_vectors(field.u, scale, offset, out)
    return DisplacementField(dst, out)


def resample_volume_to(vol: ScalarVolume, dst: GridMeta) -> ScalarVolume:
    """Resample onto an arbitrary target grid (clamp sampling outside the source)."""
    if dst == vol.meta:
        return ScalarVolume(vol.meta, vol.values.copy())
    scale, offset = _index_map(vol.meta, dst)
    out = np.empty(dst.shape_zyx, dtype=np.float64)
    _kernels.resample_scalar(vol.values, scale, offset, out)
    return ScalarVolume(dst, out)
