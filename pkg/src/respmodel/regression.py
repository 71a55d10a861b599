"""Linear surrogate-to-motion regression.

Per-phase displacement fields are serialized into columns of a tall matrix V
(all x components in x-fastest voxel order, then all y, then all z) and fit
against the 3 x N_phases regressor Z with rows (v, v', 1) by minimizing
||V - A Z||_F. The normal-equations solve goes through the 3x3 pseudo-inverse
of Z Z^T, so the whole fit is three field-sized accumulations regardless of
how many voxels there are, and rank-deficient surrogates degrade to the
minimum-norm solution instead of failing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyList, GridMismatch, IndexOutOfRange, ShapeMismatch
from .grid import DisplacementField, GridMeta, ScalarVolume, warp_image
from .surrogate import SurrogateSignal

__all__ = [
    "RegressorMatrix",
    "MotionModel",
    "serialize_fields",
    "deserialize_fields",
    "fit",
    "fit_fields",
    "predict",
    "animate",
]

# Relative singular-value cutoff for the 3x3 pseudo-inverse.
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class RegressorMatrix:
    """3 x N_phases regressor with fixed row order (v, v', 1)."""

    Z: np.ndarray

    def __post_init__(self):
        Z = np.ascontiguousarray(self.Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] != 3:
            raise ShapeMismatch(f"regressor must be 3 x N_phases, got {Z.shape}")
        if not np.allclose(Z[2], 1.0):
            raise ShapeMismatch("third regressor row must be all ones")
        if Z.shape[1] < 3:
            warnings.warn(
                f"only {Z.shape[1]} phases for a 3-parameter regression; "
                "coefficients will be rank-deficient",
                RuntimeWarning,
            )
        object.__setattr__(self, "Z", Z)

    @classmethod
    def from_signal(cls, signal: SurrogateSignal) -> "RegressorMatrix":
        return cls(np.vstack([signal.v, signal.v_prime, np.ones_like(signal.v)]))

    @property
    def n_phases(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class MotionModel:
    """Coefficient fields of u(x, t) = a1(x) v(t) + a2(x) v'(t) + a3(x).

    Units: a1 mm/ml, a2 mm*(time unit)/ml, a3 mm; all three share one grid.
    """

    a1: DisplacementField
    a2: DisplacementField
    a3: DisplacementField

    def __post_init__(self):
        if not (self.a1.meta == self.a2.meta == self.a3.meta):
            raise GridMismatch("model coefficient fields must share one grid")

    @property
    def meta(self) -> GridMeta:
        return self.a1.meta


def serialize_fields(fields: list[DisplacementField]) -> np.ndarray:
    """Stack fields into V (3*N_vox x N_phases); column j serializes field j."""
    if not fields:
        raise EmptyList("no fields to serialize")
    meta = fields[0].meta
    n = meta.n_vox
    V = np.empty((3 * n, len(fields)), dtype=np.float64)
    for j, f in enumerate(fields):
        if f.meta != meta:
            raise GridMismatch("all fields must share one grid")
        V[:, j] = _serialize_one(f.u, n)
    return V


def _serialize_one(u: np.ndarray, n: int) -> np.ndarray:
    col = np.empty(3 * n, dtype=np.float64)
    col[0:n] = u[..., 0].ravel()
    col[n : 2 * n] = u[..., 1].ravel()
    col[2 * n :] = u[..., 2].ravel()
    return col


def _deserialize_one(col: np.ndarray, meta: GridMeta) -> DisplacementField:
    n = meta.n_vox
    u = np.empty(meta.shape_zyx + (3,), dtype=np.float64)
    u[..., 0] = col[0:n].reshape(meta.shape_zyx)
    u[..., 1] = col[n : 2 * n].reshape(meta.shape_zyx)
    u[..., 2] = col[2 * n :].reshape(meta.shape_zyx)
    return DisplacementField(meta, u)


def deserialize_fields(V: np.ndarray, meta: GridMeta) -> list[DisplacementField]:
    """Inverse of serialize_fields (bit-exact round trip)."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != 3 * meta.n_vox:
        raise ShapeMismatch(f"matrix rows {V.shape} do not match grid {meta.dims}")
    return [_deserialize_one(V[:, j], meta) for j in range(V.shape[1])]


def _solve_gram(Z: np.ndarray) -> np.ndarray:
    """pinv(Z Z^T) with a relative singular-value cutoff; warns when rank < 3."""
    gram = Z @ Z.T
    pinv = np.linalg.pinv(gram, rcond=PINV_RCOND)
    if np.linalg.matrix_rank(gram, tol=PINV_RCOND * np.linalg.norm(gram, 2)) < 3:
        warnings.warn(
            "rank-deficient surrogate regressor; using the minimum-norm solution",
            RuntimeWarning,
        )
    return pinv


def fit(V: np.ndarray, Z: RegressorMatrix | np.ndarray, meta: GridMeta) -> MotionModel:
    """Global Frobenius-norm least squares A = V Z^T pinv(Z Z^T), deserialized
    into the three coefficient fields on meta's grid."""
    if not isinstance(Z, RegressorMatrix):
        Z = RegressorMatrix(Z)
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != Z.n_phases:
        raise ShapeMismatch(
            f"V has shape {V.shape}, expected (3*N_vox, {Z.n_phases})"
        )
    if V.shape[0] != 3 * meta.n_vox:
        raise ShapeMismatch(f"V rows {V.shape[0]} do not match grid {meta.dims}")
    A = V @ Z.Z.T @ _solve_gram(Z.Z)
    return MotionModel(
        _deserialize_one(A[:, 0], meta),
        _deserialize_one(A[:, 1], meta),
        _deserialize_one(A[:, 2], meta),
    )


def fit_fields(
    fields: list[DisplacementField], Z: RegressorMatrix | np.ndarray
) -> MotionModel:
    """Same least squares as fit(), streaming one phase field at a time so the
    dense V matrix is never materialized."""
    if not fields:
        raise EmptyList("no fields to fit")
    if not isinstance(Z, RegressorMatrix):
        Z = RegressorMatrix(Z)
    if len(fields) != Z.n_phases:
        raise ShapeMismatch(f"{len(fields)} fields vs {Z.n_phases} regressor columns")
    meta = fields[0].meta
    n = meta.n_vox
    vzt = np.zeros((3 * n, 3), dtype=np.float64)
    for j, f in enumerate(fields):
        if f.meta != meta:
            raise GridMismatch("all fields must share one grid")
        col = _serialize_one(f.u, n)
        for k in range(3):
            vzt[:, k] += col * Z.Z[k, j]
    A = vzt @ _solve_gram(Z.Z)
    return MotionModel(
        _deserialize_one(A[:, 0], meta),
        _deserialize_one(A[:, 1], meta),
        _deserialize_one(A[:, 2], meta),
    )


def predict(model: MotionModel, v: float, v_prime: float) -> DisplacementField:
    """Pointwise a1*v + a2*v' + a3."""
    u = model.a1.u * float(v) + model.a2.u * float(v_prime) + model.a3.u
    return DisplacementField(model.meta, u)


def fit_residual(model: MotionModel, fields: list[DisplacementField],
                 Z: RegressorMatrix | np.ndarray) -> float:
    """Frobenius norm ||V - A Z||_F of the fit residual."""
    if not isinstance(Z, RegressorMatrix):
        Z = RegressorMatrix(Z)
    acc = 0.0
    for j, f in enumerate(fields):
        pred = predict(model, Z.Z[0, j], Z.Z[1, j])
        acc += float(((f.u - pred.u) ** 2).sum())
    return float(np.sqrt(acc))


def animate(
    ref_image: ScalarVolume,
    model: MotionModel,
    signal: SurrogateSignal,
    t_index: int,
) -> ScalarVolume:
    """Breathing state at one signal sample: warp ref_image by the predicted field."""
    if ref_image.meta != model.meta:
        raise GridMismatch("reference image and model live on different grids")
    if not (0 <= t_index < len(signal)):
        raise IndexOutOfRange(f"t_index {t_index} outside 0..{len(signal) - 1}")
    v, vp = signal.sample(t_index)
    return warp_image(ref_image, predict(model, v, vp))
