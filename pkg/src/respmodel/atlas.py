"""Population mean motion model: build, average, and transfer.

Per-patient motion (phase fields on the patient's own reference frame) is
carried into a common reference patient's frame by conjugating with the
inter-patient registration field, averaged per phase together with the
surrogate signals and reference-phase intensities, and refit into a mean
motion model. The same conjugation transfers the mean model onto a new
static volume that was acquired in the matching breathing state.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    EmptyList,
    GridMismatch,
    InconsistentPhaseCount,
    ValidationError,
)
from .grid import (
    DisplacementField,
    GridMeta,
    MaskVolume,
    ScalarVolume,
    compose_fields,
    invert_field,
    warp_image,
)
from .registration import RegistrationConfig, register
from .regression import MotionModel, RegressorMatrix, fit_fields
from .surrogate import SurrogateSignal, average_signals

__all__ = [
    "PatientMotionSet",
    "MeanAtlas",
    "register_to_reference",
    "transport_field",
    "average_fields",
    "build_mean_atlas",
    "transfer_to_new",
    "transfer_to_new_full",
]


@dataclass(frozen=True)
class PatientMotionSet:
    """One patient's fitted motion: per-phase fields on the reference-phase
    frame (zero at ref_phase_index), surrogate signal, reference image, and
    optional structure masks at the reference phase."""

    patient_id: str
    ref_phase_index: int
    phase_fields: list[DisplacementField]
    signal: SurrogateSignal
    ref_image: ScalarVolume
    masks: dict[str, MaskVolume] = dc_field(default_factory=dict)

    def __post_init__(self):
        if not self.phase_fields:
            raise EmptyList("patient needs at least one phase field")
        meta = self.ref_image.meta
        for f in self.phase_fields:
            if f.meta != meta:
                raise GridMismatch("phase fields must live on the reference image grid")
        for m in self.masks.values():
            if m.meta != meta:
                raise GridMismatch("masks must live on the reference image grid")
        if not (0 <= self.ref_phase_index < len(self.phase_fields)):
            raise ValidationError("ref_phase_index out of range")
        if len(self.signal) != len(self.phase_fields):
            raise InconsistentPhaseCount(
                f"{len(self.signal)} signal samples vs {len(self.phase_fields)} fields"
            )
        ref_norm = self.phase_fields[self.ref_phase_index].max_norm()
        if ref_norm > 1e-9:
            raise ValidationError(
                f"field at the reference phase must be identity, |u|={ref_norm:.3g} mm"
            )

    @property
    def n_phases(self) -> int:
        return len(self.phase_fields)


@dataclass(frozen=True)
class MeanAtlas:
    """Mean breathing patient: averaged per-phase fields, signal, intensity
    image, structure masks (majority vote), and the fitted mean model, all on
    the reference patient's grid."""

    ref_patient_id: str
    mean_phase_fields: list[DisplacementField]
    mean_signal: SurrogateSignal
    mean_image: ScalarVolume
    mean_model: MotionModel
    masks: dict[str, MaskVolume] = dc_field(default_factory=dict)

    def __post_init__(self):
        meta = self.mean_image.meta
        for f in self.mean_phase_fields:
            if f.meta != meta:
                raise GridMismatch("mean fields must live on the reference grid")
        if self.mean_model.meta != meta:
            raise GridMismatch("mean model must live on the reference grid")

    @property
    def meta(self) -> GridMeta:
        return self.mean_image.meta

    @property
    def n_phases(self) -> int:
        return len(self.mean_phase_fields)

    def peak_phase_index(self) -> int:
        return int(np.argmax(self.mean_signal.v))


def register_to_reference(
    patient: PatientMotionSet,
    reference: PatientMotionSet,
    cfg: RegistrationConfig,
) -> DisplacementField:
    """Inter-patient field on the reference grid that pulls the patient's
    reference-phase image onto the reference patient's."""
    if patient.ref_image.meta != reference.ref_image.meta:
        raise GridMismatch("resample patients to a shared grid before registration")
    return register(reference.ref_image, patient.ref_image, cfg).field


def transport_field(
    phi_patient_j: DisplacementField, phi_inter: DisplacementField
) -> DisplacementField:
    """Conjugation phi_inter o phi_patient_j o phi_inter^-1: expresses one
    phase's motion in the frame the inter-patient field was computed on."""
    inv = invert_field(phi_inter)
    return compose_fields(compose_fields(phi_inter, phi_patient_j), inv)


def _transport_all(
    fields: list[DisplacementField], phi_inter: DisplacementField
) -> list[DisplacementField]:
    if not np.any(phi_inter.u):
        return [DisplacementField(f.meta, f.u.copy()) for f in fields]
    inv = invert_field(phi_inter)
    return [compose_fields(compose_fields(phi_inter, f), inv) for f in fields]


def average_fields(fields: list[DisplacementField]) -> DisplacementField:
    """Voxelwise arithmetic mean of displacement vectors."""
    if not fields:
        raise EmptyList("no fields to average")
    meta = fields[0].meta
    acc = np.zeros_like(fields[0].u)
    for f in fields:
        if f.meta != meta:
            raise GridMismatch("fields must share one grid")
        acc += f.u
    return DisplacementField(meta, acc / len(fields))


def _mean_mask(warped: list[np.ndarray], meta: GridMeta) -> MaskVolume:
    stack = np.mean(warped, axis=0)
    return MaskVolume(meta, (stack >= 0.5).astype(np.uint8))


def build_mean_atlas(
    patients: list[PatientMotionSet],
    reference_id: str,
    reg_cfg: RegistrationConfig,
    include_reference: bool = True,
) -> MeanAtlas:
    """Average the population's motion in the reference patient's frame.

    Every non-reference patient is registered to the reference patient's
    reference-phase image; its phase fields are conjugated into that frame;
    fields, signals, and warped intensities are averaged (the reference
    patient participates with an identity inter-patient transform unless
    include_reference is False); the mean model is refit on the averages.
    """
    if not patients:
        raise EmptyList("no patients")
    by_id = {p.patient_id: p for p in patients}
    if len(by_id) != len(patients):
        raise ValidationError("duplicate patient ids")
    if reference_id not in by_id:
        raise ValidationError(f"reference {reference_id!r} not among patients")
    reference = by_id[reference_id]
    n_phases = reference.n_phases
    meta = reference.ref_image.meta
    for p in patients:
        if p.n_phases != n_phases:
            raise InconsistentPhaseCount(
                f"{p.patient_id}: {p.n_phases} phases, expected {n_phases}"
            )
        if p.ref_image.meta != meta:
            raise GridMismatch(f"{p.patient_id}: not on the reference grid")

    contributors = patients if include_reference else [
        p for p in patients if p.patient_id != reference_id
    ]
    if not contributors:
        raise ValidationError("no contributing patients (population is only the reference)")

    # Reference first so its sample times become the averaging time base.
    contributors = sorted(
        contributors, key=lambda p: (p.patient_id != reference_id, p.patient_id)
    )
    per_phase: list[list[DisplacementField]] = [[] for _ in range(n_phases)]
    images = []
    signals = [p.signal for p in contributors]
    mask_names = set(contributors[0].masks)
    for p in contributors[1:]:
        mask_names &= set(p.masks)
    warped_masks: dict[str, list[np.ndarray]] = {n: [] for n in sorted(mask_names)}

    for p in contributors:
        if p.patient_id == reference_id:
            phi = DisplacementField.zeros(meta)
            images.append(p.ref_image.values)
            for name in warped_masks:
                warped_masks[name].append(p.masks[name].labels.astype(np.float64))
        else:
            phi = register_to_reference(p, reference, reg_cfg)
            images.append(warp_image(p.ref_image, phi).values)
            for name in warped_masks:
                warped_masks[name].append(
                    warp_image(p.masks[name].volume_f64(), phi).values
                )
        for j, f in enumerate(_transport_all(p.phase_fields, phi)):
            per_phase[j].append(f)

    mean_fields = [average_fields(fs) for fs in per_phase]
    mean_signal = average_signals(signals)
    mean_image = ScalarVolume(meta, np.mean(images, axis=0))
    masks = {n: _mean_mask(w, meta) for n, w in warped_masks.items()}
    mean_model = fit_fields(mean_fields, RegressorMatrix.from_signal(mean_signal))
    return MeanAtlas(
        ref_patient_id=reference_id,
        mean_phase_fields=mean_fields,
        mean_signal=mean_signal,
        mean_image=mean_image,
        mean_model=mean_model,
        masks=masks,
    )


def transfer_to_new_full(
    atlas: MeanAtlas, new_image: ScalarVolume, reg_cfg: RegistrationConfig
) -> tuple[MotionModel, DisplacementField]:
    """Transfer the mean model onto a new static volume.

    Registers the mean image onto the new image (the new patient must be in
    the atlas's reference breathing state), conjugates every mean phase field
    into the new frame, and refits the regression against the mean signal.
    Returns the new model and the inter-patient field used for the transfer.
    """
    if new_image.meta != atlas.meta:
        raise GridMismatch("resample the new image to the atlas grid first")
    phi = register(new_image, atlas.mean_image, reg_cfg).field
    transported = _transport_all(atlas.mean_phase_fields, phi)
    model = fit_fields(transported, RegressorMatrix.from_signal(atlas.mean_signal))
    return model, phi


def transfer_to_new(
    atlas: MeanAtlas, new_image: ScalarVolume, reg_cfg: RegistrationConfig
) -> MotionModel:
    return transfer_to_new_full(atlas, new_image, reg_cfg)[0]


# ---------------------------------------------------------------------------
# Atlas directory persistence
# ---------------------------------------------------------------------------

_ATLAS_SCHEMA = "atlas-1"


def save_atlas(atlas: MeanAtlas, out_dir) -> None:
    """Atlas directory: mean image, per-phase fields, signal CSV, model, masks."""
    from pathlib import Path

    from .io_rvf import save_motion_model, write_json, write_rvf, write_signal_csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rvf(out_dir / "mean_image.rvf", atlas.mean_image)
    for j, f in enumerate(atlas.mean_phase_fields):
        write_rvf(out_dir / "fields" / f"phase_{j:02d}.rvf", f)
    write_signal_csv(out_dir / "signal.csv", atlas.mean_signal)
    save_motion_model(atlas.mean_model, out_dir / "model")
    for name in sorted(atlas.masks):
        write_rvf(out_dir / "masks" / f"{name}.rvf", atlas.masks[name])
    write_json(
        out_dir / "atlas.json",
        {
            "schema": _ATLAS_SCHEMA,
            "ref_patient_id": atlas.ref_patient_id,
            "n_phases": atlas.n_phases,
            "masks": sorted(atlas.masks),
        },
    )


def load_atlas(atlas_dir) -> MeanAtlas:
    from pathlib import Path

    from .io_rvf import load_motion_model, read_json, read_rvf, read_signal_csv

    atlas_dir = Path(atlas_dir)
    info = read_json(atlas_dir / "atlas.json")
    if info.get("schema") != _ATLAS_SCHEMA:
        raise ValidationError(f"{atlas_dir}: unsupported atlas schema")
    mean_image = read_rvf(atlas_dir / "mean_image.rvf")
    fields = [
        read_rvf(atlas_dir / "fields" / f"phase_{j:02d}.rvf")
        for j in range(int(info["n_phases"]))
    ]
    signal = read_signal_csv(atlas_dir / "signal.csv")
    model = load_motion_model(atlas_dir / "model")
    masks = {
        name: read_rvf(atlas_dir / "masks" / f"{name}.rvf")
        for name in info.get("masks", [])
    }
    return MeanAtlas(
        ref_patient_id=info["ref_patient_id"],
        mean_phase_fields=fields,
        mean_signal=signal,
        mean_image=mean_image,
        mean_model=model,
        masks=masks,
    )
