"""File formats: RVF volumes/fields, signal CSV, dataset and model manifests.

An RVF volume is a JSON sidecar ``name.rvf`` plus a raw little-endian
float32 file ``name.raw`` next to it. Scalars and masks store one value per
voxel in x-fastest order; fields store (ux, uy, uz) interleaved per voxel.
All JSON is written with sorted keys so pipeline outputs are byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InconsistentPhaseCount, ValidationError
from .grid import DisplacementField, GridMeta, MaskVolume, ScalarVolume
from .regression import MotionModel
from .surrogate import SurrogateSignal, derive

__all__ = [
    "write_rvf",
    "read_rvf",
    "write_signal_csv",
    "read_signal_csv",
    "save_motion_model",
    "load_motion_model",
    "write_json",
    "read_json",
]

_RVF_SCHEMA = "rvf-1"


def write_json(path: Path | str, obj) -> None:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: Path | str):
    return json.loads(Path(path).read_text())


def _raw_path(sidecar: Path) -> Path:
    return sidecar.with_suffix(".raw")


def write_rvf(path: Path | str, obj: ScalarVolume | MaskVolume | DisplacementField) -> Path:
    """Write a volume, mask, or field as sidecar + raw pair; returns the sidecar path."""
    path = Path(path)
    if path.suffix != ".rvf":
        path = path.with_suffix(".rvf")
    if isinstance(obj, ScalarVolume):
        kind, data = "scalar", obj.values
    elif isinstance(obj, MaskVolume):
        kind, data = "mask", obj.labels
    elif isinstance(obj, DisplacementField):
        kind, data = "field", obj.u
    else:
        raise ValidationError(f"cannot write object of type {type(obj).__name__}")
    meta = obj.meta
    sidecar = {
        "schema": _RVF_SCHEMA,
        "kind": kind,
        "dims": list(meta.dims),
        "spacing": list(meta.spacing),
        "origin": list(meta.origin),
        "dtype": "f32",
        "order": "x-fastest",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, sidecar)
    data.astype("<f4").ravel().tofile(_raw_path(path))
    return path


def read_rvf(path: Path | str) -> ScalarVolume | MaskVolume | DisplacementField:
    path = Path(path)
    side = read_json(path)
    if side.get("schema") != _RVF_SCHEMA:
        raise ValidationError(f"{path}: unsupported schema {side.get('schema')!r}")
    if side.get("dtype") != "f32" or side.get("order") != "x-fastest":
        raise ValidationError(f"{path}: unsupported dtype/order")
    meta = GridMeta(tuple(side["dims"]), tuple(side["spacing"]), tuple(side["origin"]))
    kind = side.get("kind")
    n_comp = 3 if kind == "field" else 1
    raw = np.fromfile(_raw_path(path), dtype="<f4")
    if raw.size != meta.n_vox * n_comp:
        raise ValidationError(
            f"{path}: raw file holds {raw.size} values, expected {meta.n_vox * n_comp}"
        )
    if kind == "scalar":
        return ScalarVolume(meta, raw.astype(np.float64).reshape(meta.shape_zyx))
    if kind == "mask":
        vals = raw.reshape(meta.shape_zyx)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValidationError(f"{path}: mask values must be 0 or 1")
        return MaskVolume(meta, vals.astype(np.uint8))
    if kind == "field":
        u = raw.astype(np.float64).reshape(meta.shape_zyx + (3,))
        return DisplacementField(meta, u)
    raise ValidationError(f"{path}: unknown kind {kind!r}")


def write_signal_csv(path: Path | str, signal: SurrogateSignal) -> Path:
    """CSV with header t_s,v_ml; the derivative is never stored."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["t_s,v_ml"]
    lines += [f"{t!r},{v!r}" for t, v in zip(signal.t, signal.v)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_signal_csv(path: Path | str, v_range=None) -> SurrogateSignal:
    """Load a signal CSV; the derivative is recomputed from the samples."""
    path = Path(path)
    rows = path.read_text().strip().splitlines()
    if not rows or rows[0].strip() != "t_s,v_ml":
        raise ValidationError(f"{path}: expected header 't_s,v_ml'")
    t, v = [], []
    for line in rows[1:]:
        a, b = line.split(",")
        t.append(float(a))
        v.append(float(b))
    return derive(np.asarray(t), np.asarray(v), v_range=v_range)


_MODEL_SCHEMA = "motionmodel-1"
_MODEL_UNITS = {"a1": "mm/ml", "a2": "mm*s/ml", "a3": "mm"}


def save_motion_model(model: MotionModel, out_dir: Path | str) -> Path:
    """Persist a motion model as a1/a2/a3 RVF fields plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, f in (("a1", model.a1), ("a2", model.a2), ("a3", model.a3)):
        write_rvf(out_dir / f"{name}.rvf", f)
    meta = model.meta
    write_json(
        out_dir / "model.json",
        {
            "schema": _MODEL_SCHEMA,
            "grid": {
                "dims": list(meta.dims),
                "spacing": list(meta.spacing),
                "origin": list(meta.origin),
            },
            "units": _MODEL_UNITS,
            "coefficients": {"a1": "a1.rvf", "a2": "a2.rvf", "a3": "a3.rvf"},
        },
    )
    return out_dir / "model.json"


def load_motion_model(model_dir: Path | str) -> MotionModel:
    model_dir = Path(model_dir)
    manifest = read_json(model_dir / "model.json")
    if manifest.get("schema") != _MODEL_SCHEMA:
        raise ValidationError(f"{model_dir}: unsupported model schema")
    coeffs = manifest.get("coefficients", {"a1": "a1.rvf", "a2": "a2.rvf", "a3": "a3.rvf"})
    fields = {}
    for name in ("a1", "a2", "a3"):
        obj = read_rvf(model_dir / coeffs[name])
        if not isinstance(obj, DisplacementField):
            raise ValidationError(f"{model_dir}/{coeffs[name]}: expected a field")
        fields[name] = obj
    return MotionModel(fields["a1"], fields["a2"], fields["a3"])


_DS_SCHEMA = "ds4d-1"


def save_dataset4d(
    out_dir: Path | str,
    patient_id: str,
    ref_phase_index: int,
    phase_images: list[ScalarVolume],
    signal: SurrogateSignal,
    masks: dict[str, MaskVolume] | None = None,
) -> Path:
    """Write a 4D dataset directory with its ds4d-1 manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "phases").mkdir(parents=True, exist_ok=True)
    phases = []
    for j, img in enumerate(phase_images):
        rel = f"phases/phase_{j:02d}.rvf"
        write_rvf(out_dir / rel, img)
        phases.append({"index": j, "image": rel})
    write_signal_csv(out_dir / "signal.csv", signal)
    mask_entries = {}
    if masks:
        (out_dir / "masks").mkdir(exist_ok=True)
        for name in sorted(masks):
            rel = f"masks/{name}.rvf"
            write_rvf(out_dir / rel, masks[name])
            mask_entries[name] = rel
    manifest = {
        "schema": _DS_SCHEMA,
        "patient_id": patient_id,
        "ref_phase_index": int(ref_phase_index),
        "phases": phases,
        "signal": "signal.csv",
        "masks": mask_entries,
    }
    path = out_dir / "dataset.json"
    write_json(path, manifest)
    return path


def load_dataset4d(manifest_path: Path | str):
    """Load a ds4d-1 manifest; returns (patient_id, ref_index, images, signal, masks)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "dataset.json"
    m = read_json(manifest_path)
    if m.get("schema") != _DS_SCHEMA:
        raise ValidationError(f"{manifest_path}: unsupported dataset schema")
    root = manifest_path.parent
    entries = sorted(m["phases"], key=lambda e: e["index"])
    if [e["index"] for e in entries] != list(range(len(entries))):
        raise InconsistentPhaseCount(f"{manifest_path}: phase indices must be 0..N-1")
    images = []
    for e in entries:
        obj = read_rvf(root / e["image"])
        if not isinstance(obj, ScalarVolume):
            raise ValidationError(f"{e['image']}: expected a scalar volume")
        images.append(obj)
    ref = int(m["ref_phase_index"])
    if not (0 <= ref < len(images)):
        raise ValidationError(f"{manifest_path}: ref_phase_index {ref} out of range")
    signal = read_signal_csv(root / m["signal"])
    if len(signal) != len(images):
        raise InconsistentPhaseCount(
            f"{manifest_path}: {len(signal)} signal samples vs {len(images)} phases"
        )
    masks = {}
    for name, rel in sorted(m.get("masks", {}).items()):
        obj = read_rvf(root / rel)
        if not isinstance(obj, MaskVolume):
            raise ValidationError(f"{rel}: expected a mask")
        masks[name] = obj
    return m["patient_id"], ref, images, signal, masks
