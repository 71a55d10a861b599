"""Command-line pipeline: phantom | fit | atlas | transfer | animate | evaluate.

Every stage reads and writes plain files (RVF volumes, CSV signals, JSON
manifests) so intermediate artifacts stay inspectable and re-runnable.
Exit codes are stable for scripting: 0 success, 2 I/O error, 3 numerical
failure, 4 validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import io_rvf
from .atlas import (
    MeanAtlas,
    PatientMotionSet,
    build_mean_atlas,
    load_atlas,
    save_atlas,
    transfer_to_new_full,
)
from .errors import InvalidConfig, NumericalError, ValidationError
from .evaluation import (
    DiceReport,
    _summarize,
    estimate_phase_fields,
    leave_one_out,
    run_fold,
)
from .grid import DisplacementField, MaskVolume, ScalarVolume, resample_volume, warp_image
from .phantom import (
    PhantomConfig,
    generate_population,
    load_phantom_patient,
    save_phantom_patient,
)
from .registration import RegistrationConfig
from .regression import RegressorMatrix, fit_fields, fit_residual, predict
from .surrogate import SignalSimConfig, simulate

EXIT_OK = 0
EXIT_IO = 2
EXIT_NUMERICAL = 3
EXIT_VALIDATION = 4


def _levels_for(resolution: int) -> int:
    """Pyramid depth reaching a ~8 voxel coarsest level."""
    levels = 1
    while resolution // (2 ** levels) >= 8:
        levels += 1
    return max(3, levels)


@dataclass
class PipelineConfig:
    """Stage configuration: working resolution plus the two registration
    presets (intra-patient interphase, inter-patient)."""

    resolution: int = 64
    seed: int = 0
    jobs: int = 1
    intra: dict = dc_field(default_factory=dict)
    inter: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        r = self.resolution
        if r < 32 or r > 256 or (r & (r - 1)) != 0:
            raise InvalidConfig(f"resolution must be a power of two in [32, 256], got {r}")
        if self.jobs < 1:
            raise InvalidConfig("jobs must be >= 1")

    def intra_cfg(self, sliding_mask: MaskVolume | None = None) -> RegistrationConfig:
        doc = {
            "metric": "NSSD",
            "regularizer": "SMP" if sliding_mask is not None else "DNL",
            "weight": 0.1,
            "levels": _levels_for(self.resolution),
            "iters_per_level": 100,
            "step_size": 0.5,
        }
        doc.update(self.intra)
        if doc["regularizer"] == "SMP" and sliding_mask is None:
            doc["regularizer"] = "DNL"
        return RegistrationConfig(sliding_mask=sliding_mask, **doc)

    def inter_cfg(self) -> RegistrationConfig:
        doc = {
            "metric": "SSD",
            "regularizer": "DNL",
            "weight": 1.0,
            "levels": _levels_for(self.resolution),
            "iters_per_level": 150,
            "step_size": 0.5,
        }
        doc.update(self.inter)
        return RegistrationConfig(**doc)

    @classmethod
    def load(cls, args) -> "PipelineConfig":
        doc = {}
        if getattr(args, "config", None):
            doc = io_rvf.read_json(args.config)
        kwargs = {
            k: doc[k] for k in ("resolution", "seed", "jobs", "intra", "inter") if k in doc
        }
        cfg = cls(**kwargs)
        # Command-line flags override the config file.
        if getattr(args, "resolution", None):
            cfg = PipelineConfig(
                resolution=args.resolution, seed=cfg.seed, jobs=cfg.jobs,
                intra=cfg.intra, inter=cfg.inter,
            )
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "jobs", None):
            cfg.jobs = args.jobs
        return cfg


def _resample_to(img: ScalarVolume, resolution: int) -> ScalarVolume:
    if img.meta.dims == (resolution,) * 3:
        return img
    return resample_volume(img, (resolution,) * 3)


def _resample_mask(mask: MaskVolume, resolution: int) -> MaskVolume:
    if mask.meta.dims == (resolution,) * 3:
        return mask
    vol = resample_volume(mask.volume_f64(), (resolution,) * 3)
    return MaskVolume(vol.meta, (vol.values >= 0.5).astype(np.uint8))


def _field_stats(f: DisplacementField) -> dict:
    mag = np.sqrt((f.u ** 2).sum(axis=-1))
    return {"mean_abs_mm": float(mag.mean()), "max_mm": float(mag.max())}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = PipelineConfig.load(args)
    doc = io_rvf.read_json(args.config) if args.config else {}
    pcfg_doc = doc.get("phantom", {})
    organs = None  # organ geometry comes from package defaults unless configured
    pkw = {
        k: pcfg_doc[k]
        for k in ("dims", "spacing", "n_phases", "signal_amp", "hysteresis")
        if k in pcfg_doc
    }
    if "dims" in pkw:
        pkw["dims"] = tuple(pkw["dims"])
    if "spacing" in pkw:
        pkw["spacing"] = tuple(pkw["spacing"])
    pcfg = PhantomConfig(seed=cfg.seed, organs=organs, **pkw)
    population = generate_population(pcfg, variations=doc.get("variations"))
    out = Path(args.out)
    patients = []
    for truth in population:
        pdir = out / truth.patient_id
        save_phantom_patient(truth, pdir)
        patients.append(truth.patient_id)
        print(f"wrote {pdir}")
    io_rvf.write_json(
        out / "population.json",
        {"schema": "phantompop-1", "patients": patients, "seed": cfg.seed},
    )
    return EXIT_OK


def _load_dataset_resampled(manifest: Path, resolution: int):
    patient_id, ref_index, images, signal, masks = io_rvf.load_dataset4d(manifest)
    images = [_resample_to(img, resolution) for img in images]
    masks = {name: _resample_mask(m, resolution) for name, m in masks.items()}
    return patient_id, ref_index, images, signal, masks


def _sliding_mask(masks: dict[str, MaskVolume]) -> MaskVolume | None:
    lung = [m for name, m in sorted(masks.items()) if "lung" in name]
    if not lung:
        return None
    union = np.zeros_like(lung[0].labels)
    for m in lung:
        union |= m.labels
    return MaskVolume(lung[0].meta, union)


def cmd_fit(args) -> int:
    cfg = PipelineConfig.load(args)
    patient_id, ref_index, images, signal, masks = _load_dataset_resampled(
        Path(args.dataset), cfg.resolution
    )
    intra = cfg.intra_cfg(sliding_mask=_sliding_mask(masks))
    fields = estimate_phase_fields(images, ref_index, intra)
    Z = RegressorMatrix.from_signal(signal)
    model = fit_fields(fields, Z)
    out = Path(args.out)
    io_rvf.save_motion_model(model, out / "model")
    for j, f in enumerate(fields):
        io_rvf.write_rvf(out / "fields" / f"phase_{j:02d}.rvf", f)
    report = {
        "schema": "fitreport-1",
        "patient_id": patient_id,
        "ref_phase_index": ref_index,
        "residual_frobenius": fit_residual(model, fields, Z),
        "metric": intra.metric,
        "regularizer": intra.regularizer,
        "per_phase": [
            {"index": j, "v_ml": float(signal.v[j]), "v_prime": float(signal.v_prime[j]),
             **_field_stats(f)}
            for j, f in enumerate(fields)
        ],
    }
    io_rvf.write_json(out / "fit_report.json", report)
    print(f"fitted {patient_id}: residual {report['residual_frobenius']:.4g}")
    return EXIT_OK


def _load_motion_set(manifest: Path, fields_dir: Path | None, cfg: PipelineConfig):
    patient_id, ref_index, images, signal, masks = _load_dataset_resampled(
        manifest, cfg.resolution
    )
    n = len(images)
    root = manifest.parent if manifest.is_file() else manifest
    candidates = []
    if fields_dir is not None:
        candidates.append(Path(fields_dir))
    candidates.append(root / "fields")
    candidates.append(root / "truth" / "fields")
    fields = None
    for cand in candidates:
        if cand.is_dir() and (cand / "phase_00.rvf").exists():
            fields = [io_rvf.read_rvf(cand / f"phase_{j:02d}.rvf") for j in range(n)]
            break
    if fields is None:
        fields = estimate_phase_fields(
            images, ref_index, cfg.intra_cfg(sliding_mask=_sliding_mask(masks))
        )
    return PatientMotionSet(
        patient_id=patient_id,
        ref_phase_index=ref_index,
        phase_fields=fields,
        signal=signal,
        ref_image=images[ref_index],
        masks=masks,
    )


def cmd_atlas(args) -> int:
    cfg = PipelineConfig.load(args)
    fields_dirs = args.fields_from or [None] * len(args.datasets)
    if len(fields_dirs) != len(args.datasets):
        raise ValidationError("--fields-from must list one directory per dataset")
    patients = [
        _load_motion_set(Path(m), Path(fd) if fd else None, cfg)
        for m, fd in zip(args.datasets, fields_dirs)
    ]
    atlas = build_mean_atlas(
        patients,
        args.reference,
        cfg.inter_cfg(),
        include_reference=not args.exclude_reference,
    )
    save_atlas(atlas, args.out)
    print(f"atlas on reference {args.reference}: {atlas.n_phases} phases -> {args.out}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = PipelineConfig.load(args)
    atlas = load_atlas(args.atlas)
    obj = io_rvf.read_rvf(args.image)
    if not isinstance(obj, ScalarVolume):
        raise ValidationError(f"{args.image}: expected a scalar volume")
    new_image = _resample_to(obj, atlas.meta.dims[0])
    model, phi = transfer_to_new_full(atlas, new_image, cfg.inter_cfg())
    out = Path(args.out)
    io_rvf.save_motion_model(model, out / "model")
    io_rvf.write_rvf(out / "inter_field.rvf", phi)
    io_rvf.write_json(
        out / "transfer_report.json",
        {
            "schema": "transferreport-1",
            "atlas_reference": atlas.ref_patient_id,
            "inter_field": _field_stats(phi),
        },
    )
    print(f"transferred atlas model -> {out}")
    return EXIT_OK


def cmd_animate(args) -> int:
    cfg = PipelineConfig.load(args)
    model = io_rvf.load_motion_model(Path(args.model) / "model"
                                     if (Path(args.model) / "model").is_dir()
                                     else args.model)
    obj = io_rvf.read_rvf(args.image)
    if not isinstance(obj, ScalarVolume):
        raise ValidationError(f"{args.image}: expected a scalar volume")
    ref = _resample_to(obj, model.meta.dims[0])
    if ref.meta != model.meta:
        raise ValidationError("image grid does not match the model grid")
    if args.simulate:
        frames = args.frames or 32
        sim = SignalSimConfig(seed=cfg.seed, duration=(frames - 1) * 0.2, dt=0.2)
        signal = simulate(sim)
    else:
        if not args.signal:
            raise ValidationError("provide --signal CSV or --simulate")
        signal = io_rvf.read_signal_csv(args.signal)
    n = len(signal) if args.frames is None else min(args.frames, len(signal))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io_rvf.write_signal_csv(out / "signal.csv", signal)
    for t in range(n):
        v, vp = signal.sample(t)
        frame = warp_image(ref, predict(model, v, vp))
        io_rvf.write_rvf(out / f"frame_{t:03d}.rvf", frame)
    io_rvf.write_json(
        out / "animation.json",
        {"schema": "animation-1", "frames": n, "simulated": bool(args.simulate),
         "seed": cfg.seed if args.simulate else None},
    )
    print(f"wrote {n} frames -> {out}")
    return EXIT_OK


def _load_population(pop_dir: Path):
    pop_dir = Path(pop_dir)
    index = pop_dir / "population.json"
    if index.exists():
        ids = io_rvf.read_json(index)["patients"]
        dirs = [pop_dir / pid for pid in ids]
    else:
        dirs = sorted(d for d in pop_dir.iterdir() if (d / "dataset.json").exists())
    if not dirs:
        raise ValidationError(f"{pop_dir}: no patient datasets found")
    return [load_phantom_patient(d) for d in dirs]


def _fold_worker(pop_dir: str, held_id: str, inter_doc: dict,
                 use_true_fields: bool, intra_doc: dict | None) -> dict:
    population = _load_population(Path(pop_dir))
    inter = RegistrationConfig(**inter_doc)
    intra = RegistrationConfig(**intra_doc) if intra_doc else None
    return run_fold(population, held_id, inter,
                    use_true_fields=use_true_fields, intra_cfg=intra)


def cmd_evaluate(args) -> int:
    cfg = PipelineConfig.load(args)
    population = _load_population(Path(args.population))
    use_true = not args.registered_fields
    inter = cfg.inter_cfg()
    intra = cfg.intra_cfg() if args.registered_fields else None
    if cfg.jobs > 1:
        held_ids = sorted(t.patient_id for t in population)
        inter_doc = {k: getattr(inter, k) for k in
                     ("metric", "regularizer", "weight", "levels",
                      "iters_per_level", "step_size")}
        intra_doc = None
        if intra is not None:
            intra_doc = {k: getattr(intra, k) for k in
                         ("metric", "regularizer", "weight", "levels",
                          "iters_per_level", "step_size")}
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            folds = list(
                pool.map(
                    _fold_worker,
                    [str(args.population)] * len(held_ids),
                    held_ids,
                    [inter_doc] * len(held_ids),
                    [use_true] * len(held_ids),
                    [intra_doc] * len(held_ids),
                )
            )
        report = DiceReport(folds=folds, summary=_summarize(folds))
    else:
        report = leave_one_out(population, inter, use_true_fields=use_true,
                               intra_cfg=intra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="respmodel",
        description="4D breathing motion models: fit, average, transfer, animate.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--resolution", type=int, help="working resolution (power of two)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--jobs", type=int, help="max parallel workers")

    p = sub.add_parser("phantom", help="generate a synthetic 4D population")
    common(p)

    p = sub.add_parser("fit", help="fit a patient motion model from a 4D dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset.json manifest")

    p = sub.add_parser("atlas", help="build the population mean atlas")
    common(p)
    p.add_argument("--datasets", nargs="+", required=True, help="dataset manifests")
    p.add_argument("--reference", required=True, help="reference patient id")
    p.add_argument("--fields-from", nargs="+", help="fit output dirs with fields/")
    p.add_argument("--exclude-reference", action="store_true",
                   help="leave the reference patient out of the averages")

    p = sub.add_parser("transfer", help="transfer the atlas onto a new static volume")
    common(p)
    p.add_argument("--atlas", required=True, help="atlas directory")
    p.add_argument("--image", required=True, help="new patient volume (.rvf)")

    p = sub.add_parser("animate", help="animate a reference volume with a model")
    common(p)
    p.add_argument("--model", required=True, help="motion model directory")
    p.add_argument("--image", required=True, help="reference volume (.rvf)")
    p.add_argument("--signal", help="surrogate CSV (t_s,v_ml)")
    p.add_argument("--simulate", action="store_true", help="simulate the surrogate")
    p.add_argument("--frames", type=int, help="number of frames")

    p = sub.add_parser("evaluate", help="leave-one-out DICE study on a population")
    common(p)
    p.add_argument("--population", required=True, help="phantom population directory")
    p.add_argument("--registered-fields", action="store_true",
                   help="re-estimate intra-patient fields by registration")
    return ap


_COMMANDS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "atlas": cmd_atlas,
    "transfer": cmd_transfer,
    "animate": cmd_animate,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
