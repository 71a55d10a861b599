"""Synthetic 4D breathing phantoms with exact analytic ground truth.

A phantom is a scene of soft (sigmoid-edged) ellipsoids -- a body envelope,
a liver, two lungs -- breathing according to a per-voxel linear motion law:
compactly supported cos^2 bumps centered on the moving organs define
coefficient fields (a1, a2, a3), and the phase-j displacement is
u_j(x) = a1(x) v_j + a2(x) v'_j + a3(x) for the phantom's surrogate signal.

Phase images are the analytic scene evaluated at the displaced coordinates
(never warped rasters), so images, masks, fields, and the linear model are
mutually consistent to machine precision: registration, regression, atlas
building, and evaluation can all be scored against exact truth. Affine
inter-patient perturbations stay inside the family, with fields conjugated
in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfig, OutOfGrid
from .grid import DisplacementField, GridMeta, MaskVolume, ScalarVolume
from .regression import MotionModel
from .surrogate import SignalSimConfig, SurrogateSignal, simulate

__all__ = [
    "OrganSpec",
    "PhantomConfig",
    "PhantomTruth",
    "generate",
    "perturb_patient",
    "generate_population",
]

# Organs whose ellipsoids produce evaluation masks (body is envelope only).
MASKED_ORGANS = ("liver", "lung_left", "lung_right")


@dataclass(frozen=True)
class OrganSpec:
    """Soft ellipsoid: center/radii in mm, additive intensity, peak anatomical
    displacement (mm) reached at full inhale."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float
    peak: tuple[float, float, float] = (0.0, 0.0, 0.0)


def _default_organs() -> dict[str, OrganSpec]:
    return {
        "body": OrganSpec((63.0, 63.0, 63.0), (46.0, 42.0, 50.0), 0.35),
        "liver": OrganSpec((82.0, 70.0, 50.0), (20.0, 16.0, 14.0), 0.40, (0.0, 0.0, 4.0)),
        "lung_left": OrganSpec((46.0, 56.0, 84.0), (16.0, 14.0, 21.0), -0.35, (0.0, 0.0, 3.0)),
        "lung_right": OrganSpec((80.0, 56.0, 84.0), (16.0, 14.0, 21.0), -0.35, (0.0, 0.0, 3.0)),
    }


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    background: float = 0.0
    organs: dict[str, OrganSpec] | None = None
    n_phases: int = 10
    signal_amp: float = 1000.0
    hysteresis: float = 0.0            # mm*(phase)/ml along hyst_dir
    hyst_dir: tuple[float, float, float] = (0.0, 1.0, 0.0)
    edge_voxels: float = 2.0
    bump_inflate: float = 1.6
    seed: int = 0

    def organ_map(self) -> dict[str, OrganSpec]:
        return dict(self.organs) if self.organs is not None else _default_organs()

    def __post_init__(self):
        if self.n_phases < 2:
            raise InvalidConfig("n_phases must be >= 2")
        if self.signal_amp <= 0:
            raise InvalidConfig("signal_amp must be positive")
        if self.edge_voxels <= 0 or self.bump_inflate < 1.0:
            raise InvalidConfig("edge_voxels must be > 0 and bump_inflate >= 1")
        meta = GridMeta(self.dims, self.spacing)
        max_peak = max(
            (float(np.linalg.norm(o.peak)) for o in self.organ_map().values()),
            default=0.0,
        )
        if max_peak > 0.1 * min(meta.extent):
            raise InvalidConfig(
                f"peak displacement {max_peak:.1f} mm exceeds 10% of grid extent"
            )


@dataclass(frozen=True)
class _Scene:
    """Fully resolved analytic scene (affine perturbations already baked in)."""

    background: float
    organs: dict[str, OrganSpec]
    edge_mm: float
    bump_inflate: float
    hysteresis: float
    hyst_dir: tuple[float, float, float]
    v_scale: float

    def _rho(self, points: np.ndarray, organ: OrganSpec, inflate: float = 1.0) -> np.ndarray:
        d = (points - np.asarray(organ.center)) / (np.asarray(organ.radii) * inflate)
        return np.sqrt((d * d).sum(axis=-1))

    def intensity(self, points: np.ndarray) -> np.ndarray:
        val = np.full(points.shape[:-1], self.background, dtype=np.float64)
        for name in ("body", "liver", "lung_left", "lung_right"):
            organ = self.organs.get(name)
            if organ is None:
                continue
            k = float(np.mean(organ.radii)) / self.edge_mm
            arg = np.clip((self._rho(points, organ) - 1.0) * k, -60.0, 60.0)
            val += organ.intensity / (1.0 + np.exp(arg))
        return val

    def inside(self, name: str, points: np.ndarray) -> np.ndarray:
        return self._rho(points, self.organs[name]) <= 1.0

    def _bump(self, points: np.ndarray, organ: OrganSpec) -> np.ndarray:
        rho = np.minimum(self._rho(points, organ, self.bump_inflate), 1.0)
        c = np.cos(0.5 * np.pi * rho)
        return c * c

    def coefficients(self, meta: GridMeta):
        """Analytic (a1, a2, a3) arrays shaped (nz, ny, nx, 3)."""
        pts = meta.coordinate_grid()
        a1 = np.zeros(pts.shape, dtype=np.float64)
        bump_sum = np.zeros(pts.shape[:-1], dtype=np.float64)
        for organ in self.organs.values():
            peak = np.asarray(organ.peak, dtype=np.float64)
            if not peak.any():
                continue
            b = self._bump(pts, organ)
            a1 += b[..., None] * (-peak / self.v_scale)
            bump_sum += b
        a2 = (-self.hysteresis) * bump_sum[..., None] * np.asarray(self.hyst_dir)
        return a1, a2, np.zeros_like(a1)


@dataclass(frozen=True)
class PhantomTruth:
    """One synthetic 4D patient plus its exact ground truth."""

    patient_id: str
    meta: GridMeta
    ref_phase_index: int
    signal: SurrogateSignal
    phase_images: list[ScalarVolume]
    true_fields: list[DisplacementField]
    true_masks: list[dict[str, MaskVolume]]
    true_model: MotionModel
    scene: _Scene | None = None

    @property
    def n_phases(self) -> int:
        return len(self.phase_images)

    @property
    def ref_image(self) -> ScalarVolume:
        return self.phase_images[self.ref_phase_index]

    @property
    def ref_masks(self) -> dict[str, MaskVolume]:
        return self.true_masks[self.ref_phase_index]

    def peak_phase_index(self) -> int:
        return int(np.argmax(self.signal.v))


def _phase_signal(cfg: PhantomConfig) -> SurrogateSignal:
    sim = SignalSimConfig(
        amp_range=(0.0, cfg.signal_amp),
        period_mean=float(cfg.n_phases),
        period_jitter=0.0,
        amp_jitter=0.0,
        seed=cfg.seed,
        duration=float(cfg.n_phases - 1),
        dt=1.0,
    )
    return simulate(sim)


def _check_in_grid(meta: GridMeta, organs: dict[str, OrganSpec]) -> None:
    lo = np.asarray(meta.origin)
    hi = lo + np.asarray(meta.extent) - np.asarray(meta.spacing)
    for name, o in organs.items():
        c = np.asarray(o.center)
        reach = np.asarray(o.radii) + float(np.linalg.norm(o.peak))
        if np.any(c - reach < lo) or np.any(c + reach > hi):
            raise OutOfGrid(f"organ {name!r} leaves the grid (center {o.center})")


def _materialize(patient_id: str, meta: GridMeta, scene: _Scene,
                 signal: SurrogateSignal) -> PhantomTruth:
    _check_in_grid(meta, scene.organs)
    a1, a2, a3 = scene.coefficients(meta)
    # Zero the field at the reference phase by folding it into the intercept.
    v0 = float(signal.v[0])
    vp0 = float(signal.v_prime[0])
    a3 = -(a1 * v0 + a2 * vp0)
    pts = meta.coordinate_grid()
    images, fields, masks = [], [], []
    for j in range(len(signal)):
        u = a1 * signal.v[j] + a2 * signal.v_prime[j] + a3
        displaced = pts + u
        images.append(ScalarVolume(meta, scene.intensity(displaced)))
        fields.append(DisplacementField(meta, u))
        masks.append(
            {
                name: MaskVolume(meta, scene.inside(name, displaced).astype(np.uint8))
                for name in MASKED_ORGANS
                if name in scene.organs
            }
        )
    model = MotionModel(
        DisplacementField(meta, a1),
        DisplacementField(meta, a2),
        DisplacementField(meta, a3),
    )
    return PhantomTruth(
        patient_id=patient_id,
        meta=meta,
        ref_phase_index=0,
        signal=signal,
        phase_images=images,
        true_fields=fields,
        true_masks=masks,
        true_model=model,
        scene=scene,
    )


def generate(cfg: PhantomConfig, patient_id: str = "pat00") -> PhantomTruth:
    """Build one phantom patient; deterministic per cfg.seed.

    The reference phase is index 0 (end exhale, v = 0); its field is
    identically zero by construction.
    """
    meta = GridMeta(cfg.dims, cfg.spacing)
    scene = _Scene(
        background=cfg.background,
        organs=cfg.organ_map(),
        edge_mm=cfg.edge_voxels * float(np.mean(cfg.spacing)),
        bump_inflate=cfg.bump_inflate,
        hysteresis=cfg.hysteresis,
        hyst_dir=cfg.hyst_dir,
        v_scale=cfg.signal_amp,
    )
    return _materialize(patient_id, meta, scene, _phase_signal(cfg))


def perturb_patient(
    truth: PhantomTruth,
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0),
    scale: float = 1.0,
    patient_id: str | None = None,
    amplitude_scale: float = 1.0,
) -> PhantomTruth:
    """New patient whose anatomy is the affine-perturbed original.

    The affine map is T(x) = c + scale*(x - c) + translation about the grid
    center c; organ centers, radii, and peak displacements transform in
    closed form, so the new true fields are exactly the conjugated originals
    (u'(x) = scale * u(T^-1 x)). amplitude_scale additionally rescales the
    breathing amplitude (organ peaks) to model stronger/weaker breathers.
    """
    if truth.scene is None:
        raise InvalidConfig("cannot perturb a phantom loaded without its scene")
    if scale <= 0:
        raise InvalidConfig("scale must be positive")
    meta = truth.meta
    c = np.asarray(meta.origin) + 0.5 * (np.asarray(meta.extent) - np.asarray(meta.spacing))
    t = np.asarray(translation, dtype=np.float64)
    organs = {}
    for name, o in truth.scene.organs.items():
        center = tuple(c + scale * (np.asarray(o.center) - c) + t)
        organs[name] = OrganSpec(
            center=center,
            radii=tuple(scale * np.asarray(o.radii)),
            intensity=o.intensity,
            peak=tuple(scale * amplitude_scale * np.asarray(o.peak)),
        )
    scene = replace(
        truth.scene,
        organs=organs,
        edge_mm=truth.scene.edge_mm * scale,
        hysteresis=truth.scene.hysteresis * scale * amplitude_scale,
    )
    pid = patient_id if patient_id is not None else truth.patient_id + "_p"
    return _materialize(pid, meta, scene, truth.signal)


def generate_population(
    cfg: PhantomConfig,
    variations: list[dict] | None = None,
) -> list[PhantomTruth]:
    """Base patient plus affine/amplitude variations (leave-one-out stock).

    Each variation is a dict with optional keys translation, scale,
    amplitude_scale. Defaults produce 4 patients spanning +-2 mm shifts,
    +-10% scale, and breathing amplitudes covering 2-4 mm at the liver.
    """
    if variations is None:
        variations = [
            {"translation": (0.0, 0.0, 0.0), "scale": 1.0, "amplitude_scale": 1.0},
            {"translation": (2.0, 0.0, -2.0), "scale": 1.1, "amplitude_scale": 0.8},
            {"translation": (-2.0, 2.0, 0.0), "scale": 0.9, "amplitude_scale": 0.65},
            {"translation": (0.0, -2.0, 2.0), "scale": 1.05, "amplitude_scale": 0.5},
        ]
    base = generate(cfg, patient_id="pat00")
    out = []
    for i, var in enumerate(variations):
        translation = tuple(var.get("translation", (0.0, 0.0, 0.0)))
        scale = float(var.get("scale", 1.0))
        amp = float(var.get("amplitude_scale", 1.0))
        if translation == (0.0, 0.0, 0.0) and scale == 1.0 and amp == 1.0:
            out.append(replace(base, patient_id=f"pat{i:02d}"))
            continue
        out.append(
            perturb_patient(
                base,
                translation=translation,
                scale=scale,
                amplitude_scale=amp,
                patient_id=f"pat{i:02d}",
            )
        )
    return out


# ---------------------------------------------------------------------------
# Persistence: standard 4D dataset manifest plus a truth/ subdirectory
# ---------------------------------------------------------------------------

def save_phantom_patient(truth: PhantomTruth, out_dir) -> None:
    from pathlib import Path

    from .io_rvf import save_dataset4d, save_motion_model, write_json, write_rvf

    out_dir = Path(out_dir)
    save_dataset4d(
        out_dir,
        truth.patient_id,
        truth.ref_phase_index,
        truth.phase_images,
        truth.signal,
        masks=truth.ref_masks,
    )
    tdir = out_dir / "truth"
    for j, f in enumerate(truth.true_fields):
        write_rvf(tdir / "fields" / f"phase_{j:02d}.rvf", f)
    for j, masks in enumerate(truth.true_masks):
        for name in sorted(masks):
            write_rvf(tdir / "masks" / f"phase_{j:02d}" / f"{name}.rvf", masks[name])
    save_motion_model(truth.true_model, tdir / "model")
    write_json(
        tdir / "truth.json",
        {
            "schema": "phantomtruth-1",
            "patient_id": truth.patient_id,
            "n_phases": truth.n_phases,
            "mask_names": sorted(truth.true_masks[0]),
        },
    )


def load_phantom_patient(patient_dir) -> PhantomTruth:
    """Rebuild a PhantomTruth from disk (scene is not persisted, so the
    loaded phantom cannot be perturbed further)."""
    from pathlib import Path

    from .io_rvf import load_dataset4d, load_motion_model, read_json, read_rvf

    patient_dir = Path(patient_dir)
    patient_id, ref_index, images, signal, _ = load_dataset4d(patient_dir)
    tdir = patient_dir / "truth"
    info = read_json(tdir / "truth.json")
    n = int(info["n_phases"])
    fields = [read_rvf(tdir / "fields" / f"phase_{j:02d}.rvf") for j in range(n)]
    masks = [
        {
            name: read_rvf(tdir / "masks" / f"phase_{j:02d}" / f"{name}.rvf")
            for name in info["mask_names"]
        }
        for j in range(n)
    ]
    model = load_motion_model(tdir / "model")
    return PhantomTruth(
        patient_id=patient_id,
        meta=images[0].meta,
        ref_phase_index=ref_index,
        signal=signal,
        phase_images=images,
        true_fields=fields,
        true_masks=masks,
        true_model=model,
        scene=None,
    )
