"""Multi-case phantom cohorts written as a ready-to-run dataset.

Each case gets its own anatomy and a fibrosis stage. The stage sets the
texture knob, blending isotropic texture into an oriented grating, so
directional features carry the stage signal. Every modality views the
anatomy through its own monotone intensity curve and known transform.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..errors import ValidationError
from ..manifest import MODALITIES, STAGES, VENDORS, DatasetManifest, ManifestEntry, write_manifest
from ..nifti import atomic_write_bytes, write_nifti
from ..transform import SimilarityTransform3D
from .phantom import CURVES, Anatomy, PhantomSpec, make_grid, random_transform, render

MODALITY_CURVES = {
    "T1WI": "gamma",
    "T2WI": "inverse",
    "DWI": "log",
    "GED1": "sigmoid",
    "GED2": "gamma",
    "GED3": "log",
    "GED4": "identity",
}
ANNOTATED = "GED4"


@dataclass(frozen=True)
class CohortSpec:
    n_cases: int = 5
    modalities: Tuple[str, ...] = ("T2WI", "GED2", "GED4")
    vendors: Tuple[str, ...] = ("A", "B1", "B2")
    dims: Tuple[int, int, int] = (40, 40, 40)
    spacing: Tuple[float, float, float] = (1.5, 1.5, 1.5)
    semi_axes: Tuple[float, float, float] = (22.0, 15.0, 12.0)
    # relative jitter of each semi-axis
    shape_jitter: float = 0.08
    noise_sigma: float = 3.0
    texture_amplitude: float = 12.0
    texture_band: Tuple[float, float] = (0.08, 0.2)
    grating_frequency: float = 0.12
    knob_by_stage: Dict[str, float] = field(default_factory=lambda: {"S1": 0.0, "S2": 0.4, "S3": 0.7, "S4": 1.0})
    knob_jitter: float = 0.05
    max_translation: float = 8.0
    max_rotation_deg: float = 10.0
    scale_range: Tuple[float, float] = (0.95, 1.05)
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValidationError("n_cases must be >= 1")
        if ANNOTATED not in self.modalities:
            raise ValidationError(f"modalities must include {ANNOTATED}")
        if len(set(self.modalities)) != len(self.modalities) or not set(self.modalities) <= set(MODALITIES):
            raise ValidationError(f"modalities must be distinct names from {MODALITIES}")
        if not self.vendors or not set(self.vendors) <= set(VENDORS):
            raise ValidationError(f"vendors must be drawn from {VENDORS}")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValidationError("dims must be 3 sizes of at least 8")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValidationError("spacing must be 3 positive values")
        if set(self.knob_by_stage) != set(STAGES):
            raise ValidationError(f"knob_by_stage needs exactly the stages {STAGES}")
        if any(not 0.0 <= k <= 1.0 for k in self.knob_by_stage.values()):
            raise ValidationError("stage knobs must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError("scale_range must satisfy 0 < low <= high")
        if self.noise_sigma < 0 or self.knob_jitter < 0 or self.shape_jitter < 0:
            raise ValidationError("noise_sigma, knob_jitter and shape_jitter must be >= 0")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def cohort_from_dict(d: dict) -> CohortSpec:
    if not isinstance(d, dict):
        raise ValidationError("phantom spec must be a JSON object")
    known = {f.name for f in dataclasses.fields(CohortSpec)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"phantom spec: unknown keys {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return CohortSpec(**kw)
    except TypeError as exc:
        raise ValidationError(f"phantom spec: {exc}") from exc


def load_cohort_spec(path) -> CohortSpec:
    try:
        return cohort_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise ValidationError(f"phantom spec {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


@dataclass
class PhantomCase:
    case_id: str
    vendor: str
    stage: str
    knob: float
    anatomy: Anatomy
    # modality -> transform from that modality's world into the GED4 world
    transforms: Dict[str, SimilarityTransform3D]


def case_id(i: int) -> str:
    return f"case{i:03d}"


def assign_stages(n: int, rng: np.random.Generator) -> List[str]:
    """Balanced stages in seeded order."""
    stages = [STAGES[i % len(STAGES)] for i in range(n)]
    return [stages[k] for k in rng.permutation(n)]


def plan_cohort(spec: CohortSpec) -> List[PhantomCase]:
    rng = np.random.default_rng(spec.seed)
    stages = assign_stages(spec.n_cases, rng)
    grid = make_grid(PhantomSpec(dims=spec.dims, spacing=spec.spacing))
    cases = []
    for i in range(spec.n_cases):
        crng = np.random.default_rng([spec.seed, i])
        knob = spec.knob_by_stage[stages[i]] + crng.uniform(-spec.knob_jitter, spec.knob_jitter)
        knob = float(np.clip(knob, 0.0, 1.0))
        axes = np.asarray(spec.semi_axes) * (1.0 + crng.uniform(-spec.shape_jitter, spec.shape_jitter, 3))
        lobes = tuple((crng.normal(size=3), float(crng.uniform(0.08, 0.2)), 0.3)
                      for _ in range(int(crng.integers(1, 3))))
        g = crng.normal(size=3)
        pspec = PhantomSpec(dims=spec.dims, spacing=spec.spacing, semi_axes=tuple(axes), lobes=lobes,
                            noise_sigma=spec.noise_sigma, texture_amplitude=spec.texture_amplitude,
                            texture_band=tuple(spec.texture_band), grating_frequency=spec.grating_frequency,
                            grating_direction=tuple(g), texture_knob=knob,
                            seed=int(crng.integers(0, 2**31)))
        anatomy = Anatomy.from_spec(pspec, grid)
        transforms = {}
        for mod in spec.modalities:
            if mod == ANNOTATED:
                continue
            transforms[mod] = random_transform(crng, grid.center(), spec.max_translation,
                                               spec.max_rotation_deg, spec.scale_range)
        cases.append(PhantomCase(case_id(i), spec.vendors[i % len(spec.vendors)], stages[i], knob,
                                 anatomy, transforms))
    return cases


def render_case(case: PhantomCase, spec: CohortSpec, modality: str, index: int):
    """``(volume, exact organ mask)`` of one modality."""
    grid = make_grid(PhantomSpec(dims=spec.dims, spacing=spec.spacing))
    curve = MODALITY_CURVES[modality]
    assert curve in CURVES
    noise_seed = spec.seed * 1_000_003 + index * len(MODALITIES) + MODALITIES.index(modality)
    return render(case.anatomy, grid, case.transforms.get(modality), curve, spec.noise_sigma, noise_seed)


def write_cohort(spec: CohortSpec, out: Path) -> DatasetManifest:
    """Write volumes, GED4 masks, ground-truth masks and transforms plus a manifest.

    Layout under ``out``: ``volumes/``, ``masks/`` (GED4 annotations),
    ``truth/`` (exact masks of the other modalities), ``transforms/``
    (ground truth, modality world to GED4 world), ``manifest.json``,
    ``stages.json`` and ``phantom_spec.json``.
    """
    out = Path(out)
    for sub in ("volumes", "masks", "truth", "transforms"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    info = {}
    for index, case in enumerate(plan_cohort(spec)):
        info[case.case_id] = {"stage": case.stage, "vendor": case.vendor, "knob": case.knob}
        for mod in spec.modalities:
            vol, mask = render_case(case, spec, mod, index)
            name = f"{case.case_id}_{mod}.nii.gz"
            write_nifti(vol, out / "volumes" / name)
            mask_rel = None
            if mod == ANNOTATED:
                write_nifti(mask, out / "masks" / name)
                mask_rel = f"masks/{name}"
            else:
                write_nifti(mask, out / "truth" / name)
                text = json.dumps(case.transforms[mod].to_dict(), indent=2, sort_keys=True) + "\n"
                atomic_write_bytes(out / "transforms" / f"{case.case_id}_{mod}.json", text.encode())
            entries.append(ManifestEntry(case.case_id, case.vendor, mod, f"volumes/{name}", mask_rel, case.stage))
    manifest = DatasetManifest(entries, out)
    write_manifest(manifest, out / "manifest.json")
    atomic_write_bytes(out / "stages.json", (json.dumps(info, indent=2, sort_keys=True) + "\n").encode())
    atomic_write_bytes(out / "phantom_spec.json",
                       (json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n").encode())
    return manifest
