"""The 32-value STAD feature vector and its CSV table."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np

from ..errors import ContractError, DegenerateInputError, ValidationError
from ..volume import LabelMask, VoxelVolume, normalize_u8
from .directional import hessian_features, structure_tensor_features
from .shape import pca_shape, shape_features
from .texture import PLANES, appearance_stats, glcm_plane, gradient_stats

SHAPE_NAMES = ("volume_mm3", "surface_area_mm2", "sphericity", "solidity", "elongation", "flatness")
APPEARANCE_NAMES = ("mean", "std", "skewness", "kurtosis", "intensity_entropy", "iqr")
GRADIENT_NAMES = ("grad_mag_mean", "grad_mag_std")
GLCM_NAMES = tuple(f"glcm_{p}_{f}" for p in PLANES for f in ("contrast", "energy", "homogeneity", "anisotropy"))
DIRECTIONAL_NAMES = (
    "coherence_mean",
    "coherence_std",
    "st_planarity_mean",
    "hessian_trace_mean",
    "hessian_anisotropy_mean",
    "hessian_sheetness_mean",
)
FEATURE_NAMES = SHAPE_NAMES + APPEARANCE_NAMES + GRADIENT_NAMES + GLCM_NAMES + DIRECTIONAL_NAMES
assert len(FEATURE_NAMES) == 32

VENDOR_FLAGS = {"A": 0, "B1": 1, "B2": 2, "other": 3}
CSV_HEADER = ("case_id", "modality", "vendor_flag") + FEATURE_NAMES


@dataclass(frozen=True)
class StadParams:
    glcm_levels: int = 16
    glcm_distance: int = 1
    sigma_grad: float = 1.0
    sigma_window: float = 2.0
    sigma_hessian: float = 1.5


@dataclass
class StadFeatureVector:
    values: np.ndarray
    vendor_flag: int
    names: tuple = field(default=FEATURE_NAMES, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(FEATURE_NAMES),):
            raise ValidationError(f"expected {len(FEATURE_NAMES)} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = [n for n, x in zip(FEATURE_NAMES, self.values) if not np.isfinite(x)]
            raise ValidationError(f"non-finite features: {bad}")
        if self.vendor_flag not in VENDOR_FLAGS.values():
            raise ValidationError(f"vendor flag {self.vendor_flag} is not one of {sorted(VENDOR_FLAGS.values())}")

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, map(float, self.values)))

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])


def vendor_flag(vendor: str) -> int:
    try:
        return VENDOR_FLAGS[vendor]
    except KeyError:
        raise ValidationError(f"unknown vendor {vendor!r}") from None


def _family(name: str, fn, *args):
    try:
        return fn(*args)
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"{name} features: {exc}") from exc


def extract_stad(v: VoxelVolume, m: LabelMask, vendor: str, params: StadParams = StadParams()) -> StadFeatureVector:
    """All 32 features of ``v`` inside ``m`` plus the vendor flag.

    GLCM texture reads the 0..255 normalized volume; every other family
    reads raw intensities.
    """
    if not v.grid.compatible(m.grid):
        raise ContractError("volume and mask are on different grids")
    flag = vendor_flag(vendor)
    vol, area, sph, sol = _family("shape", shape_features, m)
    elong, flat = _family("shape", pca_shape, m)
    app = _family("appearance", appearance_stats, v, m)
    grad = _family("gradient", gradient_stats, v, m)
    u8 = normalize_u8(v)
    glcm = []
    for plane in PLANES:
        glcm.extend(_family("glcm", glcm_plane, u8, m, plane, params.glcm_levels, params.glcm_distance))
    st = _family("directional", structure_tensor_features, v, m, params.sigma_grad, params.sigma_window)
    hs = _family("directional", hessian_features, v, m, params.sigma_hessian)
    values = [vol, area, sph, sol, elong, flat, *app, *grad, *glcm, *st, *hs]
    return StadFeatureVector(np.array(values, dtype=np.float64), flag)


@dataclass
class FeatureRow:
    case_id: str
    modality: str
    features: StadFeatureVector


def format_value(x: float) -> str:
    return f"{x:.9g}"


def write_feature_csv(rows: Iterable[FeatureRow]) -> str:
    """CSV text (LF line endings) with the canonical header."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([row.case_id, row.modality, str(row.features.vendor_flag)]
                        + [format_value(x) for x in row.features.values])
    return buf.getvalue()


def read_feature_csv(text: str) -> List[FeatureRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_HEADER:
        raise ValidationError("feature table header does not match the canonical feature names")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(CSV_HEADER):
            raise ValidationError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        try:
            flag = int(rec[2])
            values = np.array([float(x) for x in rec[3:]])
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        rows.append(FeatureRow(rec[0], rec[1], StadFeatureVector(values, flag)))
    return rows


def feature_matrix(rows: Sequence[FeatureRow], with_vendor: bool = True) -> np.ndarray:
    """Rows as a design matrix: the 32 features, then the vendor flag."""
    out = np.array([r.features.values for r in rows], dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
    if with_vendor:
        flags = np.array([[r.features.vendor_flag] for r in rows], dtype=np.float64).reshape(len(rows), 1)
        out = np.hstack([out, flags])
    return out
