"""Similarity registration driven by histogram mutual information, plus
pseudo-label transfer through the recovered transform.

The optimizer is a regular-step gradient ascent over seven parameters
(three Euler angles, three translations, one isotropic scale) with central
finite-difference gradients, run coarse to fine over a block-average
pyramid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ContractError, InsufficientOverlapError, OptimizerError, ValidationError
from .transform import SimilarityTransform3D
from .volume import GridSpec, LabelMask, VoxelVolume, resample, round_half_away


@dataclass(frozen=True)
class RegistrationConfig:
    bins: int = 32
    pyramid_levels: int = 3
    max_iterations: int = 200
    initial_step: float = 1.0
    step_shrink: float = 0.5
    tolerance: float = 1e-6
    min_step: float = 2e-3
    fd_step: float = 0.1
    # multipliers taking (radians, mm, scale) into optimizer units; None
    # measures them on the fixed image (see physical_shift_scales)
    parameter_scales: Optional[Tuple[float, float, float]] = None
    sample_fraction: float = 1.0
    # Gaussian pre-smoothing (voxels of each pyramid level) of both images
    smoothing_sigma: float = 1.5
    # extra full-resolution pass with this smoothing (None disables it)
    refine_sigma: Optional[float] = 0.7
    refine_step: float = 0.25
    # fixed-image samples are displaced by up to this many voxels (seeded) so
    # that moving-image samples never sit exactly on grid points
    sample_jitter: float = 0.5
    # fraction of each axis left out at both ends of the fixed image, so a
    # moderate transform keeps every sample inside the moving image
    border_margin: float = 0.125
    seed: int = 0

    def __post_init__(self):
        if self.bins < 2:
            raise ValidationError("bins must be >= 2")
        if self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        for name in ("max_iterations", "initial_step", "tolerance", "min_step", "fd_step", "refine_step"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.step_shrink < 1:
            raise ValidationError("step_shrink must be in (0, 1)")
        if not 0 < self.sample_fraction <= 1:
            raise ValidationError("sample_fraction must be in (0, 1]")
        if self.smoothing_sigma < 0 or (self.refine_sigma is not None and self.refine_sigma < 0):
            raise ValidationError("smoothing widths must be >= 0")
        if not 0 <= self.sample_jitter <= 0.5:
            raise ValidationError("sample_jitter must be in [0, 0.5]")
        if not 0 <= self.border_margin < 0.5:
            raise ValidationError("border_margin must be in [0, 0.5)")
        if self.parameter_scales is not None and (
            len(self.parameter_scales) != 3 or min(self.parameter_scales) <= 0
        ):
            raise ValidationError("parameter_scales needs 3 positive values")


@dataclass
class JointHistogram:
    bins: int
    counts: np.ndarray
    fixed_range: Tuple[float, float]
    moving_range: Tuple[float, float]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def transpose(self) -> "JointHistogram":
        return JointHistogram(self.bins, self.counts.T.copy(), self.moving_range, self.fixed_range)


@dataclass
class RegistrationResult:
    transform: SimilarityTransform3D
    mi: float
    log: List[dict] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return sum(1 for rec in self.log if rec.get("accepted"))

    def to_dict(self) -> dict:
        out = self.transform.to_dict()
        out["mi"] = self.mi
        out["iterations"] = self.iterations
        return out


def bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Uniform hard binning of ``values`` over ``[lo, hi]``."""
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.intp)
    idx = np.floor((values - lo) * (bins / (hi - lo))).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _range(values: np.ndarray) -> Tuple[float, float]:
    return float(values.min()), float(values.max())


def joint_histogram(fixed: VoxelVolume, moving_resampled: VoxelVolume,
                    region: Optional[LabelMask] = None, bins: int = 32,
                    valid: Optional[np.ndarray] = None,
                    fixed_range=None, moving_range=None) -> JointHistogram:
    """Joint intensity histogram over voxels valid in both images.

    ``valid`` marks voxels where the warped moving sample was in bounds
    (all voxels when omitted). Bin edges default to each image's observed
    range over the valid samples.
    """
    if bins < 2:
        raise ContractError("bins must be >= 2")
    if not fixed.grid.compatible(moving_resampled.grid):
        raise ContractError("fixed and moving images must share a grid")
    keep = np.ones(fixed.dims, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if region is not None:
        if not region.grid.compatible(fixed.grid):
            raise ContractError("region mask must share the fixed grid")
        keep = keep & region.as_bool()
    f = fixed.data[keep].astype(np.float64)
    m = moving_resampled.data[keep].astype(np.float64)
    if f.size < 2:
        raise InsufficientOverlapError(f"only {f.size} valid samples overlap")
    fixed_range = _range(f) if fixed_range is None else tuple(map(float, fixed_range))
    moving_range = _range(m) if moving_range is None else tuple(map(float, moving_range))
    counts = _hist2d(bin_indices(f, *fixed_range, bins), bin_indices(m, *moving_range, bins), bins)
    return JointHistogram(bins, counts, fixed_range, moving_range)


def _hist2d(fi: np.ndarray, mi: np.ndarray, bins: int) -> np.ndarray:
    flat = np.bincount(fi * bins + mi, minlength=bins * bins)
    return flat.reshape(bins, bins).astype(np.float64)


def _entropy_terms(p: np.ndarray):
    p = p[p > 0]
    return -p * np.log(p)


def marginal_entropy(h: JointHistogram, axis: int = 0) -> float:
    """Entropy (nats) of the fixed (``axis=0``) or moving marginal."""
    total = h.total
    marg = h.counts.sum(axis=1 - axis) / total
    return math.fsum(_entropy_terms(marg))


def mutual_information(h: JointHistogram) -> float:
    """Mutual information in nats, ``sum p_ij log(p_ij / (p_i p_j))``."""
    total = h.total
    if not total > 0:
        raise ContractError("histogram is empty")
    return _mi_from_counts(h.counts, total)


def _mi_from_counts(counts: np.ndarray, total: float) -> float:
    pi = counts.sum(axis=1) / total
    pj = counts.sum(axis=0) / total
    nz = np.nonzero(counts)
    p = counts[nz] / total
    # fsum makes the result independent of summation order, so transposing
    # the histogram gives a bitwise-identical value
    mi = math.fsum(p * np.log(p / (pi[nz[0]] * pj[nz[1]])))
    return max(mi, 0.0)


def warp(moving, transform: SimilarityTransform3D, reference: GridSpec, interp: str = "trilinear"):
    """Resample ``moving`` on ``reference``, sampling at ``transform(p)``."""
    return resample(moving, reference, transform, interp)


def transfer_label(mask: LabelMask, transform: SimilarityTransform3D, reference: GridSpec) -> LabelMask:
    """Carry an annotation from the moving image onto the fixed grid.

    ``transform`` maps fixed-grid world points into the annotated image, as
    returned by :func:`register` with the annotated image as ``moving``.
    """
    return resample(mask, reference, transform, "nearest")


# -- pyramid ---------------------------------------------------------------

MIN_LEVEL_DIM = 32


def downsample(v: VoxelVolume) -> VoxelVolume:
    """Halve resolution by 2x2x2 block averaging (odd trailing planes dropped)."""
    nx, ny, nz = (d // 2 * 2 for d in v.dims)
    d = v.data[:nx, :ny, :nz].astype(np.float64)
    d = d.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))
    spacing = tuple(2.0 * s for s in v.spacing)
    origin = np.asarray(v.origin) + v.direction @ (0.5 * np.asarray(v.spacing))
    return VoxelVolume(d, spacing, origin, v.direction)


def _smooth(v: VoxelVolume, sigma: float) -> VoxelVolume:
    if sigma <= 0:
        return v
    return VoxelVolume.on_grid(gaussian_filter(v.data.astype(np.float64), sigma, mode="nearest"), v.grid)


def interior_region(dims, margin: float) -> np.ndarray:
    """Boolean mask leaving out ``round(margin * n)`` voxels at both ends of each axis."""
    out = np.zeros(dims, dtype=bool)
    cut = [int(round_half_away(margin * n)) for n in dims]
    cut = [min(c, (n - 1) // 2) for c, n in zip(cut, dims)]
    out[tuple(slice(c, n - c) for c, n in zip(cut, dims))] = True
    return out


def build_pyramid(v: VoxelVolume, levels: int) -> List[VoxelVolume]:
    """Finest-first list of at most ``levels`` volumes.

    Halving stops before any axis would drop below ``MIN_LEVEL_DIM`` voxels;
    on coarser grids the MI maximum drifts away from the true alignment.
    """
    out = [v]
    while len(out) < levels and min(out[-1].dims) >= 2 * MIN_LEVEL_DIM:
        out.append(downsample(out[-1]))
    return out


# -- optimizer -------------------------------------------------------------

def physical_shift_scales(fixed: VoxelVolume, center) -> np.ndarray:
    """Per-parameter factors converting (rad, mm, scale) into mm of displacement.

    A unit change of each parameter is measured by the RMS displacement it
    causes over the fixed image, weighted by squared gradient magnitude so
    that flat background does not count.
    """
    data = fixed.data.astype(np.float64)
    grads = np.gradient(data, *fixed.spacing)
    weight = sum(g * g for g in grads).reshape(-1)
    q = fixed.grid.world_coordinates().reshape(-1, 3) - np.asarray(center)
    if not weight.sum() > 0:
        weight = np.ones_like(weight)
    weight = weight / weight.sum()
    r2 = np.einsum("ij,ij->i", q, q)
    rot = [np.sqrt(weight @ (r2 - q[:, k] ** 2)) for k in range(3)]
    scale = np.sqrt(weight @ r2)
    return np.array(rot + [1.0, 1.0, 1.0] + [scale])


class _Objective:
    """MI of the fixed image against the moving image warped by a parameter vector."""

    def __init__(self, fixed: VoxelVolume, moving: VoxelVolume, center, bins: int,
                 region: Optional[np.ndarray], sample_fraction: float, seed: int,
                 jitter: float = 0.0):
        self.bins = bins
        self.center = np.asarray(center, dtype=float)
        grid = fixed.grid
        ijk = np.indices(grid.dims).reshape(3, -1).T.astype(np.float64)
        values = fixed.data.reshape(-1).astype(np.float64)
        keep = np.ones(len(values), dtype=bool) if region is None else region.reshape(-1)
        rng = np.random.default_rng(seed)
        if sample_fraction < 1.0:
            keep = keep & (rng.random(len(values)) < sample_fraction)
        ijk = ijk[keep]
        if jitter > 0:
            # an exactly grid-aligned identity gives interpolation-free
            # samples and a spurious MI peak; off-grid samples remove it
            upper = np.asarray(grid.dims, dtype=float) - 1.0
            ijk = np.clip(ijk + rng.uniform(-jitter, jitter, size=ijk.shape), 0.0, upper)
            fvals = map_coordinates(fixed.data.astype(np.float64), ijk.T, order=1, prefilter=False)
        else:
            fvals = values[keep]
        self.ijk = np.ascontiguousarray(ijk.T)
        self.fixed_bins = bin_indices(fvals, *_range(values), bins)
        self.fixed_i2w = grid.index_to_world_matrix()
        self.moving = moving.data.astype(np.float64)
        self.upper = (np.asarray(moving.dims, dtype=float) - 1.0)[:, None]
        self.moving_w2i = np.linalg.inv(moving.grid.index_to_world_matrix())
        self.moving_range = _range(moving.data.astype(np.float64))

    def transform(self, params) -> SimilarityTransform3D:
        return SimilarityTransform3D(params[:3], params[3:6], params[6], self.center)

    def __call__(self, params) -> float:
        if not params[6] > 0:
            return -math.inf
        t = self.transform(params)
        full = self.moving_w2i @ t.affine() @ self.fixed_i2w
        idx = full[:3, :3] @ self.ijk + full[:3, 3:]
        valid = np.all((idx >= 0.0) & (idx <= self.upper), axis=0)
        n_valid = int(np.count_nonzero(valid))
        if n_valid < 2:
            return -math.inf
        vals = map_coordinates(self.moving, idx[:, valid], order=1, mode="nearest", prefilter=False)
        mb = bin_indices(vals, *self.moving_range, self.bins)
        counts = _hist2d(self.fixed_bins[valid], mb, self.bins)
        return _mi_from_counts(counts, float(n_valid))


def _gradient(obj, params, scales, h):
    grad = np.zeros(7)
    for k in range(7):
        step = h / scales[k]
        up = params.copy()
        dn = params.copy()
        up[k] += step
        dn[k] -= step
        fu, fd = obj(up), obj(dn)
        if not (np.isfinite(fu) and np.isfinite(fd)):
            continue
        grad[k] = (fu - fd) / (2.0 * h)
    return grad


def register(fixed: VoxelVolume, moving: VoxelVolume, cfg: RegistrationConfig = RegistrationConfig(),
             init: Optional[SimilarityTransform3D] = None,
             region: Optional[LabelMask] = None) -> RegistrationResult:
    """Find the similarity transform maximizing MI between ``fixed`` and warped ``moving``.

    The returned transform maps fixed-grid world points into the moving
    image. ``result.mi`` is the objective of the last stage (full
    resolution, jittered interior samples), and it is never lower there
    than at ``init``.
    """
    for name, vol in (("fixed", fixed), ("moving", moving)):
        if float(vol.data.max()) <= float(vol.data.min()):
            raise ValidationError(f"{name} volume is constant")
    if region is not None and not region.grid.compatible(fixed.grid):
        raise ContractError("region mask must share the fixed grid")
    center = fixed.grid.center()
    if init is None:
        init = SimilarityTransform3D.identity(center)
    else:
        init = init.with_center(center)
    if cfg.parameter_scales is None:
        scales = physical_shift_scales(fixed, center)
    else:
        rot_w, mm_w, scale_w = cfg.parameter_scales
        scales = np.array([rot_w] * 3 + [mm_w] * 3 + [scale_w])

    fixed_pyr = build_pyramid(fixed, cfg.pyramid_levels)
    moving_pyr = build_pyramid(moving, len(fixed_pyr))
    region_pyr = [interior_region(v.dims, cfg.border_margin) for v in fixed_pyr]
    if region is not None:
        r = region.data
        for k in range(len(fixed_pyr)):
            nx, ny, nz = fixed_pyr[k].dims
            region_pyr[k] &= r[: nx * 2 ** k, : ny * 2 ** k, : nz * 2 ** k].reshape(
                nx, 2 ** k, ny, 2 ** k, nz, 2 ** k).max(axis=(1, 3, 5)) > 0

    params = np.array(list(init.euler_angles) + list(init.translation) + [init.scale])
    log: List[dict] = []
    # (level, smoothing, first step) from coarse to fine; the optional last
    # stage re-runs full resolution with lighter smoothing and a short step
    stages = [(level, cfg.smoothing_sigma, cfg.initial_step) for level in reversed(range(len(fixed_pyr)))]
    if cfg.refine_sigma is not None:
        stages.append((0, cfg.refine_sigma, cfg.refine_step))
    for stage, (level, sigma, step) in enumerate(stages):
        obj = _Objective(_smooth(fixed_pyr[level], sigma), _smooth(moving_pyr[min(level, len(moving_pyr) - 1)], sigma), center,
                         cfg.bins, region_pyr[level], cfg.sample_fraction, cfg.seed + stage,
                         cfg.sample_jitter)
        params = _ascend(obj, params, scales, cfg, level, step, log, stage)

    # the guard and the reported MI use the objective of the last stage
    start = np.array(list(init.euler_angles) + list(init.translation) + [init.scale])
    mi_end, mi_start = obj(params), obj(start)
    for val in (mi_end, mi_start):
        if np.isnan(val):
            raise OptimizerError("mutual information became NaN", log)
    if not mi_end >= mi_start:
        params, mi_end = start, mi_start
    if not np.isfinite(mi_end):
        raise OptimizerError("no overlap between fixed and moving images", log)
    return RegistrationResult(obj.transform(params), float(mi_end), log)


# steps and finite-difference offsets grow by this factor per pyramid level,
# matching the voxel size
LEVEL_GROWTH = 2.0


def _ascend(obj, params, scales, cfg: RegistrationConfig, level: int, step: float,
            log: list, stage: int):
    """Regular-step gradient ascent on one stage; returns the final parameters."""
    value = obj(params)
    if np.isnan(value):
        raise OptimizerError("mutual information became NaN", log)
    growth = LEVEL_GROWTH ** level
    max_step = step = step * growth
    min_step = cfg.min_step * growth
    iteration = 0
    grad = None
    while iteration < cfg.max_iterations and step >= min_step:
        if grad is None:
            grad = _gradient(obj, params, scales, cfg.fd_step * growth)
            norm = float(np.linalg.norm(grad))
            if norm == 0.0 or not np.isfinite(norm):
                break
            direction = grad / norm
        iteration += 1
        trial = params + step * direction / scales
        trial_value = obj(trial)
        if np.isnan(trial_value):
            raise OptimizerError("mutual information became NaN", log)
        # ties keep the current iterate
        accepted = trial_value > value
        log.append({"stage": stage, "level": level, "iteration": iteration, "mi": float(max(trial_value, value)),
                    "step": step, "accepted": bool(accepted)})
        if accepted:
            gain = trial_value - value
            params, value = trial, trial_value
            grad = None
            if gain < cfg.tolerance:
                break
            # a successful step earns back one shrink
            step = min(step / cfg.step_shrink, max_step)
        else:
            step *= cfg.step_shrink
    return params
