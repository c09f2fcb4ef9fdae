"""Vendor-wise instance mixing of annotated cases.

A source liver (volume under its mask) is cut out, scaled isotropically to
fit inside the target liver's bounding box, and pasted over the target. The
pasted mask becomes the new label; target liver voxels it does not cover are
filled with the median of the tissue just outside the target liver.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ContractError, DegenerateInputError
from .volume import LabelMask, VoxelVolume, bounding_box, nearest_sample, trilinear_sample

# width (voxels) of the shell around the target liver used for the fill value
SHELL_WIDTH = 3


@dataclass(frozen=True)
class MixSpec:
    source: str
    target: str
    scale: float
    seed: int

    def __post_init__(self):
        if self.source == self.target and self.source != "":
            raise ContractError(f"source and target must differ, both are {self.source!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticCase:
    case_id: str
    vendor: str
    volume: VoxelVolume
    mask: LabelMask
    spec: MixSpec


def _check_pair(vol: VoxelVolume, mask: LabelMask, role: str):
    if not vol.grid.compatible(mask.grid):
        raise ContractError(f"{role} volume and mask are on different grids")
    box = bounding_box(mask)
    if box is None:
        raise DegenerateInputError(f"{role} mask is empty")
    return box


def _box_geometry(grid, box):
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    extent = (hi - lo + 1.0) * np.asarray(grid.spacing)
    center = grid.origin + grid.direction @ ((lo + hi) / 2.0 * np.asarray(grid.spacing))
    return extent, np.asarray(center)


def shell_median(vol: VoxelVolume, mask: LabelMask, width: int = SHELL_WIDTH) -> float:
    """Median intensity of the ``width``-voxel ring just outside ``mask``."""
    inside = mask.as_bool()
    grown = ndimage.binary_dilation(inside, iterations=width)
    ring = grown & ~inside
    if not ring.any():
        # the mask fills the whole grid; fall back to the mask itself
        ring = inside
    return float(np.median(vol.data[ring]))


def instance_mix(source: Tuple[VoxelVolume, LabelMask], target: Tuple[VoxelVolume, LabelMask],
                 source_id: str = "", target_id: str = "", seed: int = 0):
    """Paste the source foreground into the target.

    Returns ``(volume, mask, spec)`` on the target grid. Only voxels inside
    the target foreground's bounding box can change.
    """
    src_vol, src_mask = source
    tgt_vol, tgt_mask = target
    src_box = _check_pair(src_vol, src_mask, "source")
    tgt_box = _check_pair(tgt_vol, tgt_mask, "target")

    src_extent, src_center = _box_geometry(src_vol.grid, src_box)
    tgt_extent, tgt_center = _box_geometry(tgt_vol.grid, tgt_box)
    scale = float(np.min(tgt_extent / src_extent))

    # target voxels in the target box, mapped back into the source grid
    lo, hi = tgt_box
    sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    ijk = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij"), axis=-1)
    world = ijk * np.asarray(tgt_vol.spacing) @ tgt_vol.direction.T + np.asarray(tgt_vol.origin)
    src_world = src_center + (world - tgt_center) / scale
    src_idx = src_vol.grid.world_to_index(src_world)

    # the source mask is confined to its box, so nothing outside it is pasted
    s_lo, s_hi = src_box
    cropped = np.zeros_like(src_mask.data)
    crop = tuple(slice(a, b + 1) for a, b in zip(s_lo, s_hi))
    cropped[crop] = src_mask.data[crop]
    pasted, _ = nearest_sample(cropped, src_idx)
    pasted = pasted.astype(bool)
    values, _ = trilinear_sample(src_vol.data, src_idx)

    out = tgt_vol.data.astype(np.float32, copy=True)
    label = np.zeros(tgt_mask.dims, dtype=np.uint8)
    region = out[sl]
    fill = shell_median(tgt_vol, tgt_mask)
    uncovered = tgt_mask.as_bool()[sl] & ~pasted
    region[uncovered] = fill
    region[pasted] = values[pasted]
    label[sl] = pasted

    spec = MixSpec(source_id, target_id, scale, int(seed))
    return VoxelVolume.on_grid(out, tgt_vol.grid), LabelMask.on_grid(label, tgt_mask.grid), spec


def plan_mixes(cases: Sequence[Tuple[str, str]], per_source: int = 5, seed: int = 0) -> List[MixSpec]:
    """Choose ``per_source`` distinct same-vendor targets for each ``(case, vendor)``.

    Sources are visited in input order with one generator, so the plan is
    a pure function of the case list, ``per_source`` and ``seed``. Scales
    are filled in when the mix is executed.
    """
    if per_source < 0:
        raise ConfigurationError("per_source must be >= 0")
    ids = [c for c, _ in cases]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("case ids must be unique")
    by_vendor = {}
    for case, vendor in cases:
        by_vendor.setdefault(vendor, []).append(case)
    if per_source == 0:
        return []
    for vendor, members in by_vendor.items():
        if len(members) < per_source + 1:
            raise ConfigurationError(
                f"vendor {vendor!r} has {len(members)} annotated cases; "
                f"per_source={per_source} needs at least {per_source + 1}"
            )
    rng = np.random.default_rng(seed)
    plan = []
    for case, vendor in cases:
        others = [c for c in by_vendor[vendor] if c != case]
        picks = rng.choice(len(others), size=per_source, replace=False)
        plan.extend(MixSpec(case, others[int(k)], float("nan"), int(seed)) for k in picks)
    return plan


def generate_mixes(annotated: Sequence[tuple], per_source: int = 5, seed: int = 0) -> List[SyntheticCase]:
    """Run :func:`instance_mix` for every planned same-vendor pair.

    ``annotated`` holds ``(case_id, volume, mask, vendor)`` tuples.
    """
    lookup = {case: (vol, mask, vendor) for case, vol, mask, vendor in annotated}
    plan = plan_mixes([(case, vendor) for case, _, _, vendor in annotated], per_source, seed)
    out = []
    for item in plan:
        s_vol, s_mask, vendor = lookup[item.source]
        t_vol, t_mask, t_vendor = lookup[item.target]
        assert vendor == t_vendor
        vol, mask, spec = instance_mix((s_vol, s_mask), (t_vol, t_mask), item.source, item.target, seed)
        out.append(SyntheticCase(mix_case_id(item.source, item.target), vendor, vol, mask, spec))
    return out


def mix_case_id(source: str, target: str) -> str:
    return f"mix_{source}_into_{target}"
