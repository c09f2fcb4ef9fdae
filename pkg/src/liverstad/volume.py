"""Voxel grids: scalar volumes, binary masks, and the operations that move
data between grids.

Arrays are indexed ``data[i, j, k]`` with ``i`` running along x. World
coordinates (mm) of voxel index ``ijk`` are ``origin + direction @ (spacing * ijk)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, InvalidTransformError, ValidationError
from .transform import SimilarityTransform3D

# index snapping tolerance for coordinates that land on grid points up to
# floating point noise
_SNAP = 1e-6


def round_half_away(x):
    """Round half away from zero (the only float -> int rule used here)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class GridSpec:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: Optional[np.ndarray] = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValidationError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(spacing)) or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be 3 positive finite reals, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise ValidationError(f"origin must be 3 finite reals, got {self.origin}")
        direction = np.eye(3) if self.direction is None else np.asarray(self.direction, dtype=float)
        if direction.shape != (3, 3) or not np.allclose(direction.T @ direction, np.eye(3), atol=1e-5):
            raise ValidationError("direction must be an orthonormal 3x3 matrix")
        direction = direction.copy()
        direction.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.direction, other.direction)
        )

    def __hash__(self):
        return hash((self.dims, self.spacing, self.origin, self.direction.tobytes()))

    def compatible(self, other: "GridSpec", tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def index_to_world_matrix(self) -> np.ndarray:
        """4x4 affine taking homogeneous voxel indices to world mm."""
        out = np.eye(4)
        out[:3, :3] = self.direction * np.asarray(self.spacing)
        out[:3, 3] = self.origin
        return out

    def world_coordinates(self) -> np.ndarray:
        """World position of every voxel center, shape ``dims + (3,)``."""
        axes = [np.arange(n, dtype=float) * s for n, s in zip(self.dims, self.spacing)]
        gi, gj, gk = np.meshgrid(*axes, indexing="ij")
        local = np.stack([gi, gj, gk], axis=-1)
        return local @ self.direction.T + np.asarray(self.origin)

    def world_to_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float) - np.asarray(self.origin)
        return (pts @ self.direction) / np.asarray(self.spacing)

    def center(self) -> np.ndarray:
        """World position of the grid's geometric center."""
        mid = (np.asarray(self.dims, dtype=float) - 1.0) / 2.0
        return np.asarray(self.origin) + self.direction @ (mid * np.asarray(self.spacing))

    def diagonal(self) -> float:
        return float(np.linalg.norm(np.asarray(self.dims) * np.asarray(self.spacing)))


class _Grid:
    """Shared plumbing for volumes and masks. Instances are read-only."""

    _dtype = np.float32

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
        arr = np.array(data, dtype=self._dtype, copy=True)
        if arr.ndim != 3:
            raise ValidationError(f"expected a 3D array, got shape {arr.shape}")
        self.grid = GridSpec(arr.shape, spacing, origin, direction)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def on_grid(cls, data, grid: GridSpec):
        data = np.asarray(data)
        if tuple(data.shape) != grid.dims:
            raise ValidationError(f"data shape {data.shape} does not match grid dims {grid.dims}")
        return cls(data, grid.spacing, grid.origin, grid.direction)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    @property
    def direction(self):
        return self.grid.direction

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing}, origin={self.origin})"


class VoxelVolume(_Grid):
    _dtype = np.float32

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
        super().__init__(data, spacing, origin, direction)
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite values")

    def __eq__(self, other):
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)

    __hash__ = None


class LabelMask(_Grid):
    _dtype = np.uint8

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), direction=None):
        raw = np.asarray(data)
        if raw.dtype == bool:
            raw = raw.astype(np.uint8)
        if raw.size and not np.all((raw == 0) | (raw == 1)):
            raise ValidationError("mask values must be exactly 0 or 1")
        super().__init__(raw, spacing, origin, direction)

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)

    __hash__ = None

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)


def normalize_u8(v: VoxelVolume) -> VoxelVolume:
    """Linearly map ``[min, max]`` to ``[0, 255]`` and round to integers.

    A constant volume maps to all zeros.
    """
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        out = np.zeros_like(data)
    else:
        out = round_half_away((data - lo) * 255.0 / (hi - lo))
        np.clip(out, 0.0, 255.0, out=out)
    return VoxelVolume.on_grid(out, v.grid)


def _sampling_indices(source: GridSpec, target: GridSpec, world_map: SimilarityTransform3D):
    if not world_map.scale > 0:
        raise InvalidTransformError("world map scale must be positive")
    pts = world_map.apply(target.world_coordinates())
    idx = source.world_to_index(pts)
    return snap_indices(idx)


def snap_indices(idx: np.ndarray) -> np.ndarray:
    near = round_half_away(idx)
    return np.where(np.abs(idx - near) < _SNAP, near, idx)


def trilinear_sample(data: np.ndarray, idx: np.ndarray):
    """Sample ``data`` at fractional voxel indices ``idx`` (``(..., 3)``).

    Returns ``(values, valid)``; points outside ``[0, n-1]`` on any axis are
    invalid and get value 0.
    """
    dims = np.asarray(data.shape)
    valid = np.all((idx >= 0.0) & (idx <= dims - 1), axis=-1)
    fl = np.floor(idx)
    i0 = np.clip(fl, 0, np.maximum(dims - 2, 0)).astype(np.intp)
    frac = np.clip(idx - i0, 0.0, 1.0)
    i1 = np.minimum(i0 + 1, dims - 1)
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    d = data.astype(np.float64, copy=False)
    c00 = d[x0, y0, z0] * (1 - fx) + d[x1, y0, z0] * fx
    c10 = d[x0, y1, z0] * (1 - fx) + d[x1, y1, z0] * fx
    c01 = d[x0, y0, z1] * (1 - fx) + d[x1, y0, z1] * fx
    c11 = d[x0, y1, z1] * (1 - fx) + d[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return np.where(valid, out, 0.0), valid


def nearest_sample(data: np.ndarray, idx: np.ndarray):
    dims = np.asarray(data.shape)
    r = round_half_away(idx)
    valid = np.all((r >= 0) & (r <= dims - 1), axis=-1)
    r = np.clip(r, 0, dims - 1).astype(np.intp)
    out = data[r[..., 0], r[..., 1], r[..., 2]]
    return np.where(valid, out, 0), valid


def resample(v, target: GridSpec, world_map: Optional[SimilarityTransform3D] = None,
             interp: str = "trilinear"):
    """Resample ``v`` onto ``target``.

    Each output voxel at world point ``p`` takes the value of ``v`` at
    ``world_map(p)``; samples outside ``v`` are 0. Masks keep their type.
    """
    if world_map is None:
        world_map = SimilarityTransform3D()
    idx = _sampling_indices(v.grid, target, world_map)
    if interp == "trilinear":
        values, _ = trilinear_sample(v.data, idx)
    elif interp == "nearest":
        values, _ = nearest_sample(v.data, idx)
    else:
        raise ContractError(f"unknown interpolation {interp!r}")
    if isinstance(v, LabelMask):
        if interp != "nearest":
            values = (values >= 0.5).astype(np.uint8)
        return LabelMask.on_grid(values, target)
    return VoxelVolume.on_grid(values, target)


def bounding_box(m: LabelMask):
    """Inclusive voxel box ``((x0, y0, z0), (x1, y1, z1))``, or ``None`` if empty."""
    data = m.data
    if not data.any():
        return None
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(data.any(axis=other))
        lo.append(int(hits[0]))
        hi.append(int(hits[-1]))
    return tuple(lo), tuple(hi)
