"""Intensity statistics, gradient magnitude and plane-wise GLCM texture."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError, DegenerateInputError
from ..volume import LabelMask, VoxelVolume

PLANES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
ENTROPY_BINS = 64


def _check(v: VoxelVolume, m: LabelMask) -> np.ndarray:
    if not v.grid.compatible(m.grid):
        raise ContractError("volume and mask are on different grids")
    data = m.as_bool()
    if not data.any():
        raise DegenerateInputError("mask is empty")
    return data


def interior_of_volume(shape) -> np.ndarray:
    """Voxels whose 3x3x3 stencil lies inside the array."""
    out = np.zeros(shape, dtype=bool)
    out[1:-1, 1:-1, 1:-1] = True
    return out


def stencil_mask(v: VoxelVolume, m: LabelMask) -> np.ndarray:
    keep = _check(v, m) & interior_of_volume(v.dims)
    if not keep.any():
        raise DegenerateInputError("no mask voxel has its full stencil inside the volume")
    return keep


def gradient_stats(v: VoxelVolume, m: LabelMask):
    """Mean and standard deviation of |grad v| (per mm) over the mask."""
    keep = stencil_mask(v, m)
    grads = np.gradient(v.data.astype(np.float64), *v.spacing)
    mag = np.sqrt(sum(g * g for g in grads))[keep]
    return float(mag.mean()), float(mag.std())


def appearance_stats(v: VoxelVolume, m: LabelMask):
    """``(mean, std, skewness, excess kurtosis, entropy, iqr)`` of masked intensities.

    Moments are population moments. Entropy (nats) uses a 64-bin
    histogram over the masked range. Zero spread gives zero skewness,
    kurtosis and entropy.
    """
    x = v.data[_check(v, m)].astype(np.float64)
    mean = float(x.mean())
    dev = x - mean
    var = float(np.mean(dev * dev))
    std = math.sqrt(var)
    if std > 0 and np.ptp(x) > 0:
        skew = float(np.mean(dev ** 3) / std ** 3)
        kurt = float(np.mean(dev ** 4) / var ** 2 - 3.0)
        counts, _ = np.histogram(x, bins=ENTROPY_BINS, range=(x.min(), x.max()))
        p = counts[counts > 0] / x.size
        entropy = float(-np.sum(p * np.log(p)))
    else:
        std, skew, kurt, entropy = 0.0, 0.0, 0.0, 0.0
    q25, q75 = np.percentile(x, [25.0, 75.0])
    return mean, std, skew, kurt, entropy, float(q75 - q25)


def quantize(v_u8: np.ndarray, levels: int) -> np.ndarray:
    """Map 0..255 intensities uniformly onto ``levels`` gray levels."""
    q = np.floor(np.asarray(v_u8, dtype=np.float64) * levels / 256.0)
    return np.clip(q, 0, levels - 1).astype(np.intp)


def cooccurrence(q: np.ndarray, keep: np.ndarray, axis: int, distance: int, levels: int) -> np.ndarray:
    """Symmetric co-occurrence counts of pairs ``distance`` apart along ``axis``.

    Both voxels of a pair must be in ``keep``.
    """
    n = q.shape[axis]
    if distance >= n:
        return np.zeros((levels, levels))
    a = [slice(None)] * 3
    b = [slice(None)] * 3
    a[axis] = slice(0, n - distance)
    b[axis] = slice(distance, n)
    a, b = tuple(a), tuple(b)
    both = keep[a] & keep[b]
    i, j = q[a][both], q[b][both]
    counts = np.bincount(i * levels + j, minlength=levels * levels).reshape(levels, levels)
    return (counts + counts.T).astype(np.float64)


def glcm_plane(v_u8: VoxelVolume, m: LabelMask, plane: str, levels: int = 16, distance: int = 1):
    """``(contrast, energy, homogeneity, anisotropy)`` for one orthogonal plane.

    Pairs are taken along the plane's two axes over all slices at once.
    The plane features use the average of the two normalized matrices;
    anisotropy is ``(C_a - C_b) / (C_a + C_b + 1e-12)`` with the axes in
    x, y, z order.
    """
    if plane not in PLANES:
        raise ContractError(f"plane must be one of {sorted(PLANES)}, got {plane!r}")
    if levels < 2 or distance < 1:
        raise ContractError("need levels >= 2 and distance >= 1")
    keep = _check(v_u8, m)
    q = quantize(v_u8.data, levels)
    diff = np.subtract.outer(np.arange(levels), np.arange(levels)).astype(np.float64)
    probs, contrasts = [], []
    for axis in PLANES[plane]:
        counts = cooccurrence(q, keep, axis, distance, levels)
        total = counts.sum()
        if total > 0:
            p = counts / total
            probs.append(p)
            contrasts.append(float(np.sum(p * diff * diff)))
        else:
            contrasts.append(0.0)
    if not probs:
        raise DegenerateInputError(f"no voxel pairs inside the mask in plane {plane}")
    p = sum(probs) / len(probs)
    contrast = float(np.sum(p * diff * diff))
    energy = float(np.sum(p * p))
    homogeneity = float(np.sum(p / (1.0 + np.abs(diff))))
    ca, cb = contrasts
    anisotropy = (ca - cb) / (ca + cb + 1e-12)
    return contrast, energy, homogeneity, anisotropy
