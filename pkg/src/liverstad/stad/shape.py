"""Shape descriptors of a binary liver mask.

Volumes and areas are in mm^3 and mm^2. Voxels are treated as boxes of
size ``spacing`` centred on their grid positions.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from ..errors import DegenerateInputError
from ..volume import LabelMask

# Gaussian width (voxels of the finest axis) used to estimate surface normals
NORMAL_SIGMA = 1.0

_CORNERS = np.array([[i, j, k] for i in (-0.5, 0.5) for j in (-0.5, 0.5) for k in (-0.5, 0.5)])


def _require(m: LabelMask) -> np.ndarray:
    data = m.as_bool()
    if not data.any():
        raise DegenerateInputError("mask is empty")
    return data


def mask_volume(m: LabelMask) -> float:
    return float(m.count * np.prod(m.spacing))


def exposed_faces(data: np.ndarray):
    """Per axis and side, the foreground voxels whose face neighbour is background."""
    padded = np.pad(data, 1)
    inner = (slice(1, -1),) * 3
    out = []
    for axis in range(3):
        for shift in (1, -1):
            neighbour = np.roll(padded, shift, axis=axis)[inner]
            out.append((axis, data & ~neighbour))
    return out


def surface_area(m: LabelMask, weighted: bool = True) -> float:
    """Surface area of the voxelized mask.

    With ``weighted=False`` this is the exposed-face count times the face
    areas. A staircase surface with unit normal ``n`` exposes ``|n|_1``
    faces per unit of true area, so the plain count overestimates smooth
    surfaces by up to 1.5x on average for a sphere. The weighted estimate
    divides each face by ``|n|_1``, with ``n`` taken from the gradient of
    the Gaussian-smoothed mask; faces with no defined normal (an isolated
    voxel, by symmetry) count fully. Faces of an axis-aligned plane are exact
    away from its edges; edges and corners are treated as rounded.
    """
    data = _require(m)
    sp = np.asarray(m.spacing, dtype=float)
    face_area = np.array([sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]])
    faces = exposed_faces(data)
    if not weighted:
        return float(sum(face_area[a] * np.count_nonzero(f) for a, f in faces))
    sigma = NORMAL_SIGMA * sp.min() / sp
    smooth = ndimage.gaussian_filter(data.astype(np.float64), sigma, mode="constant")
    grad = np.stack(np.gradient(smooth, *sp))
    total = 0.0
    for axis, f in faces:
        g = grad[:, f]
        norm = np.sqrt(np.sum(g * g, axis=0))
        l1 = np.abs(g).sum(axis=0)
        ratio = np.ones_like(norm)
        ok = norm > 1e-9
        ratio[ok] = l1[ok] / norm[ok]
        total += face_area[axis] * float(np.sum(1.0 / ratio))
    return total


def sphericity(volume: float, area: float) -> float:
    """``pi^(1/3) (6 V)^(2/3) / A``; 1 for a perfect ball."""
    return float(np.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area)


def boundary_voxels(data: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face neighbour."""
    interior = ndimage.binary_erosion(data, border_value=0)
    return data & ~interior


def hull_volume_of_points(points: np.ndarray, fallback: float) -> float:
    """Convex hull volume by a fan of tetrahedra from an interior point.

    Returns ``fallback`` when the points are fewer than four or coplanar.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 4:
        return float(fallback)
    try:
        hull = ConvexHull(points)
    except QhullError:
        return float(fallback)
    apex = points[hull.vertices].mean(axis=0)
    tri = points[hull.simplices] - apex
    vol = np.abs(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))) / 6.0
    return float(np.sum(vol))


def convex_hull_volume(m: LabelMask) -> float:
    """Volume of the convex hull of all foreground voxel corners.

    Only boundary voxels can contribute hull vertices, so their corners are
    the only points passed to the hull.
    """
    data = _require(m)
    ijk = np.argwhere(boundary_voxels(data)).astype(np.float64)
    corners = np.unique((ijk[:, None, :] + _CORNERS[None]).reshape(-1, 3), axis=0)
    world = corners * np.asarray(m.spacing) @ np.asarray(m.direction).T
    return hull_volume_of_points(world, mask_volume(m))


def shape_features(m: LabelMask):
    """``(volume_mm3, surface_area_mm2, sphericity, solidity)``."""
    _require(m)
    vol = mask_volume(m)
    area = surface_area(m)
    return vol, area, sphericity(vol, area), vol / convex_hull_volume(m)


def pca_shape(m: LabelMask):
    """``(elongation, flatness)`` from the covariance of voxel positions.

    With eigenvalues l1 >= l2 >= l3, elongation is ``sqrt(l2 / l1)`` and
    flatness ``sqrt(l3 / l2)``; a zero denominator gives 0.
    """
    data = m.as_bool()
    if np.count_nonzero(data) < 2:
        raise DegenerateInputError("need at least 2 foreground voxels")
    pts = np.argwhere(data) * np.asarray(m.spacing, dtype=float)
    cov = np.cov(pts, rowvar=False, bias=True)
    lam = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)

    def ratio(a, b):
        return float(np.sqrt(a / b)) if b > 0 else 0.0

    return ratio(lam[1], lam[0]), ratio(lam[2], lam[1])
