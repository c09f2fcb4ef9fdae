"""Orientation and curvature descriptors: structure tensor and Hessian.

Derivatives are derivative-of-Gaussian filters whose widths are given in mm
and converted per axis, so features are comparable across voxel sizes.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import ContractError
from ..volume import LabelMask, VoxelVolume
from .texture import stencil_mask

_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def eig3_symmetric(s: np.ndarray, check: bool = True) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 matrices, sorted descending.

    ``s`` has shape ``(..., 3, 3)``. Uses the closed-form trigonometric
    solution of the characteristic cubic, vectorized over leading axes.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-2:] != (3, 3):
        raise ContractError(f"expected (..., 3, 3) matrices, got {s.shape}")
    if check:
        scale = np.maximum(np.abs(s).max(axis=(-2, -1)), 1.0)
        if np.any(np.abs(s - np.swapaxes(s, -1, -2)).max(axis=(-2, -1)) > 1e-9 * scale):
            raise ContractError("matrix is not symmetric")
    return _eig3(s[..., 0, 0], s[..., 1, 1], s[..., 2, 2], s[..., 0, 1], s[..., 0, 2], s[..., 1, 2])


def _eig3(a11, a22, a33, a12, a13, a23) -> np.ndarray:
    q = (a11 + a22 + a33) / 3.0
    p1 = a12 * a12 + a13 * a13 + a23 * a23
    b11, b22, b33 = a11 - q, a22 - q, a33 - q
    p2 = b11 * b11 + b22 * b22 + b33 * b33 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    c11, c22, c33 = b11 / safe, b22 / safe, b33 / safe
    c12, c13, c23 = a12 / safe, a13 / safe, a23 / safe
    det = (c11 * (c22 * c33 - c23 * c23) - c12 * (c12 * c33 - c23 * c13)
           + c13 * (c12 * c23 - c22 * c13))
    r = np.clip(det / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    out = np.stack([l1, l2, l3], axis=-1)
    # p == 0 means a multiple of the identity
    out = np.where((p > 0)[..., None], out, np.stack([q, q, q], axis=-1))
    return np.sort(out, axis=-1)[..., ::-1]


def _sigma_voxels(sigma_mm: float, spacing) -> np.ndarray:
    return sigma_mm / np.asarray(spacing, dtype=float)


def gaussian_kernel(sigma: float, order: int, truncate: float = 4.0) -> np.ndarray:
    """Sampled derivative-of-Gaussian weights for :func:`scipy.ndimage.correlate1d`.

    The weights are corrected so the filter is exact on polynomials up to
    degree 2, which plain truncated kernels are not: their order-2 weights
    do not sum to zero, so a quadratic picks up an error growing with x^2.
    """
    radius = max(1, int(truncate * sigma + 0.5))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    phi = np.exp(-0.5 * (x / sigma) ** 2)
    phi /= phi.sum()
    if order == 0:
        return phi
    if order == 1:
        w = x * phi
        return w / np.sum(x * w)
    if order == 2:
        w = (x * x - sigma * sigma) * phi
        w -= phi * (w.sum() / phi.sum())
        return 2.0 * w / np.sum(x * x * w)
    raise ContractError("derivative order must be 0, 1 or 2")


def gaussian_derivative(data: np.ndarray, sigma_mm: float, spacing, order) -> np.ndarray:
    """Gaussian-smoothed partial derivative in physical units."""
    sig = _sigma_voxels(sigma_mm, spacing)
    out = np.asarray(data, dtype=np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, gaussian_kernel(sig[axis], order[axis]), axis=axis, mode="nearest")
    return out / np.prod(np.asarray(spacing, dtype=float) ** np.asarray(order))


def structure_tensor_features(v: VoxelVolume, m: LabelMask, sigma_grad: float = 1.0,
                              sigma_window: float = 2.0):
    """``(coherence_mean, coherence_std, st_planarity_mean)`` over the mask.

    With tensor eigenvalues l1 >= l2 >= l3, coherence is
    ``(l1 - l3) / (l1 + l3 + 1e-12)`` and planarity ``(l2 - l3) / (l1 + 1e-12)``.
    """
    keep = stencil_mask(v, m)
    data = v.data.astype(np.float64)
    grads = [gaussian_derivative(data, sigma_grad, v.spacing, tuple(int(i == k) for i in range(3)))
             for k in range(3)]
    win = _sigma_voxels(sigma_window, v.spacing)
    comp = [ndimage.gaussian_filter(grads[i] * grads[j], win, mode="nearest")[keep] for i, j in _PAIRS]
    lam = _eig3(*comp)
    # round-off can leave tiny negative eigenvalues of a PSD tensor
    lam = np.clip(lam, 0.0, None)
    coherence = (lam[:, 0] - lam[:, 2]) / (lam[:, 0] + lam[:, 2] + 1e-12)
    planarity = (lam[:, 1] - lam[:, 2]) / (lam[:, 0] + 1e-12)
    return float(coherence.mean()), float(coherence.std()), float(planarity.mean())


def hessian_eigenvalues(v: VoxelVolume, sigma: float, keep: np.ndarray) -> np.ndarray:
    # second-derivative weights sum to zero only up to round-off; removing
    # the mean makes a constant volume give exact zeros
    data = v.data.astype(np.float64)
    data -= data.mean()
    comp = []
    for i, j in _PAIRS:
        order = [0, 0, 0]
        order[i] += 1
        order[j] += 1
        comp.append(gaussian_derivative(data, sigma, v.spacing, tuple(order))[keep])
    return _eig3(*comp)


def hessian_features(v: VoxelVolume, m: LabelMask, sigma: float = 1.5):
    """``(trace_mean, anisotropy_mean, sheetness_mean)`` of the Gaussian Hessian.

    Eigenvalues are ordered by value, mu1 >= mu2 >= mu3. Anisotropy is
    ``(mu1 - mu3) / (|mu1| + |mu2| + |mu3| + 1e-12)`` and sheetness
    ``|mu3| / sqrt(|mu1 mu2| + 1e-12)`` clamped to [0, 10].
    """
    keep = stencil_mask(v, m)
    mu = hessian_eigenvalues(v, sigma, keep)
    trace = mu.sum(axis=1)
    anis = (mu[:, 0] - mu[:, 2]) / (np.abs(mu).sum(axis=1) + 1e-12)
    sheet = np.clip(np.abs(mu[:, 2]) / np.sqrt(np.abs(mu[:, 0] * mu[:, 1]) + 1e-12), 0.0, 10.0)
    return float(trace.mean()), float(anis.mean()), float(sheet.mean())
