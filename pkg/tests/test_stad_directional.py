import numpy as np
import pytest
from scipy import ndimage

from liverstad.errors import ContractError
from liverstad.stad.directional import eig3_symmetric, hessian_features, structure_tensor_features
from liverstad.volume import VoxelVolume

from conftest import box_mask, world_field


def test_eig3_examples():
    assert np.allclose(eig3_symmetric(np.eye(3)), (1, 1, 1))
    assert np.allclose(eig3_symmetric(np.diag([1.0, 3.0, 2.0])), (3, 2, 1))
    assert np.allclose(eig3_symmetric([[2, 1, 0], [1, 2, 0], [0, 0, 5]]), (5, 3, 1), atol=1e-12)


def test_eig3_random_against_lapack():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100_000, 3, 3))
    s = (a + np.swapaxes(a, 1, 2)) / 2
    ours = eig3_symmetric(s)
    ref = np.linalg.eigvalsh(s)[:, ::-1]
    rel = np.abs(ours - ref).max(axis=1) / np.abs(ref).max(axis=1)
    assert rel.max() <= 1e-6
    # residual of the characteristic equation det(S - l I) = 0
    for k in range(3):
        det = np.linalg.det(s - ours[:, k, None, None] * np.eye(3))
        assert np.max(np.abs(det) / np.abs(ref).max(axis=1) ** 3) <= 1e-6


def test_eig3_rejects_asymmetric():
    with pytest.raises(ContractError):
        eig3_symmetric([[1, 2, 0], [0, 1, 0], [0, 0, 1]])


def _interior(shape, margin, spacing=(1.0, 1.0, 1.0)):
    return box_mask(shape, (margin,) * 3, tuple(n - margin for n in shape), spacing)


def test_structure_tensor_constant():
    v = VoxelVolume(np.full((16, 16, 16), 5.0))
    assert structure_tensor_features(v, _interior((16, 16, 16), 2)) == (0.0, 0.0, 0.0)


def test_grating_is_coherent():
    v = world_field((32, 32, 32), lambda x, y, z: 100 * np.sin(2 * np.pi * x / 6.0))
    coh, _, planar = structure_tensor_features(v, _interior((32, 32, 32), 6))
    assert coh >= 0.95 and planar < 0.05


def test_smoothed_noise_not_coherent():
    for seed in range(10):
        noise = np.random.default_rng(seed).normal(size=(32, 32, 32))
        # correlation length well under the 2 mm window
        v = VoxelVolume(ndimage.gaussian_filter(noise, 0.5))
        assert structure_tensor_features(v, _interior((32, 32, 32), 6))[0] < 0.4


def test_hessian_bowl():
    v = world_field((30, 30, 30), lambda x, y, z: x * x + y * y + z * z)
    trace, anis, _ = hessian_features(v, _interior((30, 30, 30), 8))
    assert trace == pytest.approx(6.0, abs=0.1)
    assert abs(anis) < 1e-6


def test_hessian_x_squared():
    v = world_field((30, 30, 30), lambda x, y, z: x * x, (1.5, 1.0, 1.0))
    trace, anis, sheet = hessian_features(v, _interior((30, 30, 30), 8, (1.5, 1.0, 1.0)))
    assert trace == pytest.approx(2.0, abs=0.01)
    assert anis == pytest.approx(1.0, abs=1e-6)
    assert sheet == pytest.approx(0.0, abs=1e-3)


def test_hessian_constant():
    v = VoxelVolume(np.full((12, 12, 12), 1.0))
    assert hessian_features(v, _interior((12, 12, 12), 2)) == (0.0, 0.0, 0.0)
