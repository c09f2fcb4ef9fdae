import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from liverstad.errors import InvalidTransformError, ValidationError
from liverstad.transform import SimilarityTransform3D
from liverstad.volume import (
    GridSpec,
    LabelMask,
    VoxelVolume,
    bounding_box,
    normalize_u8,
    resample,
    round_half_away,
)

from conftest import world_field


def test_round_half_away():
    assert round_half_away(np.array([0.5, 1.5, -0.5, -2.5, 2.4])).tolist() == [1, 2, -1, -3, 2]


def test_grid_validation():
    with pytest.raises(ValidationError):
        GridSpec((0, 2, 2))
    with pytest.raises(ValidationError):
        GridSpec((2, 2, 2), spacing=(1, -1, 1))
    with pytest.raises(ValidationError):
        GridSpec((2, 2, 2), origin=(np.nan, 0, 0))
    with pytest.raises(ValidationError):
        GridSpec((2, 2, 2), direction=np.ones((3, 3)))


def test_volume_is_float32_and_readonly():
    v = VoxelVolume(np.arange(8, dtype=np.int16).reshape(2, 2, 2))
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 5


def test_volume_rejects_nonfinite():
    with pytest.raises(ValidationError):
        VoxelVolume(np.full((2, 2, 2), np.inf))


def test_mask_values_must_be_binary():
    with pytest.raises(ValidationError):
        LabelMask(np.full((2, 2, 2), 2))
    assert LabelMask(np.ones((2, 2, 2), bool)).count == 8


def test_normalize_constant_is_zero():
    out = normalize_u8(VoxelVolume(np.full((3, 3, 3), 7.0)))
    assert np.all(out.data == 0)


def test_normalize_two_values():
    data = np.full((2, 2, 2), 10.0)
    data[0] = 20.0
    out = normalize_u8(VoxelVolume(data))
    assert set(np.unique(out.data)) == {0.0, 255.0}
    assert np.all(out.data[0] == 255)


def test_normalize_ramp_closed_form():
    ramp = np.arange(101, dtype=float).reshape(101, 1, 1)
    out = normalize_u8(VoxelVolume(ramp)).data.ravel()
    k = np.arange(101)
    expected = np.floor(255.0 * k / 100.0 + 0.5)
    assert np.array_equal(out, expected)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1e4, 1e4)))
def test_normalize_idempotent(data):
    once = normalize_u8(VoxelVolume(data))
    assert np.array_equal(normalize_u8(once).data, once.data)
    assert once.data.min() >= 0 and once.data.max() <= 255
    assert np.array_equal(once.data, np.round(once.data))


def test_resample_identity(rng):
    v = VoxelVolume(rng.normal(size=(5, 6, 7)), spacing=(1.0, 2.0, 0.5), origin=(3, -1, 2))
    assert resample(v, v.grid) == v


def test_resample_one_voxel_shift():
    data = np.arange(4 * 3 * 2, dtype=float).reshape(4, 3, 2) + 1
    v = VoxelVolume(data)
    target = GridSpec(v.dims, origin=(1.0, 0.0, 0.0))
    out = resample(v, target).data
    assert np.array_equal(out[:-1], data[1:])
    assert np.all(out[-1] == 0)


def test_trilinear_exact_on_affine_field():
    v = world_field((10, 10, 10), lambda x, y, z: 2 * x + 3 * y + 5 * z)
    target = GridSpec((8, 8, 8), origin=(0.5, 0.5, 0.5))
    out = resample(v, target).data
    idx = np.indices((8, 8, 8)) + 0.5
    expected = 2 * idx[0] + 3 * idx[1] + 5 * idx[2]
    assert np.allclose(out, expected, atol=1e-4)


def test_resample_rejects_bad_scale():
    v = VoxelVolume(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidTransformError):
        SimilarityTransform3D(scale=0.0)
    # a transform forced past validation is still refused by resample
    t = SimilarityTransform3D()
    object.__setattr__(t, "scale", 0.0)
    with pytest.raises(InvalidTransformError):
        resample(v, v.grid, t)


def test_nearest_mask_stays_binary(rng):
    m = LabelMask((rng.random((9, 9, 9)) > 0.5).astype(np.uint8))
    t = SimilarityTransform3D((0.1, 0.2, -0.1), (0.3, 0.7, -0.2), 1.1, (4, 4, 4))
    out = resample(m, m.grid, t, "nearest")
    assert isinstance(out, LabelMask)
    assert set(np.unique(out.data)) <= {0, 1}


def test_bounding_box_examples():
    m = np.zeros((10, 10, 10), np.uint8)
    assert bounding_box(LabelMask(m)) is None
    m[2, 3, 4] = 1
    assert bounding_box(LabelMask(m)) == ((2, 3, 4), (2, 3, 4))
    m[:] = 0
    m[1, 1, 1] = m[5, 2, 9] = 1
    assert bounding_box(LabelMask(m)) == ((1, 1, 1), (5, 2, 9))


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (5, 6, 4), elements=st.integers(0, 1)))
def test_bounding_box_is_tight(data):
    box = bounding_box(LabelMask(data))
    if not data.any():
        assert box is None
        return
    (x0, y0, z0), (x1, y1, z1) = box
    inside = np.zeros_like(data)
    inside[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = 1
    assert not np.any(data & ~inside.astype(bool))
    # every face of the box touches the foreground
    assert data[x0].any() and data[x1].any()
    assert data[:, y0].any() and data[:, y1].any()
    assert data[:, :, z0].any() and data[:, :, z1].any()
