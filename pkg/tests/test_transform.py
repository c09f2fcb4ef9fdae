import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liverstad.errors import InvalidTransformError
from liverstad.transform import (
    SimilarityTransform3D,
    euler_matrix,
    matrix_to_euler,
    rotation_angle_between,
    transform_point,
)

angle = st.floats(-np.pi / 2 + 0.01, np.pi / 2 - 0.01)
coord = st.floats(-100, 100)
transforms = st.builds(
    SimilarityTransform3D,
    st.tuples(angle, angle, angle),
    st.tuples(coord, coord, coord),
    st.floats(0.5, 2.0),
    st.tuples(coord, coord, coord),
)


def test_identity():
    p = np.array([3.0, -2.0, 7.5])
    assert np.array_equal(transform_point(SimilarityTransform3D(), p), p)


def test_pure_translation():
    t = SimilarityTransform3D(translation=(1, 2, 3))
    assert np.allclose(transform_point(t, (0, 0, 0)), (1, 2, 3))


def test_quarter_turn_about_z():
    t = SimilarityTransform3D(euler_angles=(0, 0, np.pi / 2))
    assert np.allclose(transform_point(t, (1, 0, 0)), (0, 1, 0), atol=1e-12)


def test_rotation_order_is_zyx():
    a, b, g = 0.3, -0.4, 1.1

    def rx(t):
        return np.array([[1, 0, 0], [0, np.cos(t), -np.sin(t)], [0, np.sin(t), np.cos(t)]])

    def ry(t):
        return np.array([[np.cos(t), 0, np.sin(t)], [0, 1, 0], [-np.sin(t), 0, np.cos(t)]])

    def rz(t):
        return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])

    assert np.allclose(euler_matrix((a, b, g)), rz(g) @ ry(b) @ rx(a), atol=1e-14)


def test_center_and_scale():
    t = SimilarityTransform3D(scale=2.0, center=(1, 1, 1))
    assert np.allclose(t.apply((2, 1, 1)), (3, 1, 1))


def test_invalid_scale():
    for s in (0.0, -1.0, np.nan):
        with pytest.raises(InvalidTransformError):
            SimilarityTransform3D(scale=s)


@settings(max_examples=60, deadline=None)
@given(transforms, st.tuples(coord, coord, coord))
def test_inverse_round_trip(t, p):
    back = transform_point(t.inverse(), transform_point(t, p))
    assert np.allclose(back, p, atol=1e-9)
    assert np.allclose(t.compose(t.inverse()).apply(p), p, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(transforms, transforms, st.tuples(coord, coord, coord))
def test_compose_applies_right_first(a, b, p):
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(transforms, st.tuples(coord, coord, coord))
def test_with_center_same_mapping(t, c):
    p = np.array([[1.0, 2.0, 3.0], [-40.0, 5.0, 60.0]])
    assert np.allclose(t.with_center(c).apply(p), t.apply(p), atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.tuples(angle, angle, angle))
def test_euler_round_trip(angles):
    assert np.allclose(matrix_to_euler(euler_matrix(angles)), angles, atol=1e-9)


def test_dict_round_trip_degrees():
    t = SimilarityTransform3D((0.1, -0.2, 0.3), (1, 2, 3), 1.02, (4, 5, 6))
    d = t.to_dict()
    assert np.allclose(d["euler_deg"], np.degrees([0.1, -0.2, 0.3]))
    back = SimilarityTransform3D.from_dict(d)
    assert np.allclose(back.affine(), t.affine(), atol=1e-12)


def test_rotation_angle_between():
    a = SimilarityTransform3D()
    b = SimilarityTransform3D(euler_angles=(0, 0, np.radians(3.0)))
    assert rotation_angle_between(a, b) == pytest.approx(np.radians(3.0), abs=1e-12)
