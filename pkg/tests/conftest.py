import numpy as np
import pytest

from liverstad.volume import LabelMask, VoxelVolume


def box_mask(shape, lo, hi, spacing=(1.0, 1.0, 1.0)):
    """Mask with the inclusive-exclusive box ``[lo, hi)`` set."""
    data = np.zeros(shape, dtype=np.uint8)
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return LabelMask(data, spacing)


def ball_mask(shape, center, radius, spacing=(1.0, 1.0, 1.0)):
    idx = np.indices(shape).astype(float)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    r2 = np.sum((idx - c) ** 2, axis=0)
    return LabelMask((r2 <= radius * radius).astype(np.uint8), spacing)


def ellipsoid_mask(shape, center, semi_axes):
    idx = np.indices(shape).astype(float)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    a = np.asarray(semi_axes, dtype=float).reshape(3, 1, 1, 1)
    return LabelMask((np.sum(((idx - c) / a) ** 2, axis=0) <= 1.0).astype(np.uint8))


def world_field(shape, fn, spacing=(1.0, 1.0, 1.0)):
    """Volume sampling ``fn(x, y, z)`` at voxel world positions (origin 0)."""
    idx = np.indices(shape).astype(float)
    x, y, z = (idx[k] * spacing[k] for k in range(3))
    return VoxelVolume(fn(x, y, z), spacing)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
