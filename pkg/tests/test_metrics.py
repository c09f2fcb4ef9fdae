import itertools

import numpy as np
import pytest
from scipy import ndimage

from liverstad.errors import ContractError, UndefinedMetricError
from liverstad.metrics import (
    EvalReport,
    accuracy,
    classification_scores,
    dice,
    dice_ce_loss,
    hausdorff,
    roc_auc,
    segmentation_scores,
)
from liverstad.volume import LabelMask

from conftest import box_mask


def brute_surface(data):
    """Foreground voxels with a 6-neighbour outside the mask or the array."""
    pad = np.pad(data, 1)
    out = []
    for idx in np.argwhere(data):
        p = idx + 1
        for axis, step in itertools.product(range(3), (-1, 1)):
            q = p.copy()
            q[axis] += step
            if not pad[tuple(q)]:
                out.append(idx)
                break
    return np.array(out, dtype=float)


def brute_hausdorff(a, b, spacing):
    sa, sb = brute_surface(a) * spacing, brute_surface(b) * spacing
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    ab, ba = d.min(axis=1), d.min(axis=0)
    return max(ab.max(), ba.max()), max(np.percentile(ab, 95), np.percentile(ba, 95))


def test_dice_examples():
    a = box_mask((10, 20, 10), (0, 0, 0), (10, 10, 1))
    assert dice(a, a) == 1.0
    assert dice(a, box_mask((10, 20, 10), (0, 0, 5), (10, 10, 6))) == 0.0
    b = box_mask((10, 20, 10), (0, 5, 0), (10, 15, 1))
    assert dice(a, b) == 0.5 == dice(b, a)
    empty = LabelMask(np.zeros((10, 10, 10), np.uint8))
    assert dice(empty, empty) == 1.0


def test_hausdorff_examples():
    a = box_mask((20, 14, 14), (2, 2, 2), (12, 12, 12))
    assert hausdorff(a, a) == (0.0, 0.0)
    b = box_mask((20, 14, 14), (5, 2, 2), (15, 12, 12))
    assert hausdorff(a, b) == (3.0, 3.0)
    inner = box_mask((24, 24, 24), (7, 7, 7), (17, 17, 17))
    outer = box_mask((24, 24, 24), (2, 2, 2), (22, 22, 22))
    hd, hd95 = hausdorff(inner, outer)
    ref = brute_hausdorff(inner.as_bool(), outer.as_bool(), np.ones(3))
    assert hd == pytest.approx(ref[0]) and hd95 == pytest.approx(ref[1])
    with pytest.raises(UndefinedMetricError):
        hausdorff(a, LabelMask(np.zeros(a.dims, np.uint8)))


def test_hausdorff_matches_all_pairs_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        dims = tuple(int(n) for n in rng.integers(3, 17, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.5, 2.0, size=3))
        masks = []
        while len(masks) < 2:
            blob = ndimage.gaussian_filter(rng.normal(size=dims), rng.uniform(0.5, 2.0)) > rng.uniform(-0.2, 0.3)
            if blob.any():
                masks.append(blob)
        a, b = (LabelMask(m.astype(np.uint8), spacing) for m in masks)
        hd, hd95 = hausdorff(a, b)
        ref_hd, ref_95 = brute_hausdorff(masks[0], masks[1], np.array(spacing))
        assert hd == pytest.approx(ref_hd, abs=1e-9)
        assert hd95 == pytest.approx(ref_95, abs=1e-9)
        assert hausdorff(b, a) == (hd, hd95)


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_count():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.integers(0, 5, size=30) / 4.0
        y = rng.integers(0, 2, size=30)
        if y.min() == y.max():
            continue
        pos, neg = s[y == 1], s[y == 0]
        ref = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))
        assert roc_auc(s, y) == pytest.approx(ref, abs=1e-12)


def test_accuracy_examples():
    y = [0, 1, 0, 1, 1, 0, 0, 1, 1, 0]
    assert accuracy(y, y) == 1.0
    assert accuracy(1 - np.array(y), y) == 0.0
    flipped = list(y)
    for i in (0, 3, 6):
        flipped[i] = 1 - flipped[i]
    assert accuracy(flipped, y) == 0.7
    assert accuracy([0.5], [1]) == 1.0
    with pytest.raises(ContractError):
        accuracy([], [])


def test_loss_perfect_and_empty():
    truth = box_mask((8, 8, 8), (2, 2, 2), (6, 6, 6))
    assert dice_ce_loss(truth.data.astype(float), truth) == pytest.approx(-1.0, abs=1e-6)
    n = truth.count
    assert dice_ce_loss(truth.data.astype(float), truth) == pytest.approx(-(2 * n + 1) / (2 * n + 1 + 1e-8), abs=1e-15)
    empty = LabelMask(np.zeros((8, 8, 8), np.uint8))
    assert dice_ce_loss(np.zeros((8, 8, 8)), empty) == pytest.approx(-1.0 / (1.0 + 1e-8), abs=1e-15)


def test_loss_uniform_half_closed_form():
    truth = box_mask((9, 7, 5), (1, 1, 1), (5, 4, 3))
    n, m = truth.count, truth.data.size
    expected = -(n + 1) / (0.5 * m + n + 1 + 1e-8) + n * np.log(2)
    assert dice_ce_loss(np.full(truth.dims, 0.5), truth) == pytest.approx(expected, abs=1e-9)


def test_loss_decreases_toward_truth():
    rng = np.random.default_rng(11)
    for _ in range(100):
        shape = tuple(int(k) for k in rng.integers(2, 8, size=3))
        y = (rng.random(shape) < rng.uniform(0.05, 0.9)).astype(np.uint8)
        truth = LabelMask(y)
        p = rng.random(shape)
        losses = [dice_ce_loss(p + t * (y - p), truth) for t in np.linspace(0, 1, 6)]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_loss_contracts():
    truth = box_mask((4, 4, 4), (1, 1, 1), (3, 3, 3))
    with pytest.raises(ContractError):
        dice_ce_loss(np.full((4, 4, 4), 1.5), truth)
    with pytest.raises(ContractError):
        dice_ce_loss(np.zeros((4, 4, 3)), truth)


def test_scores_and_report():
    a = box_mask((10, 10, 10), (0, 0, 0), (10, 10, 1))
    seg = segmentation_scores(a, a)
    assert seg["dice"] == 1.0 and seg["hausdorff_mm"] == 0.0
    cls = classification_scores([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert cls["auc"] == 0.75 and cls["acc"] == 0.75
    assert "auc" not in classification_scores([0.2, 0.9], [1, 1])
    report = EvalReport(segmentation={"c1": seg}, groups={"c1": "GED4"})
    assert report.dumps() == EvalReport(segmentation={"c1": seg}, groups={"c1": "GED4"}).dumps()
