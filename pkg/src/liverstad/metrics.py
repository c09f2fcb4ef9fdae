"""Segmentation and classification metrics, and the Dice plus cross-entropy loss."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ContractError, UndefinedMetricError
from .stad.shape import boundary_voxels
from .volume import LabelMask


def _same_grid(a: LabelMask, b: LabelMask):
    if not a.grid.compatible(b.grid):
        raise ContractError("masks are on different grids")


def dice(a: LabelMask, b: LabelMask) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks agree perfectly (1.0)."""
    _same_grid(a, b)
    x, y = a.as_bool(), b.as_bool()
    total = np.count_nonzero(x) + np.count_nonzero(y)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(x & y) / total


def surface_voxels(data: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face neighbour; the array edge counts as background."""
    return boundary_voxels(np.asarray(data, dtype=bool))


def directed_surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface_voxels(a), surface_voxels(b)
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist[sa]


def hausdorff(a: LabelMask, b: LabelMask, spacing=None) -> Tuple[float, float]:
    """``(hd_mm, hd95_mm)`` between the surfaces of two masks.

    ``hd95`` is the larger of the two directed 95th percentiles (linear
    interpolation between order statistics).
    """
    _same_grid(a, b)
    x, y = a.as_bool(), b.as_bool()
    if not x.any() or not y.any():
        raise UndefinedMetricError("Hausdorff distance of an empty mask is undefined")
    sp = a.spacing if spacing is None else tuple(float(s) for s in spacing)
    d_ab = directed_surface_distances(x, y, sp)
    d_ba = directed_surface_distances(y, x, sp)
    hd = max(float(d_ab.max()), float(d_ba.max()))
    hd95 = max(float(np.percentile(d_ab, 95.0)), float(np.percentile(d_ba, 95.0)))
    return hd, hd95


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all(np.isin(y, (0, 1))):
        raise ContractError("labels must be 0 or 1")
    return y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be 1-d of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    # midranks handle ties exactly: sum of positive ranks minus its minimum
    ranks = _midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction correct when ``score >= threshold`` predicts positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if s.size == 0 or s.shape != y.shape:
        raise ContractError("scores and labels must be nonempty and of equal length")
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def dice_ce_loss(pred: np.ndarray, truth: LabelMask, w_dc: float = 1.0, w_ce: float = 1.0,
                 f_smooth: float = 1.0, eps: float = 1e-8) -> float:
    """Soft Dice plus foreground cross-entropy.

    ``L = -w_dc (2 sum(p y) + f) / (sum p + sum y + f + eps) - w_ce sum(y log p)``
    with ``log p`` clamped below at ``log(1e-12)``. Only foreground voxels
    enter the cross-entropy term.
    """
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    y = truth.as_bool().astype(np.float64)
    if p.shape != y.shape:
        raise ContractError(f"prediction shape {p.shape} differs from truth {y.shape}")
    if hasattr(pred, "grid") and not pred.grid.compatible(truth.grid):
        raise ContractError("prediction and truth are on different grids")
    if not np.all((p >= 0.0) & (p <= 1.0)):
        raise ContractError("predicted probabilities must lie in [0, 1]")
    inter = math.fsum((p * y).ravel())
    soft_dice = (2.0 * inter + f_smooth) / (math.fsum(p.ravel()) + math.fsum(y.ravel()) + f_smooth + eps)
    fg = y > 0
    ce = math.fsum(np.log(np.maximum(p[fg], 1e-12)))
    return -w_dc * soft_dice - w_ce * ce


@dataclass
class EvalReport:
    """Per-case and aggregate scores; absent metrics are ``None``."""

    segmentation: Dict[str, Dict[str, float]] = field(default_factory=dict)
    classification: Dict[str, Dict[str, float]] = field(default_factory=dict)
    # per-modality means of the segmentation scores
    groups: Dict[str, Dict[str, float]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def aggregate(self) -> Dict[str, Optional[float]]:
        out: Dict[str, Optional[float]] = {}
        for key in ("dice", "hausdorff_mm", "hd95_mm"):
            vals = [c[key] for c in self.segmentation.values() if key in c]
            out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        for key in ("auc", "acc"):
            vals = [c[key] for c in self.classification.values() if key in c]
            out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        return out

    def to_json(self) -> dict:
        return {
            "segmentation": {k: self.segmentation[k] for k in sorted(self.segmentation)},
            "classification": {k: self.classification[k] for k in sorted(self.classification)},
            "groups": {k: self.groups[k] for k in sorted(self.groups)},
            "counts": dict(sorted(self.counts.items())),
            "aggregate": self.aggregate(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines: List[str] = []
        if self.segmentation:
            lines.append(f"{'case':<32} {'dice':>8} {'hd_mm':>9} {'hd95_mm':>9}")
            for k in sorted(self.segmentation):
                c = self.segmentation[k]
                lines.append(f"{k:<32} {c['dice']:8.4f} {_fmt(c.get('hausdorff_mm'))} {_fmt(c.get('hd95_mm'))}")
        for k in sorted(self.groups):
            c = self.groups[k]
            lines.append(f"{'mean ' + k:<32} {c['dice']:8.4f} {_fmt(c.get('hausdorff_mm'))} {_fmt(c.get('hd95_mm'))}")
        if self.classification:
            lines.append(f"{'task/group':<32} {'auc':>8} {'acc':>9} {'n':>9}")
            for k in sorted(self.classification):
                c = self.classification[k]
                lines.append(f"{k:<32} {_fmt8(c.get('auc'))} {c['acc']:9.4f} {int(c.get('n', 0)):9d}")
        for k, v in self.aggregate().items():
            if v is not None:
                lines.append(f"{k}: {v:.4f}")
        return "\n".join(lines)


def _fmt(x) -> str:
    return f"{x:9.3f}" if x is not None else f"{'n/a':>9}"


def _fmt8(x) -> str:
    return f"{x:8.4f}" if x is not None else f"{'n/a':>8}"


def segmentation_scores(pred: LabelMask, truth: LabelMask) -> Dict[str, float]:
    out = {"dice": dice(pred, truth)}
    if pred.count and truth.count:
        out["hausdorff_mm"], out["hd95_mm"] = hausdorff(pred, truth)
    return out


def classification_scores(scores: Sequence[float], labels: Sequence[int]) -> Dict[str, float]:
    out = {"acc": accuracy(scores, labels), "n": len(labels)}
    try:
        out["auc"] = roc_auc(scores, labels)
    except UndefinedMetricError:
        pass
    return out
