"""Random-forest staging of liver fibrosis from STAD features.

Trees are CART classifiers with Gini splits. A split sends ``x <= t`` left,
where ``t`` is the lower of the two adjacent training values it separates,
so any strictly increasing transform of a column (applied to train and test
alike) leaves every prediction unchanged.
"""
from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DegenerateInputError, TrainingError, ValidationError
from .manifest import STAGES

MODEL_FORMAT = "liverstad-forest"
MODEL_VERSION = 1


class StagingTask(str, enum.Enum):
    CIRRHOSIS = "cirrhosis"
    SUBSTANTIAL_FIBROSIS = "substantial_fibrosis"


def binarize_stage(stage: str, task: StagingTask) -> int:
    """Cirrhosis: S4 is positive. Substantial fibrosis: S2, S3 and S4 are positive."""
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}")
    task = StagingTask(task)
    if task is StagingTask.CIRRHOSIS:
        return int(stage == "S4")
    return int(stage != "S1")


def gini_impurity(labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        raise ContractError("gini impurity of an empty set")
    p1 = float(np.count_nonzero(y)) / y.size
    return 1.0 - p1 * p1 - (1.0 - p1) ** 2


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int = 12
    min_samples_leaf: int = 2
    # None means ceil(sqrt(d))
    features_per_split: Optional[int] = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValidationError("n_trees >= 1, max_depth >= 0 and min_samples_leaf >= 1 are required")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValidationError("features_per_split must be >= 1")

    def k(self, d: int) -> int:
        k = math.ceil(math.sqrt(d)) if self.features_per_split is None else self.features_per_split
        return min(k, d)


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    p1: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(len(X), dtype=np.intp)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.p1[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "p1": [float(p) for p in self.p1],
        }

    @classmethod
    def from_json(cls, d: dict, n_features: int) -> "Tree":
        try:
            feature = np.asarray(d["feature"], dtype=np.intp)
            tree = cls(feature, np.asarray(d["threshold"], dtype=np.float64),
                       np.asarray(d["left"], dtype=np.intp), np.asarray(d["right"], dtype=np.intp),
                       np.asarray(d["p1"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed tree: {exc}") from exc
        n = len(feature)
        arrays = (tree.threshold, tree.left, tree.right, tree.p1)
        if n == 0 or any(len(a) != n for a in arrays):
            raise ValidationError("tree node arrays differ in length")
        internal = feature >= 0
        if np.any(feature[internal] >= n_features) or np.any(feature < -1):
            raise ValidationError("tree refers to a feature outside the model")
        if not np.all(np.isfinite(tree.threshold[internal])):
            raise ValidationError("non-finite split threshold")
        for child in (tree.left, tree.right):
            if np.any((child[internal] <= np.flatnonzero(internal)) | (child[internal] >= n)):
                raise ValidationError("tree child index out of range")
        if np.any((tree.p1 < 0) | (tree.p1 > 1)):
            raise ValidationError("leaf probability outside [0, 1]")
        return tree


def _best_split(X, y, rows, features, min_leaf):
    """Best Gini split of ``rows`` among ``features``.

    Returns ``(decrease, feature, threshold)`` with decrease in summed
    impurity units (n * gini), or ``None``. Ties keep the first feature in
    the given order and the lowest threshold.
    """
    n = len(rows)
    yr = y[rows]
    total_pos = float(yr.sum())
    parent = n * (1.0 - (total_pos / n) ** 2 - (1.0 - total_pos / n) ** 2)
    best = None
    for f in features:
        col = X[rows, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        pos = np.cumsum(yr[order], dtype=np.float64)
        n_left = np.arange(1, n, dtype=np.float64)
        # candidate cut after position i separates xs[i] < xs[i + 1]
        ok = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        pl = pos[:-1]
        pr = total_pos - pl
        n_right = n - n_left
        g_left = n_left - (pl * pl + (n_left - pl) ** 2) / n_left
        g_right = n_right - (pr * pr + (n_right - pr) ** 2) / n_right
        dec = parent - (g_left + g_right)
        dec = np.where(ok, dec, -np.inf)
        i = int(np.argmax(dec))
        if dec[i] > 1e-12 and (best is None or dec[i] > best[0]):
            best = (float(dec[i]), int(f), float(xs[i]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, rows: np.ndarray, params: ForestParams,
              rng: np.random.Generator) -> Tuple[Tree, np.ndarray]:
    """Grow one CART tree on ``rows``; returns the tree and its raw impurity decreases."""
    d = X.shape[1]
    k = params.k(d)
    feature, threshold, left, right, p1 = [], [], [], [], []
    importance = np.zeros(d)

    def new_node():
        for arr, val in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (p1, 0.0)):
            arr.append(val)
        return len(feature) - 1

    root = new_node()
    stack = [(root, rows, 0)]
    # depth-first, left child first, so node numbering is deterministic
    while stack:
        node, idx, depth = stack.pop()
        pos = float(y[idx].sum())
        p1[node] = pos / len(idx)
        if depth >= params.max_depth or pos == 0 or pos == len(idx) or len(idx) < 2 * params.min_samples_leaf:
            continue
        cand = np.sort(rng.choice(d, size=k, replace=False))
        split = _best_split(X, y, idx, cand, params.min_samples_leaf)
        if split is None:
            continue
        dec, f, t = split
        importance[f] += dec
        go_left = X[idx, f] <= t
        lo, hi = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, lo, hi
        stack.append((hi, idx[~go_left], depth + 1))
        stack.append((lo, idx[go_left], depth + 1))
    tree = Tree(np.array(feature, dtype=np.intp), np.array(threshold), np.array(left, dtype=np.intp),
                np.array(right, dtype=np.intp), np.array(p1))
    return tree, importance


@dataclass
class RandomForestModel:
    trees: List[Tree]
    n_features: int
    params: ForestParams
    seed: int
    feature_names: Tuple[str, ...]
    importance_mean: np.ndarray
    importance_std: np.ndarray
    oob_accuracy: Optional[float] = None
    # free-form provenance such as task and modality group
    meta: dict = field(default_factory=dict)

    def predict_proba(self, X) -> np.ndarray:
        """Mean positive-class leaf probability over trees, one value per row."""
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise ContractError(f"expected {self.n_features} features, got {X.shape[1]}")
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.int64)

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "params": asdict(self.params),
            "seed": self.seed,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "importance_mean": [float(x) for x in self.importance_mean],
            "importance_std": [float(x) for x in self.importance_std],
            "oob_accuracy": self.oob_accuracy,
            "meta": self.meta,
            "trees": [t.to_json() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def _as_matrix(X) -> np.ndarray:
    if hasattr(X, "values") and hasattr(X, "vendor_flag"):
        X = np.append(X.values, X.vendor_flag)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def fit_forest(X, y, params: ForestParams = ForestParams(), seed: int = 0,
               feature_names: Optional[Sequence[str]] = None) -> RandomForestModel:
    """Train a forest; tree ``t`` draws from a generator seeded with ``seed + t``."""
    X = _as_matrix(X)
    y = np.asarray(y)
    n, d = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(d))
    if len(names) != d:
        raise ContractError(f"{len(names)} feature names for {d} columns")
    if len(y) != n:
        raise ContractError(f"{n} rows but {len(y)} labels")
    if n < 2:
        raise TrainingError("need at least 2 rows")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be 0 or 1")
    y = y.astype(np.int64)
    bad = ~np.isfinite(X).all(axis=0)
    if bad.any():
        raise ValidationError(f"non-finite values in feature {names[int(np.flatnonzero(bad)[0])]!r}")
    if y.min() == y.max():
        raise TrainingError("training labels contain a single class")

    trees, imps = [], []
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n)
    for t in range(params.n_trees):
        rng = np.random.default_rng(seed + t)
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        tree, imp = grow_tree(X, y, rows, params, rng)
        trees.append(tree)
        s = imp.sum()
        imps.append(imp / s if s > 0 else imp)
        if params.bootstrap:
            out = np.ones(n, dtype=bool)
            out[rows] = False
            if out.any():
                oob_sum[out] += tree.predict(X[out])
                oob_cnt[out] += 1
    imps = np.array(imps)
    mean = imps.mean(axis=0)
    if mean.sum() > 0:
        mean = mean / mean.sum()
    oob = None
    if params.bootstrap and oob_cnt.any():
        seen = oob_cnt > 0
        pred = (oob_sum[seen] / oob_cnt[seen] > 0.5).astype(np.int64)
        oob = float(np.mean(pred == y[seen]))
    return RandomForestModel(trees, d, params, int(seed), names, mean, imps.std(axis=0), oob)


def predict_proba(model: RandomForestModel, x) -> np.ndarray:
    return model.predict_proba(x)


def feature_importance(model: RandomForestModel) -> List[Tuple[str, float, float]]:
    """``(name, mean, std)`` sorted by mean, ties in feature order."""
    order = sorted(range(model.n_features), key=lambda i: (-model.importance_mean[i], i))
    return [(model.feature_names[i], float(model.importance_mean[i]), float(model.importance_std[i]))
            for i in order]


def model_from_json(d: dict, expected_names: Optional[Sequence[str]] = None) -> RandomForestModel:
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ValidationError("not a forest model file")
    if d.get("version") != MODEL_VERSION:
        raise ValidationError(f"unsupported model version {d.get('version')!r}")
    try:
        params = ForestParams(**d["params"])
        n_features = int(d["n_features"])
        names = tuple(d["feature_names"])
        mean = np.asarray(d["importance_mean"], dtype=np.float64)
        std = np.asarray(d["importance_std"], dtype=np.float64)
        trees = [Tree.from_json(t, n_features) for t in d["trees"]]
        seed = int(d["seed"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model: {exc}") from exc
    if expected_names is not None and names != tuple(expected_names):
        raise ValidationError("model feature names do not match the canonical feature order")
    if len(names) != n_features or len(mean) != n_features or len(std) != n_features:
        raise ValidationError("feature count disagrees across model fields")
    if not trees:
        raise ValidationError("model has no trees")
    meta = d.get("meta", {})
    if not isinstance(meta, dict):
        raise ValidationError("model meta must be an object")
    return RandomForestModel(trees, n_features, params, seed, names, mean, std, d.get("oob_accuracy"), meta)


def save_model(model: RandomForestModel, path) -> None:
    from .nifti import atomic_write_bytes

    atomic_write_bytes(Path(path), (model.dumps() + "\n").encode())


def load_model(path, expected_names: Optional[Sequence[str]] = None) -> RandomForestModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_json(d, expected_names)


def _quotas(counts: Sequence[int], total: int) -> List[int]:
    """Largest-remainder apportionment of ``total`` over ``counts``; ties by order."""
    n = sum(counts)
    exact = [c * total / n for c in counts]
    base = [int(math.floor(e)) for e in exact]
    short = total - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def stratified_split(cases: Sequence[str], labels: Sequence, seed: int = 0,
                     val_fraction: float = 0.2) -> Tuple[List[str], List[str]]:
    """Case-level split keeping each label's share in both parts.

    The validation part has ``round(N * val_fraction)`` cases (half away
    from zero), apportioned over labels by largest remainder. Labels with
    fewer than 2 cases stay entirely in training, with a warning.
    """
    cases = list(cases)
    labels = list(labels)
    if len(cases) != len(labels):
        raise ContractError("cases and labels differ in length")
    if len(set(cases)) != len(cases):
        raise ContractError("case ids must be unique")
    if len(cases) < 5:
        raise DegenerateInputError("need at least 5 cases to split")
    classes = sorted(set(labels), key=str)
    members: Dict = {c: [cid for cid, lab in zip(cases, labels) if lab == c] for c in classes}
    small = [c for c in classes if len(members[c]) < 2]
    for c in small:
        warnings.warn(f"label {c!r} has {len(members[c])} case(s); kept in training only", stacklevel=2)
    splittable = [c for c in classes if c not in small]
    total_val = int(math.floor(len(cases) * val_fraction + 0.5))
    quotas = _quotas([len(members[c]) for c in splittable], total_val) if splittable else []
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in classes:
        ids = sorted(members[c])
        if c in small:
            train.extend(ids)
            continue
        q = min(quotas[splittable.index(c)], len(ids) - 1)
        perm = rng.permutation(len(ids))
        chosen = set(perm[:q].tolist())
        for i, cid in enumerate(ids):
            (val if i in chosen else train).append(cid)
    return sorted(train), sorted(val)
