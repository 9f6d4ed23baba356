"""Fused feature vectors, a CART random forest, and classification metrics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, FormatError
from .ingest import GENDERS, STAGES, PatientRecord, derive_adjuvant_flag

FEATURE_NAMES = (
    "stage_ordinal", "gender", "age", "adjuvant",
    "diameter_mm", "mean_attenuation_hu", "perimeter_mm", "network_score",
)
CLINICAL_FEATURES = FEATURE_NAMES[:4]
STAGE_ORDINAL = {s: i + 1 for i, s in enumerate(STAGES)}
STAGE_GROUPS = {"I": ("IA", "IB"), "II": ("IIA", "IIB"), "III": ("IIIA", "IIIB"), "IV": ("IV",)}
CUTOFF = 0.5

DEFAULT_GRID = ((100, 200, 500), (3, 5, 8, None))


@dataclass(frozen=True)
class FeatureVector:
    stage_ordinal: int
    gender: int
    age: float
    adjuvant: int
    diameter_mm: float
    mean_attenuation_hu: float
    perimeter_mm: float
    network_score: float

    def __post_init__(self):
        for name in FEATURE_NAMES:
            v = getattr(self, name)
            if v is None or not math.isfinite(v):
                raise ContractError(f"FeatureVector.{name} is absent or non-finite: {v!r}")
        if not 0.0 <= self.network_score <= 1.0:
            raise ContractError(f"network_score {self.network_score} outside [0, 1]")

    def as_array(self, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        return np.array([float(getattr(self, n)) for n in names])


def build_feature_vector(p: PatientRecord, g, s: float) -> FeatureVector:
    """Clinical entries from the record, geometry from the predicted mask, network score ``s``."""
    if g is None or getattr(g, "empty", False):
        raise ContractError(f"patient {p.patient_id}: geometric features are absent (empty predicted mask)")
    if s is None:
        raise ContractError(f"patient {p.patient_id}: network score is absent")
    if p.age is None:
        raise ContractError(f"patient {p.patient_id}: age is absent")
    return FeatureVector(
        stage_ordinal=STAGE_ORDINAL[p.stage],
        gender=GENDERS.index(p.gender),
        age=float(p.age),
        adjuvant=int(derive_adjuvant_flag(p)),
        diameter_mm=float(g.diameter_mm),
        mean_attenuation_hu=float(g.mean_attenuation_hu),
        perimeter_mm=float(g.perimeter_mm),
        network_score=float(s),
    )


def feature_matrix(vectors: Sequence[FeatureVector], names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    return np.array([v.as_array(names) for v in vectors], dtype=np.float64).reshape(len(vectors), len(names))


# ---------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    """Flat node tables; leaves have feature -1. ``value`` is the positive-class frequency."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64, go left when x <= threshold
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def _best_split(X, y, idx, features):
    """Lowest weighted child impurity over ``features`` (in ascending order).

    Returns (impurity_sum, feature, threshold) or None when no feature has
    two distinct values in the node. ``impurity_sum`` is the count-weighted
    Gini of both children, so ties are compared on one scale.
    """
    n = len(idx)
    total_pos = float(y[idx].sum())
    best = None
    for f in sorted(features):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        cut = np.nonzero(xs[1:] > xs[:-1])[0]
        if len(cut) == 0:
            continue
        cum = np.cumsum(y[idx][order])[cut]
        nl = cut + 1.0
        nr = n - nl
        pr = total_pos - cum
        imp = (nl - (cum**2 + (nl - cum) ** 2) / nl) + (nr - (pr**2 + (nr - pr) ** 2) / nr)
        j = int(np.argmin(imp))
        if best is None or imp[j] < best[0] - 1e-12 * n:
            lo, hi = xs[cut[j]], xs[cut[j] + 1]
            thr = 0.5 * (lo + hi)
            if thr >= hi:  # adjacent floats: the midpoint rounds up
                thr = lo
            best = (float(imp[j]), f, float(thr))
    return best


def fit_tree(X, y, max_depth=None, max_features=None, bootstrap=True, seed=0) -> Tree:
    """CART with Gini impurity.

    At each node ``max_features`` features are sampled without replacement;
    if none of them can split the node, the remaining ones are tried. An
    impure node is split even at zero impurity decrease, so an unbounded
    tree separates any consistent dataset.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    rng = np.random.default_rng(seed)
    sample = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    m = p if max_features is None else min(p, max_features)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(sample), sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        pos = y[idx].sum()
        if pos == 0 or pos == len(idx) or (max_depth is not None and depth >= max_depth):
            continue
        drawn = rng.choice(p, size=m, replace=False) if m < p else np.arange(p)
        split = _best_split(X, y, idx, drawn)
        if split is None and m < p:
            split = _best_split(X, y, idx, np.setdiff1d(np.arange(p), drawn))
        if split is None:
            continue
        _, f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int32),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(value, dtype=np.float64),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# forest


def default_max_features(n_features: int) -> int:
    """Features tried per split: ceil(sqrt(p)), which is 3 for the 8 fused features."""
    return max(1, math.ceil(math.sqrt(n_features)))


def tree_seed(seed: int, index: int) -> int:
    """Per-tree seed; tree i does not depend on how many trees follow it."""
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1, np.uint64)[0])


@dataclass
class ForestModel:
    trees: list[Tree]
    n_estimators: int
    max_depth: int | None
    n_features: int
    feature_names: tuple[str, ...] = FEATURE_NAMES
    seed: int = 0

    @property
    def bootstrap_seeds(self) -> list[int]:
        return [t.seed for t in self.trees]

    def truncated(self, n_estimators: int) -> "ForestModel":
        return ForestModel(self.trees[:n_estimators], n_estimators, self.max_depth, self.n_features, self.feature_names, self.seed)


def _check_labels(y):
    y = np.asarray(y)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be a 1-D array of 0/1")
    if y.min() == y.max():
        raise ContractError("fit_forest needs both classes present")
    return y.astype(np.float64)


def fit_forest(
    X,
    y,
    n_estimators: int = 100,
    max_depth: int | None = None,
    seed: int = 0,
    max_features: int | str | None = "sqrt",
    bootstrap: bool = True,
    feature_names: Sequence[str] | None = None,
) -> ForestModel:
    """Bagged CART trees. ``X`` is a feature matrix or a list of FeatureVector."""
    if len(X) and isinstance(X[0], FeatureVector):
        X = feature_matrix(X, feature_names or FEATURE_NAMES)
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractError(f"feature matrix {X.shape} does not match {len(y)} labels")
    if n_estimators < 1:
        raise ContractError(f"n_estimators must be >= 1, got {n_estimators}")
    if max_features == "sqrt":
        max_features = default_max_features(X.shape[1])
    names = tuple(feature_names) if feature_names is not None else (
        FEATURE_NAMES if X.shape[1] == len(FEATURE_NAMES) else tuple(f"f{i}" for i in range(X.shape[1]))
    )
    trees = [
        fit_tree(X, y, max_depth, max_features, bootstrap, tree_seed(seed, i))
        for i in range(n_estimators)
    ]
    return ForestModel(trees, n_estimators, max_depth, X.shape[1], names, seed)


def predict_proba(model: ForestModel, X) -> np.ndarray | float:
    """Mean leaf positive-class frequency over trees; a scalar for a single FeatureVector."""
    if isinstance(X, FeatureVector):
        return float(predict_proba(model, X.as_array(model.feature_names)[None])[0])
    if len(X) and isinstance(X[0], FeatureVector):
        X = feature_matrix(X, model.feature_names)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ContractError(f"expected (n, {model.n_features}) features, got {X.shape}")
    return np.mean([t.predict(X) for t in model.trees], axis=0)


def predict_label(model: ForestModel, X) -> np.ndarray | int:
    p = predict_proba(model, X)
    return (np.asarray(p) >= CUTOFF).astype(int) if np.ndim(p) else int(p >= CUTOFF)


# ---------------------------------------------------------------------------
# cross-validation


def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Fold index per sample, dealt round-robin within each shuffled class."""
    y = np.asarray(y)
    assignment = np.empty(len(y), dtype=int)
    rng = np.random.default_rng(seed)
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        members = members[rng.permutation(len(members))]
        assignment[members] = np.arange(len(members)) % folds
    return assignment


@dataclass
class CvResult:
    best: tuple[int, int | None]
    scores: dict[tuple[int, int | None], float]

    @property
    def n_estimators(self) -> int:
        return self.best[0]

    @property
    def max_depth(self) -> int | None:
        return self.best[1]


def _size_key(point):
    n, d = point
    return (n, math.inf if d is None else d)


def cross_validate(X, y, grid=DEFAULT_GRID, folds: int = 5, seed: int = 0, max_features="sqrt") -> CvResult:
    """Grid point with the highest mean validation AUC; ties go to fewer trees, then shallower.

    Per-tree seeds do not depend on forest size, so a forest of n trees is
    the first n trees of the largest one and is scored from it directly.
    """
    if len(X) and isinstance(X[0], FeatureVector):
        X = feature_matrix(X)
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y)
    if folds < 2:
        raise ContractError(f"cross_validate needs folds >= 2, got {folds}")
    sizes, depths = sorted(set(grid[0])), list(grid[1])
    fold_of = stratified_folds(y, folds, seed)
    for k in range(folds):
        held = y[fold_of == k]
        if len(held) == 0 or held.min() == held.max() or y[fold_of != k].min() == y[fold_of != k].max():
            raise ContractError(f"degenerate fold {k}: both classes are needed in every fold")
    totals = {pt: 0.0 for pt in product(sizes, depths)}
    for k in range(folds):
        tr, va = fold_of != k, fold_of == k
        for depth in depths:
            forest = fit_forest(X[tr], y[tr], max(sizes), depth, seed + k, max_features)
            per_tree = np.array([t.predict(X[va]) for t in forest.trees])
            for n in sizes:
                totals[(n, depth)] += roc_auc(per_tree[:n].mean(axis=0), y[va])
    scores = {pt: s / folds for pt, s in totals.items()}
    best = None
    for pt in sorted(scores, key=_size_key):
        if best is None or scores[pt] > scores[best]:
            best = pt
    return CvResult(best, scores)


# ---------------------------------------------------------------------------
# metrics


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic P(s+ > s-) + 0.5 P(tie), from average ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"roc_auc: {len(scores)} scores for {len(labels)} labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def of(cls, pred, truth) -> "Confusion":
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        return cls(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def _ratio(a, b):
        return a / b if b else None

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.n)

    @property
    def recall(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self):
        return self._ratio(self.tp, self.tp + self.fp)


@dataclass
class GroupMetrics:
    confusion: Confusion
    auc: float | None

    @property
    def accuracy(self):
        return self.confusion.accuracy

    @property
    def recall(self):
        return self.confusion.recall

    @property
    def precision(self):
        return self.confusion.precision


@dataclass
class ClassificationMetrics:
    """Overall and per-stage-group metrics; ``None`` marks an undefined (0/0) value."""

    overall: GroupMetrics
    groups: dict[str, GroupMetrics] = field(default_factory=dict)

    accuracy = property(lambda self: self.overall.accuracy)
    auc = property(lambda self: self.overall.auc)
    recall = property(lambda self: self.overall.recall)
    precision = property(lambda self: self.overall.precision)

    def _group(self, name, attr):
        g = self.groups.get(name)
        return getattr(g, attr) if g is not None else None

    @property
    def stage_i_accuracy(self):
        return self._group("I", "accuracy")

    @property
    def stage_i_recall(self):
        return self._group("I", "recall")

    @property
    def stage_ii_accuracy(self):
        return self._group("II", "accuracy")

    @property
    def stage_ii_precision(self):
        return self._group("II", "precision")


def stage_group(stage: str) -> str:
    for name, members in STAGE_GROUPS.items():
        if stage in members:
            return name
    raise ContractError(f"unknown stage {stage!r}")


def _auc_or_none(scores, labels):
    labels = np.asarray(labels)
    if len(labels) == 0 or labels.min() == labels.max():
        return None
    return roc_auc(scores, labels)


def stage_subgroup_metrics(preds, labels, stages) -> ClassificationMetrics:
    """Metrics from probabilities (or hard 0/1 predictions) cut at 0.5."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if not (len(preds) == len(labels) == len(stages)):
        raise ContractError(f"length mismatch: {len(preds)} preds, {len(labels)} labels, {len(stages)} stages")
    hard = preds >= CUTOFF
    overall = GroupMetrics(Confusion.of(hard, labels), _auc_or_none(preds, labels))
    group_of = np.array([stage_group(s) for s in stages])
    groups = {}
    for name in STAGE_GROUPS:
        sel = group_of == name
        groups[name] = GroupMetrics(Confusion.of(hard[sel], labels[sel]), _auc_or_none(preds[sel], labels[sel]))
    return ClassificationMetrics(overall, groups)


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


def overall_table(rows: Mapping[str, ClassificationMetrics]) -> str:
    """Model,Accuracy,AUC,Recall,Precision per model row."""
    lines = ["Model,Accuracy,AUC,Recall,Precision"]
    for name, m in rows.items():
        lines.append(",".join([name, _fmt(m.accuracy), _fmt(m.auc), _fmt(m.recall), _fmt(m.precision)]))
    return "\n".join(lines) + "\n"


def subgroup_table(rows: Mapping[str, ClassificationMetrics]) -> str:
    """Model,Stage I Accuracy,Stage I Recall,Stage II Accuracy,Stage II Precision per model row."""
    lines = ["Model,Stage I Accuracy,Stage I Recall,Stage II Accuracy,Stage II Precision"]
    for name, m in rows.items():
        vals = [m.stage_i_accuracy, m.stage_i_recall, m.stage_ii_accuracy, m.stage_ii_precision]
        lines.append(",".join([name] + [_fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# persistence

MAGIC = b"LRRF"
VERSION = 1
_HEAD = struct.Struct("<4sIIiIq")  # magic, version, n_estimators, max_depth (-1 = none), n_features, seed
_TREE = struct.Struct("<QI")  # bootstrap seed, node count


def encode_forest(model: ForestModel) -> bytes:
    names = "\n".join(model.feature_names).encode()
    out = [
        _HEAD.pack(MAGIC, VERSION, model.n_estimators, -1 if model.max_depth is None else model.max_depth, model.n_features, model.seed),
        struct.pack("<I", len(names)),
        names,
    ]
    for t in model.trees:
        out.append(_TREE.pack(t.seed, t.n_nodes))
        out.append(t.feature.astype("<i4").tobytes())
        out.append(t.threshold.astype("<f8").tobytes())
        out.append(t.left.astype("<i4").tobytes())
        out.append(t.right.astype("<i4").tobytes())
        out.append(t.value.astype("<f8").tobytes())
    return b"".join(out)


def decode_forest(data: bytes) -> ForestModel:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"forest model truncated at byte {pos} (need {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic, version, n_est, depth, n_feat, seed = _HEAD.unpack(take(_HEAD.size))
    if magic != MAGIC:
        raise FormatError(f"not a forest model (magic {bytes(magic)!r})")
    if version != VERSION:
        raise FormatError(f"unsupported forest model version {version}")
    (name_len,) = struct.unpack("<I", take(4))
    names = tuple(bytes(take(name_len)).decode().split("\n")) if name_len else ()
    trees = []
    for _ in range(n_est):
        tseed, n = _TREE.unpack(take(_TREE.size))
        arrays = [np.frombuffer(take(n * np.dtype(dt).itemsize), dtype=dt).astype(dt[1:]) for dt in ("<i4", "<f8", "<i4", "<i4", "<f8")]
        trees.append(Tree(*arrays, seed=int(tseed)))
    if pos != len(view):
        raise FormatError(f"forest model has {len(view) - pos} trailing bytes")
    return ForestModel(trees, n_est, None if depth < 0 else depth, n_feat, names, seed)


def save_forest(model: ForestModel, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_forest(model))
    return path


def load_forest(path) -> ForestModel:
    return decode_forest(Path(path).read_bytes())


def iter_rows(metrics: ClassificationMetrics) -> Iterable[tuple[str, object]]:
    """Flat (name, value) pairs of every metric, for logs."""
    yield "accuracy", metrics.accuracy
    yield "auc", metrics.auc
    yield "recall", metrics.recall
    yield "precision", metrics.precision
    for name, g in metrics.groups.items():
        yield f"stage_{name}_n", g.confusion.n
        yield f"stage_{name}_accuracy", g.accuracy
        yield f"stage_{name}_recall", g.recall
        yield f"stage_{name}_precision", g.precision
