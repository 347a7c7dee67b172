"""Per-patient symptom vectors and the case-control classifier bench.

Five feature classifiers (logistic regression, decision tree, random
forest, linear SVM, MLP) implemented from scratch on numpy, plus a hashed
bag-of-words logistic baseline over raw note text. Evaluation is
stratified k-fold CV reporting AUC-ROC / F1 / precision / recall as fold
means. Everything is deterministic for fixed seeds.
"""

from __future__ import annotations

import random
import re
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .extract import Detection
from .taxonomy import N_CATEGORIES, category_ids

MODEL_KINDS = ("logreg", "tree", "forest", "linear_svm", "mlp", "bow_logreg_baseline")

DEFAULT_HYPERPARAMS: dict[str, dict] = {
    "logreg": {"l2": 1e-2, "iterations": 500, "step": 0.1},
    "tree": {"max_depth": 6, "min_leaf": 5},
    "forest": {"n_trees": 100, "max_depth": 8, "min_leaf": 5},
    "linear_svm": {"l2": 1e-2, "epochs": 50},
    "mlp": {"hidden": 16, "epochs": 300, "step": 0.05, "init_scale": 0.5},
    "bow_logreg_baseline": {"l2": 1e-2, "iterations": 500, "step": 0.1, "n_bins": 4096},
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)
    seed: int = 7

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    def param(self, name: str):
        return self.hyperparams.get(name, DEFAULT_HYPERPARAMS[self.kind][name])


@dataclass(frozen=True)
class SymptomVector:
    patient_id: str
    values: tuple[float, ...]
    n_notes: int


@dataclass(frozen=True)
class BenchResult:
    kind: str
    auc_roc: float
    f1: float
    precision: float
    recall: float
    per_fold: tuple[dict, ...]
    seed: int


# ---------------------------------------------------------------------------
# Feature construction

def vectorize(
    detections: list[Detection], corpus: Corpus
) -> tuple[list[SymptomVector], list[str]]:
    """One 16-dim note-proportion vector per patient with >=1 note.

    backend_error detections count as negative. Returns (vectors, skipped
    patient ids).
    """
    cats = category_ids()
    pos: dict[str, np.ndarray] = {}
    by_patient = corpus.notes_by_patient()
    det_map = {(d.note_id, d.category_id): d for d in detections}
    vectors: list[SymptomVector] = []
    skipped: list[str] = []
    for pid, notes in by_patient.items():
        if not notes:
            skipped.append(pid)
            continue
        counts = np.zeros(N_CATEGORIES)
        for note in notes:
            for j, cid in enumerate(cats):
                d = det_map.get((note.note_id, cid))
                if d is not None and d.present and d.status != "backend_error":
                    counts[j] += 1
        vectors.append(
            SymptomVector(pid, tuple(counts / len(notes)), n_notes=len(notes))
        )
    return vectors, skipped


def filter_phq_window(corpus: Corpus, window_days: int = 14) -> Corpus:
    """Keep only notes within window_days of one of the patient's PHQ
    instances (questionnaire-anchored screening corpus)."""
    from .corpus import parse_phq

    phq_dates: dict[str, list] = {}
    for n in corpus.notes:
        if parse_phq(n.text):
            phq_dates.setdefault(n.patient_id, []).append(n.date)
    kept = [
        n
        for n in corpus.notes
        if any(abs((n.date - d).days) <= window_days for d in phq_dates.get(n.patient_id, []))
    ]
    kept_ids = {n.note_id for n in kept}
    out = Corpus(
        patients=dict(corpus.patients),
        notes=kept,
        gold=[g for g in corpus.gold if g.note_id in kept_ids],
    )
    return out


# ---------------------------------------------------------------------------
# AUC (Mann-Whitney; exact pairwise fraction, ties count one half)

def auc_roc(scores, labels) -> float:
    scores = list(scores)
    labels = list(labels)
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc requires both classes present")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    num2 = 0  # twice the pair-win count, so ties stay integral
    neg_below = 0
    i = 0
    while i < len(order):
        j = i
        group_pos = group_neg = 0
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            if labels[order[j]] == 1:
                group_pos += 1
            else:
                group_neg += 1
            j += 1
        num2 += group_pos * (2 * neg_below + group_neg)
        neg_below += group_neg
        i = j
    return num2 / (2 * n_pos * n_neg)


# ---------------------------------------------------------------------------
# Stratified k-fold

def kfold_split(patient_ids, labels, k: int, seed: int) -> list[list[str]]:
    """Deterministic stratified folds; per-fold class counts differ by <=1."""
    if k < 2:
        raise ValueError("k must be >= 2")
    pos = sorted(pid for pid, y in zip(patient_ids, labels) if y == 1)
    neg = sorted(pid for pid, y in zip(patient_ids, labels) if y != 1)
    if len(pos) < k or len(neg) < k:
        raise ValueError(f"need at least k={k} patients per class")
    rng = random.Random(seed)
    rng.shuffle(pos)
    rng.shuffle(neg)
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, pid in enumerate(pos):
        folds[i % k].append(pid)
    offset = len(pos) % k  # start negatives where positives left off, evening sizes
    for i, pid in enumerate(neg):
        folds[(i + offset) % k].append(pid)
    return folds


# ---------------------------------------------------------------------------
# Logistic regression (full-batch gradient descent)

def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def logreg_loss(params: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    w, b = params[:-1], params[-1]
    p = _sigmoid(X @ w + b)
    eps = 1e-12
    ll = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    return float(ll + 0.5 * l2 * np.dot(w, w))


def logreg_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    w, b = params[:-1], params[-1]
    p = _sigmoid(X @ w + b)
    gw = X.T @ (p - y) / len(y) + l2 * w
    gb = float(np.mean(p - y))
    return np.concatenate([gw, [gb]])


class _ConstantModel:
    def __init__(self, value: float):
        self.value = value

    def score(self, X) -> np.ndarray:
        return np.full(len(X), self.value)

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(int)


class LogisticRegressionModel:
    def __init__(self, l2: float = 1e-2, iterations: int = 500, step: float = 0.1):
        self.l2, self.iterations, self.step = l2, iterations, step
        self.params: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray):
        params = np.zeros(X.shape[1] + 1)
        for _ in range(self.iterations):
            params = params - self.step * logreg_grad(params, X, y, self.l2)
        self.params = params
        return self

    def score(self, X) -> np.ndarray:
        w, b = self.params[:-1], self.params[-1]
        return _sigmoid(np.asarray(X) @ w + b)

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# CART decision tree (Gini), random forest

class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, value: float, feature=None, threshold=None, left=None, right=None):
        self.value = value  # positive fraction in this node
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right


def _best_split(X, y, features, min_leaf):
    """Lowest weighted Gini; ties resolved to lowest feature index, then
    lowest threshold (ensured by scan order + strict improvement)."""
    n = len(y)
    best = None  # (impurity, feature, threshold)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        pos_prefix = np.cumsum(ys)
        total_pos = pos_prefix[-1]
        for i in range(min_leaf, n - min_leaf + 1):
            if i < n and xs[i - 1] == xs[i]:
                continue
            if i == n:
                continue
            lp = pos_prefix[i - 1]
            rp = total_pos - lp
            nl, nr = i, n - i
            gl = 1 - (lp / nl) ** 2 - ((nl - lp) / nl) ** 2
            gr = 1 - (rp / nr) ** 2 - ((nr - rp) / nr) ** 2
            imp = (nl * gl + nr * gr) / n
            thr = (xs[i - 1] + xs[i]) / 2
            if best is None or imp < best[0] - 1e-15:
                best = (imp, f, thr)
    return best


def _grow_tree(X, y, depth, max_depth, min_leaf, rng, n_sub) -> _TreeNode:
    value = float(np.mean(y)) if len(y) else 0.5
    if depth >= max_depth or len(y) < 2 * min_leaf or value in (0.0, 1.0):
        return _TreeNode(value)
    d = X.shape[1]
    if n_sub is not None and n_sub < d:
        features = sorted(rng.choice(d, size=n_sub, replace=False).tolist())
    else:
        features = range(d)
    split = _best_split(X, y, features, min_leaf)
    if split is None:
        return _TreeNode(value)
    _, f, thr = split
    mask = X[:, f] <= thr
    left = _grow_tree(X[mask], y[mask], depth + 1, max_depth, min_leaf, rng, n_sub)
    right = _grow_tree(X[~mask], y[~mask], depth + 1, max_depth, min_leaf, rng, n_sub)
    return _TreeNode(value, feature=f, threshold=thr, left=left, right=right)


def _tree_score_one(node: _TreeNode, x) -> float:
    while node.feature is not None:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


class DecisionTreeModel:
    def __init__(self, max_depth: int = 6, min_leaf: int = 5, seed: int = 7):
        self.max_depth, self.min_leaf, self.seed = max_depth, min_leaf, seed
        self.root: _TreeNode | None = None

    def fit(self, X: np.ndarray, y: np.ndarray):
        rng = np.random.default_rng(self.seed)
        self.root = _grow_tree(X, y, 0, self.max_depth, self.min_leaf, rng, None)
        return self

    def score(self, X) -> np.ndarray:
        return np.array([_tree_score_one(self.root, x) for x in np.asarray(X)])

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(int)


class RandomForestModel:
    def __init__(self, n_trees: int = 100, max_depth: int = 8, min_leaf: int = 5, seed: int = 7):
        self.n_trees, self.max_depth, self.min_leaf, self.seed = n_trees, max_depth, min_leaf, seed
        self.trees: list[_TreeNode] = []

    def fit(self, X: np.ndarray, y: np.ndarray):
        n, d = X.shape
        n_sub = max(1, int(np.sqrt(d)))
        self.trees = []
        for t in range(self.n_trees):
            rng = np.random.default_rng([self.seed, t])
            idx = rng.integers(0, n, n)
            self.trees.append(
                _grow_tree(X[idx], y[idx], 0, self.max_depth, self.min_leaf, rng, n_sub)
            )
        return self

    def score(self, X) -> np.ndarray:
        X = np.asarray(X)
        return np.mean(
            [[_tree_score_one(t, x) for x in X] for t in self.trees], axis=0
        )

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# Linear SVM (hinge + L2 subgradient descent, logistic-calibrated margins)

class LinearSVMModel:
    def __init__(self, l2: float = 1e-2, epochs: int = 50, seed: int = 7):
        self.l2, self.epochs, self.seed = l2, epochs, seed
        self.w: np.ndarray | None = None
        self.b = 0.0
        self._cal: LogisticRegressionModel | None = None

    def fit(self, X: np.ndarray, y: np.ndarray):
        n, d = X.shape
        ys = np.where(y == 1, 1.0, -1.0)
        rng = np.random.default_rng(self.seed)
        w = np.zeros(d)
        b = 0.0
        t = 0
        for _ in range(self.epochs):
            for i in rng.permutation(n):
                t += 1
                lr = 1.0 / (self.l2 * t)
                if ys[i] * (X[i] @ w + b) < 1:
                    w = (1 - lr * self.l2) * w + lr * ys[i] * X[i]
                    b += lr * ys[i]
                else:
                    w = (1 - lr * self.l2) * w
        self.w, self.b = w, b
        margins = (X @ w + b).reshape(-1, 1)
        self._cal = LogisticRegressionModel(l2=0.0, iterations=500, step=0.5).fit(margins, y)
        return self

    def score(self, X) -> np.ndarray:
        margins = (np.asarray(X) @ self.w + self.b).reshape(-1, 1)
        return self._cal.score(margins)

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# MLP (one hidden tanh layer, sigmoid output, full-batch)

def _mlp_unpack(params: np.ndarray, d: int, h: int):
    i = 0
    W1 = params[i : i + d * h].reshape(d, h); i += d * h
    b1 = params[i : i + h]; i += h
    w2 = params[i : i + h]; i += h
    b2 = params[i]
    return W1, b1, w2, b2


def mlp_loss(params: np.ndarray, X: np.ndarray, y: np.ndarray, hidden: int) -> float:
    W1, b1, w2, b2 = _mlp_unpack(params, X.shape[1], hidden)
    a1 = np.tanh(X @ W1 + b1)
    p = _sigmoid(a1 @ w2 + b2)
    eps = 1e-12
    return float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))


def mlp_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, hidden: int) -> np.ndarray:
    n, d = X.shape
    W1, b1, w2, b2 = _mlp_unpack(params, d, hidden)
    z1 = X @ W1 + b1
    a1 = np.tanh(z1)
    p = _sigmoid(a1 @ w2 + b2)
    dz2 = (p - y) / n
    gw2 = a1.T @ dz2
    gb2 = float(np.sum(dz2))
    da1 = np.outer(dz2, w2)
    dz1 = da1 * (1 - a1**2)
    gW1 = X.T @ dz1
    gb1 = dz1.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])


class MLPModel:
    def __init__(
        self, hidden: int = 16, epochs: int = 300, step: float = 0.05,
        init_scale: float = 0.5, seed: int = 7,
    ):
        self.hidden, self.epochs, self.step = hidden, epochs, step
        self.init_scale, self.seed = init_scale, seed
        self.params: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray):
        d = X.shape[1]
        n_params = d * self.hidden + self.hidden + self.hidden + 1
        rng = np.random.default_rng(self.seed)
        params = rng.uniform(-self.init_scale, self.init_scale, n_params)
        for _ in range(self.epochs):
            params = params - self.step * mlp_grad(params, X, y, self.hidden)
        self.params = params
        return self

    def score(self, X) -> np.ndarray:
        X = np.asarray(X)
        W1, b1, w2, b2 = _mlp_unpack(self.params, X.shape[1], self.hidden)
        return _sigmoid(np.tanh(X @ W1 + b1) @ w2 + b2)

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# Training entry point

def train(spec: ModelSpec, X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0:
        raise ValueError("empty training set")
    if len(np.unique(y)) < 2:
        warnings.warn("single-class training labels; returning constant model")
        return _ConstantModel(float(y[0]) if len(y) else 0.5)
    if spec.kind in ("logreg", "bow_logreg_baseline"):
        model = LogisticRegressionModel(
            l2=spec.param("l2"), iterations=spec.param("iterations"), step=spec.param("step")
        )
    elif spec.kind == "tree":
        model = DecisionTreeModel(
            max_depth=spec.param("max_depth"), min_leaf=spec.param("min_leaf"), seed=spec.seed
        )
    elif spec.kind == "forest":
        model = RandomForestModel(
            n_trees=spec.param("n_trees"), max_depth=spec.param("max_depth"),
            min_leaf=spec.param("min_leaf"), seed=spec.seed,
        )
    elif spec.kind == "linear_svm":
        model = LinearSVMModel(l2=spec.param("l2"), epochs=spec.param("epochs"), seed=spec.seed)
    elif spec.kind == "mlp":
        model = MLPModel(
            hidden=spec.param("hidden"), epochs=spec.param("epochs"), step=spec.param("step"),
            init_scale=spec.param("init_scale"), seed=spec.seed,
        )
    else:  # pragma: no cover
        raise ValueError(spec.kind)
    return model.fit(X, y)


# ---------------------------------------------------------------------------
# Cross-validated bench

def _binary_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, float]:
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def cross_validate(spec: ModelSpec, ids, X, y, k: int, seed: int) -> BenchResult:
    ids = list(ids)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    index = {pid: i for i, pid in enumerate(ids)}
    folds = kfold_split(ids, y, k, seed)
    per_fold = []
    for f, fold_ids in enumerate(folds):
        test_idx = np.array([index[p] for p in fold_ids])
        train_mask = np.ones(len(ids), dtype=bool)
        train_mask[test_idx] = False
        model = train(spec, X[train_mask], y[train_mask])
        scores = model.score(X[test_idx])
        preds = (scores >= 0.5).astype(int)
        precision, recall, f1 = _binary_metrics(y[test_idx], preds)
        per_fold.append(
            {
                "fold": f,
                "auc_roc": auc_roc(scores.tolist(), y[test_idx].tolist()),
                "precision": precision, "recall": recall, "f1": f1,
                "n_test": len(test_idx),
            }
        )
    mean = lambda key: float(np.mean([row[key] for row in per_fold]))  # noqa: E731
    return BenchResult(
        kind=spec.kind,
        auc_roc=mean("auc_roc"), f1=mean("f1"),
        precision=mean("precision"), recall=mean("recall"),
        per_fold=tuple(per_fold), seed=spec.seed,
    )


def run_bench(
    specs: list[ModelSpec], vectors: list[SymptomVector], labels: dict[str, int],
    k: int = 5, seed: int = 7,
) -> list[BenchResult]:
    ids = [v.patient_id for v in vectors]
    X = np.array([v.values for v in vectors], dtype=float)
    y = np.array([labels[pid] for pid in ids], dtype=int)
    return [cross_validate(spec, ids, X, y, k, seed) for spec in specs]


# ---------------------------------------------------------------------------
# Bag-of-words text baseline

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def bow_features(corpus: Corpus, n_bins: int = 4096) -> tuple[list[str], np.ndarray]:
    """Per patient: concatenate notes, tokenize, hash into term-frequency bins."""
    by_patient = corpus.notes_by_patient()
    ids = [pid for pid, notes in by_patient.items() if notes]
    X = np.zeros((len(ids), n_bins))
    for i, pid in enumerate(ids):
        text = " ".join(n.text for n in by_patient[pid]).lower()
        tokens = _TOKEN_RE.findall(text)
        for tok in tokens:
            X[i, zlib.crc32(tok.encode()) % n_bins] += 1
        if tokens:
            X[i] /= len(tokens)
    return ids, X


def bow_baseline(corpus: Corpus, k: int = 5, seed: int = 7, spec: ModelSpec | None = None) -> BenchResult:
    spec = spec or ModelSpec(kind="bow_logreg_baseline", seed=seed)
    ids, X = bow_features(corpus, n_bins=spec.param("n_bins"))
    y = np.array([int(corpus.patients[pid].is_case) for pid in ids])
    return cross_validate(spec, ids, X, y, k, seed)
