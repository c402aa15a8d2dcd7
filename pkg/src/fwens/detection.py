"""Hallucination labels and binary classifiers over uncertainty features.

The four classifiers are self-contained numpy implementations that follow
the scikit-learn estimator protocol (``fit``/``predict``/``get_params``),
so they drop into pipelines and ``cross_val_score`` unchanged.
Label 1 means hallucinated, 0 means clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigError, DataError
from .tasks import IDK, LABELS, MCQRecord, QARecord

HALLUCINATED, CLEAN = 1, 0
KINDS = ("logistic_regression", "decision_tree", "random_forest", "knn")


# -- labelling ----------------------------------------------------------------


def label_faithfulness(record: QARecord, answer: Sequence[str]) -> int | None:
    """Clean iff an unanswerable question was answered with IDK.

    Answerable records are not part of this experiment and give ``None``.
    """
    if record.answerable:
        return None
    return CLEAN if list(answer) == [IDK] else HALLUCINATED


def label_factual(record: MCQRecord, chosen: str | Sequence[str]) -> int:
    """Clean iff the chosen option label is the correct one."""
    if not isinstance(chosen, str):
        chosen = chosen[0] if len(chosen) == 1 else " ".join(chosen)
    if chosen not in LABELS:
        return HALLUCINATED
    return CLEAN if chosen == record.correct else HALLUCINATED


@dataclass
class LabeledExample:
    features: np.ndarray
    label: int
    experiment: str
    id: int = 0
    entropies: list[float] = field(default_factory=list)


def split_80_20(examples: Sequence, seed: int = 42) -> tuple[list, list]:
    """Seeded random permutation; the first 80% train, the rest test."""
    n = len(examples)
    if n < 10:
        raise DataError(f"need at least 10 examples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(0.8 * n))
    return [examples[i] for i in order[:cut]], [examples[i] for i in order[cut:]]


def _check_binary(y: np.ndarray) -> np.ndarray:
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("training set contains a single class")
    return classes


# -- logistic regression -----------------------------------------------------


class LogisticRegressionClassifier(ClassifierMixin, BaseEstimator):
    """L2-regularised logistic regression fitted by Newton's method.

    Minimises ``0.5 * ||w||^2 / C + sum(logloss)`` (intercept unpenalised);
    ``C=None`` drops the penalty.
    """

    def __init__(self, C: float | None = 1.0, tol: float = 1e-6, max_iter: int = 1000):
        self.C = C
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = _check_binary(y)
        t = (y == self.classes_[1]).astype(np.float64)
        n, d = X.shape
        Xb = np.hstack([X, np.ones((n, 1))])
        reg = np.zeros(d + 1)
        if self.C is not None:
            reg[:d] = 1.0 / self.C
        w = np.zeros(d + 1)
        self.n_iter_ = 0
        for it in range(self.max_iter):
            p = _sigmoid(Xb @ w)
            grad = Xb.T @ (p - t) + reg * w
            if np.linalg.norm(grad) < self.tol:
                break
            hess = (Xb * (p * (1 - p))[:, None]).T @ Xb + np.diag(reg) + 1e-12 * np.eye(d + 1)
            step = np.linalg.solve(hess, grad)
            # backtracking keeps the (convex) objective decreasing
            f0 = self._objective(Xb, t, w, reg)
            alpha = 1.0
            while alpha > 1e-8 and self._objective(Xb, t, w - alpha * step, reg) > f0:
                alpha *= 0.5
            w = w - alpha * step
            self.n_iter_ = it + 1
        self.coef_ = w[:d][None, :]
        self.intercept_ = w[d:]
        return self

    @staticmethod
    def _objective(Xb, t, w, reg):
        z = Xb @ w
        return float(np.sum(np.logaddexp(0.0, z) - t * z) + 0.5 * np.sum(reg * w * w))

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_[0] + self.intercept_[0]

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


# -- CART --------------------------------------------------------------------


def _best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray, n_classes: int):
    """(gini decrease, feature, threshold) of the best split, or None."""
    n = y.size
    parent_counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    parent = 1.0 - np.sum((parent_counts / n) ** 2)
    best = None
    onehot = np.eye(n_classes)[y]
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = np.flatnonzero(xs[1:] > xs[:-1])
        if valid.size == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[valid]
        nl = (valid + 1).astype(np.float64)
        nr = n - nl
        right = parent_counts - left
        gini_l = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
        gini_r = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
        gain = parent - (nl * gini_l + nr * gini_r) / n
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0] + 1e-12:
            i = valid[k]
            best = (float(gain[k]), int(f), float((xs[i] + xs[i + 1]) / 2.0))
    return best


class DecisionTreeClassifier(ClassifierMixin, BaseEstimator):
    """CART with Gini impurity.

    Nodes split while impure and a separating threshold exists, even when
    the best split does not lower the impurity (XOR-like layouts).
    """

    def __init__(self, max_depth: int | None = None, min_samples_leaf: int = 1,
                 max_features: int | str | None = None, random_state: int | None = None):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.random_state = random_state

    def _n_features_per_split(self, d: int) -> int:
        mf = self.max_features
        if mf is None:
            return d
        if mf == "sqrt":
            return max(1, int(np.sqrt(d)))
        if isinstance(mf, (int, np.integer)) and 1 <= mf <= d:
            return int(mf)
        raise ConfigError(f"invalid max_features {mf!r}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = _check_binary(y)
        return self._fit_encoded(X, np.searchsorted(self.classes_, y), self.classes_.size)

    def _fit_encoded(self, X, yi, n_classes):
        rng = np.random.default_rng(self.random_state)
        n, d = X.shape
        self.n_features_in_ = d
        k = self._n_features_per_split(d)
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(idx):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(np.bincount(yi[idx], minlength=n_classes) / idx.size)
            return len(feature) - 1

        stack = [(new_node(np.arange(n)), np.arange(n), 0)]
        while stack:
            node, idx, depth = stack.pop()
            if np.all(yi[idx] == yi[idx[0]]):
                continue
            if self.max_depth is not None and depth >= self.max_depth:
                continue
            if idx.size < 2 * self.min_samples_leaf:
                continue
            feats = np.arange(d) if k == d else np.sort(rng.choice(d, size=k, replace=False))
            split = _best_split(X[idx], yi[idx], feats, n_classes)
            if split is None:
                continue
            _, f, thr = split
            mask = X[idx, f] <= thr
            li, ri = idx[mask], idx[~mask]
            if li.size < self.min_samples_leaf or ri.size < self.min_samples_leaf:
                continue
            feature[node], threshold[node] = f, thr
            left[node] = new_node(li)
            right[node] = new_node(ri)
            stack.append((right[node], ri, depth + 1))
            stack.append((left[node], li, depth + 1))
        self.feature_ = np.array(feature)
        self.threshold_ = np.array(threshold)
        self.left_ = np.array(left)
        self.right_ = np.array(right)
        self.value_ = np.array(value)
        if not hasattr(self, "classes_"):
            self.classes_ = np.arange(n_classes)
        return self

    @property
    def node_count(self) -> int:
        return int(self.feature_.size)

    def apply(self, X) -> np.ndarray:
        check_is_fitted(self, "feature_")
        X = check_array(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=int)
        while True:
            f = self.feature_[node]
            inner = f >= 0
            if not inner.any():
                return node
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold_[node[rows]]
            node[rows] = np.where(go_left, self.left_[node[rows]], self.right_[node[rows]])

    def predict_proba(self, X):
        return self.value_[self.apply(X)]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class RandomForestClassifier(ClassifierMixin, BaseEstimator):
    """Bootstrap-aggregated CART trees with sqrt(d) candidate features per split."""

    def __init__(self, n_estimators: int = 100, max_features: int | str | None = "sqrt",
                 bootstrap: bool = True, random_state: int | None = None):
        self.n_estimators = n_estimators
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = _check_binary(y)
        yi = np.searchsorted(self.classes_, y)
        n = X.shape[0]
        seeds = np.random.SeedSequence(self.random_state).generate_state(self.n_estimators * 2)
        self.estimators_ = []
        for t in range(self.n_estimators):
            idx = np.random.default_rng(seeds[2 * t]).integers(0, n, size=n) if self.bootstrap else np.arange(n)
            tree = DecisionTreeClassifier(max_features=self.max_features, random_state=int(seeds[2 * t + 1]))
            tree.classes_ = np.arange(self.classes_.size)
            tree._fit_encoded(X[idx], yi[idx], self.classes_.size)
            self.estimators_.append(tree)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=np.float64)
        return np.mean([t.predict_proba(X) for t in self.estimators_], axis=0)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class KNNClassifier(ClassifierMixin, BaseEstimator):
    """Majority vote of the ``n_neighbors`` nearest training points (Euclidean).

    Distance ties go to the lower training index; vote ties to the lower class.
    """

    def __init__(self, n_neighbors: int = 5):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = _check_binary(y)
        if not 1 <= self.n_neighbors <= X.shape[0]:
            raise ConfigError(f"n_neighbors must lie in [1, {X.shape[0]}], got {self.n_neighbors}")
        self.X_ = X
        self.y_ = np.searchsorted(self.classes_, y)
        return self

    def kneighbors(self, X) -> np.ndarray:
        check_is_fitted(self, "X_")
        X = check_array(X, dtype=np.float64)
        out = np.empty((X.shape[0], self.n_neighbors), dtype=int)
        for lo in range(0, X.shape[0], 512):
            chunk = X[lo: lo + 512]
            d2 = (chunk**2).sum(1)[:, None] - 2 * chunk @ self.X_.T + (self.X_**2).sum(1)[None, :]
            d2 = np.maximum(d2, 0.0)
            out[lo: lo + 512] = np.argsort(d2, axis=1, kind="stable")[:, : self.n_neighbors]
        return out

    def predict_proba(self, X):
        nb = self.kneighbors(X)
        votes = np.stack([(self.y_[nb] == c).sum(1) for c in range(self.classes_.size)], axis=1)
        return votes / self.n_neighbors

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# -- fit / evaluate ----------------------------------------------------------


def make_classifier(kind: str, seed: int = 0, **hyperparameters):
    if kind == "logistic_regression":
        return LogisticRegressionClassifier(**hyperparameters)
    if kind == "decision_tree":
        return DecisionTreeClassifier(random_state=seed, **hyperparameters)
    if kind == "random_forest":
        return RandomForestClassifier(random_state=seed, **hyperparameters)
    if kind == "knn":
        return KNNClassifier(**hyperparameters)
    raise ConfigError(f"unknown classifier kind {kind!r}; expected one of {KINDS}")


def fit(kind: str, X, y, hyperparameters: dict | None = None, seed: int = 0):
    return make_classifier(kind, seed, **(hyperparameters or {})).fit(X, y)


def evaluate(model, X, y) -> dict:
    """Accuracy and confusion counts (positive class = hallucinated)."""
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("empty test set")
    pred = model.predict(X)
    tp = int(np.sum((pred == HALLUCINATED) & (y == HALLUCINATED)))
    tn = int(np.sum((pred == CLEAN) & (y == CLEAN)))
    fp = int(np.sum((pred == HALLUCINATED) & (y == CLEAN)))
    fn = int(np.sum((pred == CLEAN) & (y == HALLUCINATED)))
    return {"accuracy": (tp + tn) / y.size, "tp": tp, "tn": tn, "fp": fp, "fn": fn, "n": int(y.size)}


def majority_baseline(y_train, y_test) -> float:
    """Test accuracy of always predicting the training majority class."""
    y_train, y_test = np.asarray(y_train), np.asarray(y_test)
    vals, counts = np.unique(y_train, return_counts=True)
    return float(np.mean(y_test == vals[np.argmax(counts)]))


def fit_all(X_train, y_train, X_test, y_test, seed: int = 42, kinds: Sequence[str] = KINDS,
            standardize: bool = False) -> dict[str, dict]:
    """Fit every classifier kind; return per-kind evaluation dicts."""
    if standardize:
        mu, sd = X_train.mean(0), X_train.std(0)
        sd = np.where(sd > 0, sd, 1.0)
        X_train, X_test = (X_train - mu) / sd, (X_test - mu) / sd
    return {k: evaluate(fit(k, X_train, y_train, seed=seed), X_test, y_test) for k in kinds}


def top1(results: dict[str, dict]) -> tuple[str, float]:
    kind = max(results, key=lambda k: (results[k]["accuracy"], -KINDS.index(k)))
    return kind, results[kind]["accuracy"]
