"""Tree ensembles and the logistic regression baseline for numeric features.

The forest is the numeric stream: its averaged leaf probabilities are the
``rf_probs`` half of every fused vector. Trees are grown with weighted
Gini impurity, where each row's weight is its class weight times its
bootstrap multiplicity.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from windfuse.config import ForestParams, LogisticParams
from windfuse.errors import DataError, ModelError
from windfuse.utils import parallel_map

logger = logging.getLogger(__name__)

FOREST_FORMAT = "windfuse.forest"
LOGISTIC_FORMAT = "windfuse.logistic"
FORMAT_VERSION = 1

# Splits must lower impurity by more than this to count.
_MIN_DECREASE = 1e-12


def gini(weighted_class_totals: Sequence[float]) -> float:
    """G = 1 - p0^2 - p1^2 over (low, high) weighted totals.

    Raises:
        DataError: If both totals are zero.
    """
    low, high = (float(v) for v in weighted_class_totals)
    total = low + high
    if total <= 0.0:
        raise DataError("gini of an empty node")
    p0, p1 = low / total, high / total
    return 1.0 - p0 * p0 - p1 * p1


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    impurity_decrease: float


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    features_considered: Sequence[int],
) -> Optional[Split]:
    """Exact search over midpoints between consecutive distinct values.

    Minimizes the weight-averaged child Gini. Ties go to the lower
    feature index, then the lower threshold.

    Args:
        X: real[n x p] rows of the node.
        y: 0/1 labels.
        weights: Positive per-row weights.
        features_considered: Column indices to search.

    Returns:
        The best split, or None when no split lowers impurity.
    """
    if len(y) < 2:
        return None
    y = np.asarray(y)
    w_high = weights * (y == 1)
    w_low = weights * (y == 0)
    total_low, total_high = float(w_low.sum()), float(w_high.sum())
    total = total_low + total_high
    parent = gini((total_low, total_high))
    if parent <= 0.0:
        return None

    best: Optional[Split] = None
    best_child = math.inf
    for f in sorted(features_considered):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        distinct = xs[:-1] < xs[1:]
        if not distinct.any():
            continue
        left_low = np.cumsum(w_low[order])[:-1]
        left_high = np.cumsum(w_high[order])[:-1]
        left_w = left_low + left_high
        right_low = total_low - left_low
        right_high = total_high - left_high
        right_w = right_low + right_high
        with np.errstate(divide="ignore", invalid="ignore"):
            g_left = 1.0 - (left_low / left_w) ** 2 - (left_high / left_w) ** 2
            g_right = 1.0 - (right_low / right_w) ** 2 - (right_high / right_w) ** 2
            child = (left_w * g_left + right_w * g_right) / total
        child = np.where(distinct, child, np.inf)
        lowest = float(child.min())
        if lowest < best_child - _MIN_DECREASE:
            pos = int(np.flatnonzero(child <= lowest + _MIN_DECREASE)[0])
            best_child = lowest
            best = Split(
                feature_index=int(f),
                threshold=float((xs[pos] + xs[pos + 1]) / 2.0),
                impurity_decrease=parent - lowest,
            )
    if best is None or best.impurity_decrease <= _MIN_DECREASE:
        return None
    return best


@dataclass(frozen=True)
class TreeNode:
    """Internal node (feature_index >= 0) or leaf (class_probabilities set)."""

    feature_index: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    class_probabilities: Optional[Tuple[float, float]] = None

    @property
    def is_leaf(self) -> bool:
        return self.class_probabilities is not None

    def depth(self) -> int:
        """Length of the longest root-to-leaf path."""
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def predict(self, x: Sequence[float]) -> Tuple[float, float]:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature_index] <= node.threshold else node.right
        return node.class_probabilities


def _leaf(low: float, high: float) -> TreeNode:
    total = low + high
    return TreeNode(class_probabilities=(low / total, high / total))


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    rng: np.random.Generator,
    class_weights: Sequence[float] = (1.0, 1.0),
    counts: Optional[np.ndarray] = None,
) -> TreeNode:
    """Grows one tree recursively.

    At every node ``max_features`` distinct columns are drawn without
    replacement from ``rng``. Growth stops at max_depth, on a pure node,
    below min_samples_split rows, or when no split lowers impurity.
    Leaves hold class-weighted frequencies.

    Args:
        X: real[n x p] training rows.
        y: 0/1 labels.
        params: Depth, feature subsampling and split parameters.
        rng: Source of the per-node feature draws.
        class_weights: Weight for (low, high) rows.
        counts: Per-row multiplicity (bootstrap draws); all ones if None.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataError("cannot fit a tree on zero rows")
    counts = np.ones(len(y)) if counts is None else np.asarray(counts, dtype=np.float64)
    keep = counts > 0
    X, y, counts = X[keep], y[keep], counts[keep]
    weights = counts * np.asarray(class_weights, dtype=np.float64)[y]
    n_features = X.shape[1]
    k = params.features_per_split(n_features)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        w = weights[idx]
        low = float(w[y[idx] == 0].sum())
        high = float(w[y[idx] == 1].sum())
        if (
            depth >= params.max_depth
            or low == 0.0
            or high == 0.0
            or counts[idx].sum() < params.min_samples_split
        ):
            return _leaf(low, high)
        if k < n_features:
            features = rng.choice(n_features, size=k, replace=False)
        else:
            features = np.arange(n_features)
        split = best_split(X[idx], y[idx], w, features)
        if split is None:
            return _leaf(low, high)
        go_left = X[idx, split.feature_index] <= split.threshold
        return TreeNode(
            feature_index=split.feature_index,
            threshold=split.threshold,
            left=grow(idx[go_left], depth + 1),
            right=grow(idx[~go_left], depth + 1),
        )

    return grow(np.arange(len(y)), 0)


@dataclass(frozen=True)
class FlatTree:
    """Array form of a TreeNode for vectorized prediction."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    @classmethod
    def from_node(cls, root: TreeNode) -> "FlatTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def visit(node: TreeNode) -> int:
            i = len(feature)
            feature.append(node.feature_index)
            threshold.append(node.threshold)
            left.append(-1)
            right.append(-1)
            value.append(node.class_probabilities or (0.0, 0.0))
            if not node.is_leaf:
                left[i] = visit(node.left)
                right[i] = visit(node.right)
            return i

        visit(root)
        return cls(
            feature=np.asarray(feature, dtype=np.int64),
            threshold=np.asarray(threshold, dtype=np.float64),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            value=np.asarray(value, dtype=np.float64),
            depth=root.depth(),
        )

    def to_node(self, i: int = 0) -> TreeNode:
        if self.feature[i] < 0:
            return TreeNode(class_probabilities=tuple(float(v) for v in self.value[i]))
        return TreeNode(
            feature_index=int(self.feature[i]),
            threshold=float(self.threshold[i]),
            left=self.to_node(int(self.left[i])),
            right=self.to_node(int(self.right[i])),
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return self.value[node]


@dataclass(eq=False)
class ForestModel:
    """Fitted forest: soft-voting average of its trees' leaf probabilities."""

    trees: List[TreeNode]
    n_trees: int
    max_depth: int
    feature_subsample_count: int
    class_weights: Tuple[float, float]
    seed: int
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)
    # Bootstrap multiplicities per tree; only kept in memory after fitting
    in_bag: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @cached_property
    def _flat(self) -> List[FlatTree]:
        return [FlatTree.from_node(t) for t in self.trees]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """real[n x 2] class probabilities for a batch of rows."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DataError(
                f"forest expects {self.n_features} columns, got {X.shape[1]}"
            )
        total = np.zeros((len(X), 2))
        for tree in self._flat:
            total += tree.predict(X)
        return total / len(self._flat)


def class_weights_for(y: np.ndarray) -> Tuple[float, float]:
    """Inverse-frequency weights N / (2 * N_c)."""
    y = np.asarray(y)
    n = len(y)
    n_high = int((y == 1).sum())
    n_low = n - n_high
    if n_low == 0 or n_high == 0:
        raise DataError("both classes must be present to fit class weights")
    return n / (2.0 * n_low), n / (2.0 * n_high)


def fit_forest(X: np.ndarray, y: np.ndarray, params: ForestParams, seed: int) -> ForestModel:
    """Fits params.n_trees trees, each on its own bootstrap sample.

    Tree t draws from ``np.random.default_rng([seed, t])`` so trees can be
    grown in parallel without changing the result.

    Raises:
        DataError: On fewer than 2 rows or a single-class y.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n < 2:
        raise DataError(f"need at least 2 rows to fit a forest, got {n}")
    if len(np.unique(y)) < 2:
        raise DataError("forest training labels contain a single class")
    weights = class_weights_for(y) if params.class_weighted else (1.0, 1.0)
    n_features = X.shape[1]
    k = params.features_per_split(n_features)

    def grow(t: int) -> Tuple[TreeNode, np.ndarray]:
        rng = np.random.default_rng([seed, t])
        counts = np.ones(n, dtype=np.int64)
        if params.bootstrap:
            counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
        tree = fit_tree(X, y, params, rng, weights, counts)
        logger.debug("tree %d/%d fitted (depth %d)", t + 1, params.n_trees, tree.depth())
        return tree, counts

    grown = parallel_map(grow, list(range(params.n_trees)))
    trees = [tree for tree, _ in grown]
    logger.info(
        "fitted forest: %d trees, depth<=%d, %d of %d features per node",
        params.n_trees, params.max_depth, k, n_features,
    )
    return ForestModel(
        trees=trees,
        n_trees=params.n_trees,
        max_depth=params.max_depth,
        feature_subsample_count=k,
        class_weights=weights,
        seed=seed,
        n_features=n_features,
        params=params,
        in_bag=[counts for _, counts in grown],
    )


def fit_decision_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, seed: int) -> ForestModel:
    """Single class-weighted tree over all features, no bootstrap."""
    single = params.model_copy(
        update={"n_trees": 1, "bootstrap": False, "max_features": X.shape[1]}
    )
    return fit_forest(X, y, single, seed)


def forest_predict_proba(model: ForestModel, x: Sequence[float]) -> np.ndarray:
    """z_RF for one row: mean of the trees' leaf probability vectors."""
    return model.predict_proba(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


def oob_predict_proba(model: ForestModel, X_train: np.ndarray) -> np.ndarray:
    """Out-of-bag probabilities for the forest's own training rows.

    Each row averages only the trees whose bootstrap sample left it out;
    rows that every tree saw fall back to the full forest.

    Raises:
        ModelError: If the forest was loaded from disk (no bootstrap record)
            or X_train does not match the training row count.
    """
    if model.in_bag is None:
        raise ModelError("forest has no bootstrap record; out-of-bag output unavailable")
    X_train = np.asarray(X_train, dtype=np.float64)
    if len(X_train) != len(model.in_bag[0]):
        raise ModelError(
            f"out-of-bag output needs the {len(model.in_bag[0])} training rows, "
            f"got {len(X_train)}"
        )
    total = np.zeros((len(X_train), 2))
    votes = np.zeros(len(X_train))
    for tree, counts in zip(model._flat, model.in_bag):
        out = counts == 0
        if out.any():
            total[out] += tree.predict(X_train[out])
            votes[out] += 1
    never = votes == 0
    if never.any():
        total[never] = model.predict_proba(X_train[never])
        votes[never] = 1
    return total / votes[:, None]


# --- Logistic regression ---

@dataclass(frozen=True)
class LogisticModel:
    weights: Tuple[float, ...]
    bias: float
    converged: bool = True
    n_iter: int = 0
    warning: Optional[str] = None

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """real[n x 2]; column 1 is sigma(w.x + b) = P(High)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        p = expit(X @ np.asarray(self.weights) + self.bias)
        return np.column_stack([1.0 - p, p])


def logistic_loss_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float
) -> Tuple[float, np.ndarray, float]:
    """Mean cross-entropy + (l2/2)||w||^2 and its gradient (bias unpenalized)."""
    z = X @ w + b
    # log(1 + e^z) - y z is the per-row cross-entropy of sigmoid(z)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))
    residual = expit(z) - y
    grad_w = X.T @ residual / len(y) + l2 * w
    grad_b = float(residual.mean())
    return loss, grad_w, grad_b


def fit_logistic(X: np.ndarray, y: np.ndarray, params: LogisticParams) -> LogisticModel:
    """Full-batch gradient descent until ||grad|| < tol or max_iter.

    Hitting the iteration cap is not an error: the model records a
    warning instead.

    Raises:
        DataError: If y contains a single class.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DataError("logistic regression needs both classes")
    w = np.zeros(X.shape[1])
    b = 0.0
    for it in range(1, params.max_iter + 1):
        _, grad_w, grad_b = logistic_loss_and_grad(w, b, X, y, params.l2)
        norm = math.sqrt(float(grad_w @ grad_w) + grad_b * grad_b)
        if norm < params.tol:
            return LogisticModel(tuple(float(v) for v in w), float(b), True, it - 1)
        w = w - params.lr * grad_w
        b = b - params.lr * grad_b
    message = f"gradient norm {norm:.3g} above tol after {params.max_iter} iterations"
    logger.warning("logistic regression did not converge: %s", message)
    return LogisticModel(
        tuple(float(v) for v in w), float(b), False, params.max_iter, message
    )


def logistic_predict_proba(model: LogisticModel, x: Sequence[float]) -> np.ndarray:
    return model.predict_proba(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


# --- Serialization ---

def forest_to_dict(model: ForestModel) -> Dict:
    trees = []
    for flat in model._flat:
        trees.append({
            "feature": flat.feature.tolist(),
            "threshold": [float(v) for v in flat.threshold],
            "left": flat.left.tolist(),
            "right": flat.right.tolist(),
            "value": [[float(a), float(b)] for a, b in flat.value],
        })
    return {
        "format": FOREST_FORMAT,
        "version": FORMAT_VERSION,
        "seed": model.seed,
        "n_features": model.n_features,
        "feature_subsample_count": model.feature_subsample_count,
        "class_weights": list(model.class_weights),
        "params": model.params.model_dump(mode="json"),
        "trees": trees,
    }


def forest_from_dict(doc: Dict) -> ForestModel:
    if doc.get("format") != FOREST_FORMAT:
        raise ModelError(f"not a forest document: format={doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelError(f"unsupported forest format version {doc.get('version')}")
    params = ForestParams.model_validate(doc["params"])
    trees = []
    for t in doc["trees"]:
        value = np.asarray(t["value"], dtype=np.float64).reshape(-1, 2)
        flat = FlatTree(
            feature=np.asarray(t["feature"], dtype=np.int64),
            threshold=np.asarray(t["threshold"], dtype=np.float64),
            left=np.asarray(t["left"], dtype=np.int64),
            right=np.asarray(t["right"], dtype=np.int64),
            value=value,
            depth=0,
        )
        trees.append(flat.to_node())
    return ForestModel(
        trees=trees,
        n_trees=len(trees),
        max_depth=params.max_depth,
        feature_subsample_count=doc["feature_subsample_count"],
        class_weights=tuple(doc["class_weights"]),
        seed=doc["seed"],
        n_features=doc["n_features"],
        params=params,
    )


def dumps_forest(model: ForestModel) -> str:
    return json.dumps(forest_to_dict(model), sort_keys=True)


def loads_forest(text: str) -> ForestModel:
    return forest_from_dict(json.loads(text))


def logistic_to_dict(model: LogisticModel) -> Dict:
    return {
        "format": LOGISTIC_FORMAT,
        "version": FORMAT_VERSION,
        "weights": list(model.weights),
        "bias": model.bias,
        "converged": model.converged,
        "n_iter": model.n_iter,
        "warning": model.warning,
    }


def logistic_from_dict(doc: Dict) -> LogisticModel:
    if doc.get("format") != LOGISTIC_FORMAT:
        raise ModelError(f"not a logistic document: format={doc.get('format')!r}")
    return LogisticModel(
        weights=tuple(doc["weights"]),
        bias=doc["bias"],
        converged=doc["converged"],
        n_iter=doc["n_iter"],
        warning=doc["warning"],
    )
