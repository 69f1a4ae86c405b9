"""Axis-aligned regression trees with constant vector leaves.

Greedy variance-reduction fitting (CART): at each node the split minimizing
the summed squared error of the two children is chosen over all features and
all midpoints between consecutive sorted unique feature values. Ties go to
the lowest feature index, then the lowest threshold. Routing is strict
less-than: x[feature] < threshold goes left, everything else right. A node
stops splitting when the depth limit or min_leaf would be violated or when
the best improvement is below 1e-12.

Tree policies read only the newest raw observation of a window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .policies import ObservationWindow, Policy

MIN_GAIN = 1e-12


@dataclass
class TreeNode:
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: np.ndarray | None = None  # leaf payload

    @property
    def is_leaf(self) -> bool:
        return self.value is not None


@dataclass
class RegressionTree:
    root: TreeNode
    feature_dim: int
    action_dim: int
    max_depth: int
    min_leaf: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] < node.threshold else node.right
        return node.value.copy()

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        out = np.empty((len(X), self.action_dim))
        self._fill(self.root, X, np.arange(len(X)), out)
        return out

    def _fill(self, node, X, idx, out):
        if len(idx) == 0:
            return
        if node.is_leaf:
            out[idx] = node.value
            return
        mask = X[idx, node.feature] < node.threshold
        self._fill(node.left, X, idx[mask], out)
        self._fill(node.right, X, idx[~mask], out)

    @property
    def n_leaves(self) -> int:
        def count(n):
            return 1 if n.is_leaf else count(n.left) + count(n.right)

        return count(self.root)

    @property
    def depth(self) -> int:
        def d(n):
            return 0 if n.is_leaf else 1 + max(d(n.left), d(n.right))

        return d(self.root)


def _node_sse(Y: np.ndarray) -> float:
    mean = Y.mean(axis=0)
    return float(np.sum((Y - mean) ** 2))


def _best_split(X, Y, min_leaf):
    """Best (feature, threshold, child_sse) by exhaustive midpoint search.

    Returns None when no split leaves min_leaf samples on each side or no
    candidate exists. First strictly-better candidate wins, scanning features
    ascending and thresholds ascending, which fixes tie-breaking.
    """
    n = len(X)
    total_sum = Y.sum(axis=0)
    total_sq = float(np.sum(Y * Y))
    best = None
    best_sse = np.inf
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = Y[order]
        cum_sum = np.cumsum(ys, axis=0)
        cum_sq = np.cumsum(np.sum(ys * ys, axis=1))
        # split after position i (left = first i+1 rows); valid only between
        # distinct consecutive values with both sides >= min_leaf
        i = np.arange(n - 1)
        valid = (xs[:-1] != xs[1:]) & (i + 1 >= min_leaf) & (n - i - 1 >= min_leaf)
        if not np.any(valid):
            continue
        ln = (i + 1).astype(np.float64)
        rn = n - ln
        l_sq = cum_sq[:-1]
        l_norm = np.sum(cum_sum[:-1] ** 2, axis=1)
        r_sq = total_sq - l_sq
        r_norm = np.sum((total_sum - cum_sum[:-1]) ** 2, axis=1)
        sse = (l_sq - l_norm / ln) + (r_sq - r_norm / rn)
        sse = np.where(valid, sse, np.inf)
        j = int(np.argmin(sse))  # first argmin -> lowest threshold on ties
        if sse[j] < best_sse:
            best_sse = float(sse[j])
            best = (f, float((xs[j] + xs[j + 1]) / 2.0), best_sse)
    return best


def _grow(X, Y, depth, max_depth, min_leaf):
    node_sse = _node_sse(Y)
    leaf = TreeNode(value=Y.mean(axis=0))
    if depth >= max_depth or len(X) < 2 * min_leaf:
        return leaf
    split = _best_split(X, Y, min_leaf)
    if split is None:
        return leaf
    f, thr, child_sse = split
    if node_sse - child_sse < MIN_GAIN:
        return leaf
    mask = X[:, f] < thr
    return TreeNode(
        feature=f,
        threshold=thr,
        left=_grow(X[mask], Y[mask], depth + 1, max_depth, min_leaf),
        right=_grow(X[~mask], Y[~mask], depth + 1, max_depth, min_leaf),
    )


def fit_tree(X, Y, max_depth: int = 6, min_leaf: int = 8) -> RegressionTree:
    """Fit a regression tree to (observation, action) pairs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    assert X.ndim == 2 and Y.ndim == 2 and len(X) == len(Y)
    assert len(X) >= min_leaf, f"need at least min_leaf={min_leaf} samples"
    assert np.all(np.isfinite(X)) and np.all(np.isfinite(Y))
    root = _grow(X, Y, 0, max_depth, min_leaf)
    return RegressionTree(
        root=root,
        feature_dim=X.shape[1],
        action_dim=Y.shape[1],
        max_depth=max_depth,
        min_leaf=min_leaf,
    )


class TreePolicy(Policy):
    """Policy handle: the tree sees the newest raw observation only."""

    def __init__(self, tree: RegressionTree, env_spec):
        assert tree.feature_dim == env_spec.obs_dim
        assert tree.action_dim == env_spec.action_dim
        self.tree = tree

    def act(self, window: ObservationWindow) -> np.ndarray:
        return self.tree.predict(window.newest)

    def act_batch(self, samples: np.ndarray, dt: float) -> np.ndarray:
        return self.tree.predict_batch(samples[:, -1, :])


# -- serialization -------------------------------------------------------------


def _node_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value.tolist()}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d: dict) -> TreeNode:
    if "value" in d:
        return TreeNode(value=np.asarray(d["value"], dtype=np.float64))
    return TreeNode(
        feature=int(d["feature"]),
        threshold=float(d["threshold"]),
        left=_node_from_dict(d["left"]),
        right=_node_from_dict(d["right"]),
    )


def tree_to_json(tree: RegressionTree) -> str:
    return json.dumps(
        {
            "format": "tree",
            "feature_dim": tree.feature_dim,
            "action_dim": tree.action_dim,
            "max_depth": tree.max_depth,
            "min_leaf": tree.min_leaf,
            "root": _node_to_dict(tree.root),
        }
    )


def tree_from_json(text: str) -> RegressionTree:
    d = json.loads(text)
    assert d.get("format") == "tree", "not a tree checkpoint"
    return RegressionTree(
        root=_node_from_dict(d["root"]),
        feature_dim=int(d["feature_dim"]),
        action_dim=int(d["action_dim"]),
        max_depth=int(d["max_depth"]),
        min_leaf=int(d["min_leaf"]),
    )
