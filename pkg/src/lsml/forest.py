"""Random-forest regression with out-of-bag bookkeeping.

Each tree is fit on a bootstrap sample drawn from its own random stream,
derived from ``(random_state, tree index)``, so a forest is bitwise
reproducible whatever the number of worker threads.
"""
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _cart

__all__ = ["RegressionTree", "RandomForestRegressor", "OOBError"]

_MAGIC = b"LSRF"
_VERSION = 1


class OOBError(RuntimeError):
    """Out-of-bag diagnostics are unavailable for this forest or target."""


@dataclass
class RegressionTree:
    """Array-encoded CART tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def to_bytes(self):
        n = self.n_nodes
        return b"".join(
            [
                struct.pack("<I", n),
                self.feature.astype("<i4").tobytes(),
                self.threshold.astype("<f8").tobytes(),
                self.left.astype("<i4").tobytes(),
                self.right.astype("<i4").tobytes(),
                self.value.astype("<f8").tobytes(),
            ]
        )

    @classmethod
    def from_buffer(cls, buf, pos):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4

        def take(dtype, width):
            nonlocal pos
            a = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
            pos += n * width
            return a

        feature = take("<i4", 4).astype(np.int64)
        threshold = take("<f8", 8).astype(np.float64)
        left = take("<i4", 4).astype(np.int64)
        right = take("<i4", 4).astype(np.int64)
        value = take("<f8", 8).astype(np.float64)
        internal = feature >= 0
        if np.any(internal & ((left < 0) | (left >= n) | (right < 0) | (right >= n))):
            raise ValueError("corrupt tree: child index out of range")
        return cls(feature, threshold, left, right, value), pos


def _tree_seeds(root, n_trees):
    """Per-tree (bootstrap generator, split seed) pairs from the root seed."""
    out = []
    for t in range(n_trees):
        ss = np.random.SeedSequence([root, t])
        gen = np.random.Generator(np.random.PCG64(ss))
        out.append((gen, int(ss.generate_state(1, np.uint64)[0])))
    return out


class RandomForestRegressor(RegressorMixin, BaseEstimator):
    """Bagged CART regression trees.

    Parameters
    ----------
    n_trees : int, default=100
    max_features : "all", "third", "sqrt", int or float, default="all"
        Candidate features per split. A float is a fraction of the columns.
    min_samples_leaf : int, default=1
    max_depth : int or None, default=None
    bootstrap : bool, default=True
        When False every tree sees all rows once and there are no OOB rows.
    random_state : int or None, default=0
    n_jobs : int or None, default=None
        Worker threads for tree fitting. Results do not depend on it.

    Attributes
    ----------
    trees_ : list of RegressionTree
    oob_indices_ : list of ndarray
        Rows not drawn into each tree's bootstrap sample.
    n_features_in_ : int
    seed_ : int
        Root seed actually used.
    """

    def __init__(
        self,
        n_trees=100,
        max_features="all",
        min_samples_leaf=1,
        max_depth=None,
        bootstrap=True,
        random_state=0,
        n_jobs=None,
    ):
        self.n_trees = n_trees
        self.max_features = max_features
        self.min_samples_leaf = min_samples_leaf
        self.max_depth = max_depth
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _resolve_max_features(self, d):
        mf = self.max_features
        if mf in (None, "all"):
            return d
        if mf == "third":
            return max(1, d // 3)
        if mf == "sqrt":
            return max(1, int(np.sqrt(d)))
        if isinstance(mf, float):
            if not 0 < mf <= 1:
                raise ValueError(f"max_features fraction must be in (0, 1], got {mf}")
            return max(1, int(mf * d))
        mf = int(mf)
        if not 1 <= mf:
            raise ValueError(f"max_features must be >= 1, got {mf}")
        return min(mf, d)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True, order="C")
        if X.shape[0] < 2:
            raise ValueError("need at least 2 rows to fit a forest")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        n, d = X.shape
        mf = self._resolve_max_features(d)
        depth = -1 if self.max_depth is None else int(self.max_depth)
        if self.random_state is None:
            self.seed_ = int(np.random.SeedSequence().generate_state(1, np.uint32)[0])
        else:
            self.seed_ = int(self.random_state)

        plans = []
        for gen, split_seed in _tree_seeds(self.seed_, self.n_trees):
            if self.bootstrap:
                samples = gen.integers(0, n, size=n, dtype=np.int64)
                inbag = np.zeros(n, dtype=bool)
                inbag[samples] = True
                oob = np.flatnonzero(~inbag)
            else:
                samples = np.arange(n, dtype=np.int64)
                oob = np.empty(0, dtype=np.int64)
            plans.append((samples, oob, split_seed))

        def grow(plan):
            samples, _, split_seed = plan
            arrays = _cart.build_tree(
                X, y, samples, mf, int(self.min_samples_leaf), depth, np.uint64(split_seed)
            )
            return RegressionTree(*arrays)

        workers = self.n_jobs or 1
        if workers > 1 and self.n_trees > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                trees = list(pool.map(grow, plans))
        else:
            trees = [grow(p) for p in plans]

        self.trees_ = trees
        self.oob_indices_ = [p[1] for p in plans]
        self.n_features_in_ = d
        self._pack()
        return self

    def _pack(self):
        sizes = [t.n_nodes for t in self.trees_]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._flat = tuple(
            np.ascontiguousarray(np.concatenate([getattr(t, name) for t in self.trees_]))
            for name in ("feature", "threshold", "left", "right", "value")
        )

    def _check_X(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64, order="C")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, forest was fit with {self.n_features_in_}")
        return X

    def predict(self, X):
        X = self._check_X(X)
        return _cart.predict_forest(X, *self._flat, self._offsets)

    def _tree_predict(self, t, X, rows, col=-1, src=None):
        if src is None:
            src = rows
        return _cart.predict_tree_rows(X, rows, *self._flat, self._offsets[t], col, src)

    def _require_oob(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True, order="C")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, forest was fit with {self.n_features_in_}")
        if not hasattr(self, "oob_indices_") or not any(len(o) for o in self.oob_indices_):
            raise OOBError("forest has no out-of-bag rows")
        if max(int(o.max(initial=-1)) for o in self.oob_indices_) >= len(y):
            raise OOBError("X, y are not the data this forest was trained on")
        return X, y

    def oob_prediction(self, X, y):
        """Mean OOB prediction per row and the number of trees voting on it."""
        X, y = self._require_oob(X, y)
        acc = np.zeros(len(y))
        votes = np.zeros(len(y), dtype=np.int64)
        for t, rows in enumerate(self.oob_indices_):
            if len(rows):
                acc[rows] += self._tree_predict(t, X, rows)
                votes[rows] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            pred = np.where(votes > 0, acc / np.maximum(votes, 1), np.nan)
        return pred, votes

    def oob_r2(self, X, y):
        """Coefficient of determination of the OOB predictions.

        Rows that were in every bootstrap sample are skipped.
        """
        pred, votes = self.oob_prediction(X, y)
        y = np.asarray(y, dtype=np.float64)
        seen = votes > 0
        if not seen.any():
            raise OOBError("no row was ever out of bag")
        yt = y[seen]
        ss_tot = ((yt - yt.mean()) ** 2).sum()
        if ss_tot == 0:
            raise OOBError("OOB targets have zero variance; R^2 undefined")
        ss_res = ((yt - pred[seen]) ** 2).sum()
        return float(1.0 - ss_res / ss_tot)

    def permutation_importance(self, X, y):
        """OOB permutation importance per feature, normalized to sum to one.

        For every tree and feature the feature column is permuted among the
        tree's OOB rows and the increase in that tree's mean squared error is
        recorded; increases are averaged over trees, negative averages are
        floored at zero, and the vector is divided by its sum (an all-zero
        vector is returned unchanged).
        """
        X, y = self._require_oob(X, y)
        d = self.n_features_in_
        raw = np.zeros(d)
        used = 0
        for t, rows in enumerate(self.oob_indices_):
            if len(rows) == 0:
                continue
            used += 1
            yt = y[rows]
            base = ((self._tree_predict(t, X, rows) - yt) ** 2).mean()
            for j in range(d):
                ss = np.random.SeedSequence([self.seed_, t, j, 1])
                src = np.random.Generator(np.random.PCG64(ss)).permutation(rows)
                err = ((self._tree_predict(t, X, rows, j, src) - yt) ** 2).mean()
                raw[j] += err - base
        raw = np.maximum(raw / used, 0.0)
        total = raw.sum()
        return raw / total if total > 0 else raw

    def to_bytes(self):
        check_is_fitted(self, "trees_")
        head = struct.pack("<4sIII", _MAGIC, _VERSION, len(self.trees_), self.n_features_in_)
        return head + b"".join(t.to_bytes() for t in self.trees_)

    @classmethod
    def from_bytes(cls, buf, pos=0, **params):
        """Rebuild a fitted forest from :meth:`to_bytes` output.

        Returns ``(forest, next_position)``. OOB bookkeeping is not stored, so
        OOB diagnostics on a loaded forest raise :class:`OOBError`.
        """
        magic, version, n_trees, n_features = struct.unpack_from("<4sIII", buf, pos)
        if magic != _MAGIC:
            raise ValueError(f"bad forest magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported forest format version {version}")
        pos += struct.calcsize("<4sIII")
        trees = []
        for _ in range(n_trees):
            tree, pos = RegressionTree.from_buffer(buf, pos)
            trees.append(tree)
        forest = cls(**params)
        forest.trees_ = trees
        forest.oob_indices_ = [np.empty(0, dtype=np.int64) for _ in trees]
        forest.n_features_in_ = n_features
        forest.seed_ = forest.random_state
        forest._pack()
        return forest, pos
