"""Gradient-boosted regression trees (squared error, exact greedy splits)."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numba
import numpy as np
import pandas as pd

from tlf.domain import ConfigError, Scheme, prediction_levels

log = logging.getLogger(__name__)

FORMAT = "tlf-gbt"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class GbtHyperparams:
    n_trees: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ConfigError("n_trees must be >= 0")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError("subsample must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. Rows with x <= threshold go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Tree":
        return cls(np.asarray(d["feature"], np.int64), np.asarray(d["threshold"], np.float64),
                   np.asarray(d["left"], np.int64), np.asarray(d["right"], np.int64),
                   np.asarray(d["value"], np.float64))


def fingerprint(columns: Sequence[str]) -> str:
    return hashlib.sha256(json.dumps(list(columns)).encode()).hexdigest()[:16]


@dataclass
class GbtEnsemble:
    base_score: float
    learning_rate: float
    trees: List[Tree]
    columns: List[str]
    params: GbtHyperparams
    train_rmse: List[float] = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.columns)

    def to_dict(self) -> dict:
        from tlf.io import version_string

        return {
            "format": FORMAT, "format_version": FORMAT_VERSION, "version": version_string(),
            "base_score": self.base_score, "learning_rate": self.learning_rate,
            "params": asdict(self.params), "columns": list(self.columns),
            "fingerprint": self.fingerprint, "train_rmse": list(self.train_rmse),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GbtEnsemble":
        if d.get("format") != FORMAT or "version" not in d:
            raise ModelError("not a tlf GBT model (missing format/version)")
        if d["format_version"] != FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {d['format_version']}")
        ens = cls(float(d["base_score"]), float(d["learning_rate"]),
                  [Tree.from_dict(t) for t in d["trees"]], list(d["columns"]),
                  GbtHyperparams(**d["params"]), list(d.get("train_rmse", [])))
        if ens.fingerprint != d["fingerprint"]:
            raise ModelError("stored fingerprint does not match the column list")
        return ens

    def save(self, path, provenance: Optional[dict] = None) -> Path:
        from tlf.io import write_json

        return write_json(self.to_dict(), path, provenance)

    @classmethod
    def load(cls, path) -> "GbtEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- numba kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _split_threshold(a, b):
    t = a + (b - a) / 2.0
    if t >= b or t < a:
        t = a
    return t


@numba.njit(cache=True)
def _fit_tree(sorted_vals, order, X, resid, in_sample, max_depth, min_leaf):
    n = resid.shape[0]
    d = sorted_vals.shape[0]
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    node_sum = np.zeros(cap)
    node_sq = np.zeros(cap)
    node_cnt = np.zeros(cap, np.int64)

    node_of = np.full(n, -1, np.int64)
    for r in range(n):
        if in_sample[r]:
            node_of[r] = 0
            node_sum[0] += resid[r]
            node_sq[0] += resid[r] * resid[r]
            node_cnt[0] += 1
    n_nodes = 1
    lo = 0
    hi = 1
    for _level in range(max_depth):
        width = hi - lo
        best_gain = np.zeros(width)
        best_feat = np.full(width, -1, np.int64)
        best_thr = np.zeros(width)
        tol = np.empty(width)
        for k in range(width):
            nd = lo + k
            c = node_cnt[nd]
            sse = node_sq[nd] - node_sum[nd] * node_sum[nd] / c if c > 0 else 0.0
            tol[k] = 1e-10 * max(sse, 1.0)
            best_gain[k] = tol[k]
        l_sum = np.zeros(width)
        l_cnt = np.zeros(width, np.int64)
        last = np.zeros(width)
        seen = np.zeros(width, np.bool_)
        for f in range(d):
            l_sum[:] = 0.0
            l_cnt[:] = 0
            seen[:] = False
            for i in range(n):
                r = order[f, i]
                nd = node_of[r]
                if nd < lo:
                    continue
                k = nd - lo
                v = sorted_vals[f, i]
                if seen[k] and v > last[k]:
                    nl = l_cnt[k]
                    c = node_cnt[nd]
                    nr = c - nl
                    if nl >= min_leaf and nr >= min_leaf:
                        s = node_sum[nd]
                        sl = l_sum[k]
                        sr = s - sl
                        gain = sl * sl / nl + sr * sr / nr - s * s / c
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = f
                            best_thr[k] = _split_threshold(last[k], v)
                l_sum[k] += resid[r]
                l_cnt[k] += 1
                last[k] = v
                seen[k] = True
        new_lo = n_nodes
        for k in range(width):
            nd = lo + k
            if best_feat[k] >= 0:
                feature[nd] = best_feat[k]
                threshold[nd] = best_thr[k]
                left[nd] = n_nodes
                right[nd] = n_nodes + 1
                n_nodes += 2
        if n_nodes == new_lo:
            break
        for r in range(n):
            nd = node_of[r]
            if nd < lo or feature[nd] < 0:
                continue
            child = left[nd] if X[r, feature[nd]] <= threshold[nd] else right[nd]
            node_of[r] = child
            node_sum[child] += resid[r]
            node_sq[child] += resid[r] * resid[r]
            node_cnt[child] += 1
        lo = new_lo
        hi = n_nodes
    for nd in range(n_nodes):
        if node_cnt[nd] > 0:
            value[nd] = node_sum[nd] / node_cnt[nd]
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@numba.njit(cache=True)
def _tree_output(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for r in range(n):
        nd = 0
        while feature[nd] >= 0:
            if X[r, feature[nd]] <= threshold[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[r] = value[nd]
    return out


def tree_output(tree: Tree, X: np.ndarray) -> np.ndarray:
    return _tree_output(np.ascontiguousarray(X, dtype=np.float64), tree.feature, tree.threshold,
                        tree.left, tree.right, tree.value)


# --- public API ------------------------------------------------------------

def _check_matrix(X: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(columns):
        raise ModelError(f"matrix has {X.shape[-1] if X.ndim else 0} columns, expected {len(columns)}")
    bad = np.isnan(X).any(axis=0)
    if bad.any():
        raise ModelError(f"NaN in feature column {columns[int(np.flatnonzero(bad)[0])]!r}")
    return X


def rmse(y_true, y_pred) -> float:
    d = np.asarray(y_true, float) - np.asarray(y_pred, float)
    return float(np.sqrt(np.mean(d * d))) if len(d) else float("nan")


def fit(X: np.ndarray, y: np.ndarray, params: GbtHyperparams = GbtHyperparams(),
        columns: Optional[Sequence[str]] = None) -> GbtEnsemble:
    """Squared-error boosting; each tree fits the residuals of the running prediction."""
    columns = list(columns) if columns is not None else [f"x{i}" for i in range(np.shape(X)[1])]
    X = _check_matrix(X, columns)
    y = np.asarray(y, dtype=np.float64)
    if len(y) != X.shape[0]:
        raise ModelError("matrix rows and target length differ")
    if len(y) < 10:
        raise ModelError("at least 10 training rows are required")
    base = float(np.mean(y))
    ens = GbtEnsemble(base, params.learning_rate, [], columns, params)
    pred = np.full(len(y), base)
    ens.train_rmse.append(rmse(y, pred))
    if np.all(y == y[0]):
        return ens
    order = np.argsort(X, axis=0, kind="stable").T.copy()
    sorted_vals = np.take_along_axis(X, order.T, axis=0).T.copy()
    rng = np.random.default_rng(params.seed)
    n = len(y)
    m = max(1, int(np.floor(params.subsample * n + 0.5)))
    for _ in range(params.n_trees):
        if m < n:
            in_sample = np.zeros(n, dtype=np.bool_)
            in_sample[rng.choice(n, m, replace=False)] = True
        else:
            in_sample = np.ones(n, dtype=np.bool_)
        resid = y - pred
        tree = Tree(*_fit_tree(sorted_vals, order, X, resid, in_sample, params.max_depth,
                               params.min_samples_leaf))
        ens.trees.append(tree)
        pred = pred + params.learning_rate * tree_output(tree, X)
        ens.train_rmse.append(rmse(y, pred))
    return ens


def predict(ens: GbtEnsemble, X: np.ndarray, columns: Optional[Sequence[str]] = None) -> np.ndarray:
    """Raw load predictions. ``columns`` (when given) must match the training schema."""
    if columns is not None and fingerprint(columns) != ens.fingerprint:
        raise ModelError("feature schema fingerprint mismatch")
    X = _check_matrix(X, ens.columns)
    pred = np.full(X.shape[0], ens.base_score)
    for tree in ens.trees:
        pred = pred + ens.learning_rate * tree_output(tree, X)
    return pred


def predict_levels(ens: GbtEnsemble, X: np.ndarray, columns=None) -> np.ndarray:
    """Clamp at zero, round to a whole load, then apply the trip binning."""
    return prediction_levels(predict(ens, X, columns), Scheme.TRIP)


# --- model selection -------------------------------------------------------

@dataclass(frozen=True)
class CvResult:
    mean_rmse: float
    sd_rmse: float
    fold_rmse: List[float]


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Fold id per row; fold sizes differ by at most one."""
    if k < 2:
        raise ConfigError("cross-validation needs k >= 2")
    if n < k:
        raise ConfigError("fewer rows than folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    for i, part in enumerate(np.array_split(perm, k)):
        fold[part] = i
    return fold


def cross_validate(X: np.ndarray, y: np.ndarray, params: GbtHyperparams, k: int = 5,
                   seed: int = 0, columns=None) -> CvResult:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fold = fold_assignment(len(y), k, seed)
    scores = []
    for i in range(k):
        tr, te = fold != i, fold == i
        ens = fit(X[tr], y[tr], params, columns)
        scores.append(rmse(y[te], predict(ens, X[te])))
    return CvResult(float(np.mean(scores)), float(np.std(scores)), scores)


DEFAULT_GRID = {"max_depth": [3, 6, 9], "n_trees": [100, 300], "learning_rate": [0.05, 0.1, 0.3]}


def grid_search(X: np.ndarray, y: np.ndarray, grid: Mapping[str, Sequence] = DEFAULT_GRID,
                base: GbtHyperparams = GbtHyperparams(), k: int = 5, seed: int = 0,
                columns=None):
    """Exhaustive k-fold grid search.

    Returns (best params, score table). Ties on mean RMSE go to fewer trees,
    then shallower depth.
    """
    names = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[n] for n in names)):
        params = GbtHyperparams(**{**asdict(base), **dict(zip(names, combo))})
        cv = cross_validate(X, y, params, k, seed, columns)
        rows.append({**dict(zip(names, combo)), "n_trees": params.n_trees, "max_depth": params.max_depth,
                     "mean_rmse": cv.mean_rmse, "sd_rmse": cv.sd_rmse, "_params": params})
        log.info("grid %s: cv rmse %.4f +/- %.4f", dict(zip(names, combo)), cv.mean_rmse, cv.sd_rmse)
    if not rows:
        raise ConfigError("empty parameter grid")
    best = min(rows, key=lambda r: (r["mean_rmse"], r["n_trees"], r["max_depth"]))
    table = pd.DataFrame([{k: v for k, v in r.items() if k != "_params"} for r in rows])
    return best["_params"], table


def permutation_importance(ens: GbtEnsemble, X: np.ndarray, y: np.ndarray, seed: int = 0,
                           n_repeats: int = 5, groups: Optional[Mapping[str, Sequence[int]]] = None
                           ) -> pd.DataFrame:
    """RMSE increase when a feature (or a group of columns, jointly) is shuffled."""
    X = _check_matrix(X, ens.columns)
    y = np.asarray(y, dtype=np.float64)
    if groups is None:
        groups = {c: [i] for i, c in enumerate(ens.columns)}
    base = rmse(y, predict(ens, X))
    rng = np.random.default_rng(seed)
    out = []
    for name, cols in groups.items():
        cols = list(cols)
        scores = []
        for _ in range(n_repeats):
            perm = rng.permutation(len(y))
            Xp = X.copy()
            Xp[:, cols] = X[perm][:, cols]
            scores.append(rmse(y, predict(ens, Xp)) - base)
        out.append({"feature": name, "importance": float(np.mean(scores)),
                    "sd": float(np.std(scores))})
    table = pd.DataFrame(out)
    return table.sort_values(["importance", "feature"], ascending=[False, True], kind="stable",
                             ignore_index=True)


def schema_groups(columns: Sequence[str]) -> Dict[str, List[int]]:
    """Group one-hot indicator columns (``name=level``) under their feature name."""
    groups: Dict[str, List[int]] = {}
    for i, c in enumerate(columns):
        groups.setdefault(c.split("=", 1)[0], []).append(i)
    return groups
