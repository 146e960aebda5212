"""Gradient-boosted regression trees with second-order split gain.

Squared loss ``l = (y - yhat)^2 / 2`` gives gradient ``yhat - y`` and unit
hessian. Each tree is grown depth-first over quantile-binned features; a
split is kept only if its regularized gain is positive and both children
carry at least ``min_child_weight`` hessian.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigError, DataError, ModelError
from .features import FeatureMatrix
from .io_utils import write_atomic

MODEL_VERSION = 1


@dataclass(frozen=True)
class GbtParams:
    num_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    max_bins: int = 256
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not (isinstance(self.num_trees, int) and self.num_trees >= 0):
            problems.append(f"num_trees must be a non-negative int, got {self.num_trees!r}")
        if not 0.0 < self.learning_rate <= 1.0:
            problems.append(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if not (isinstance(self.max_depth, int) and self.max_depth >= 1):
            problems.append(f"max_depth must be a positive int, got {self.max_depth!r}")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            problems.append("reg_lambda, gamma and min_child_weight must be >= 0")
        if not (isinstance(self.max_bins, int) and self.max_bins >= 2):
            problems.append(f"max_bins must be an int >= 2, got {self.max_bins!r}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class Tree:
    """Flat node arrays in preorder; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by every row."""
        return _apply_tree(X, self.feature, self.threshold, self.left, self.right)

    def to_dict(self) -> dict:
        nodes = []
        for n in range(self.n_nodes):
            if self.feature[n] < 0:
                nodes.append({"leaf": float(self.value[n])})
            else:
                nodes.append({
                    "feature": int(self.feature[n]),
                    "threshold": float(self.threshold[n]),
                    "left": int(self.left[n]),
                    "right": int(self.right[n]),
                    "gain": float(self.gain[n]),
                })
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict, n_features: int) -> "Tree":
        nodes = d["nodes"]
        n = len(nodes)
        if n == 0:
            raise ModelError("tree without nodes")
        t = cls(
            feature=np.full(n, -1, dtype=np.int64),
            threshold=np.zeros(n),
            left=np.full(n, -1, dtype=np.int64),
            right=np.full(n, -1, dtype=np.int64),
            value=np.zeros(n),
            gain=np.zeros(n),
        )
        for i, node in enumerate(nodes):
            if "leaf" in node:
                t.value[i] = float(node["leaf"])
                continue
            f, l, r = int(node["feature"]), int(node["left"]), int(node["right"])
            if not (0 <= f < n_features and i < l < n and i < r < n):
                raise ModelError(f"tree node {i} has invalid references")
            t.feature[i], t.left[i], t.right[i] = f, l, r
            t.threshold[i] = float(node["threshold"])
            t.gain[i] = float(node["gain"])
        return t


@dataclass
class GbtModel:
    base_score: float
    trees: list[Tree]
    params: GbtParams
    schema_fingerprint: str
    feature_names: list[str]
    importance: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "params": asdict(self.params),
            "base_score": self.base_score,
            "schema_fingerprint": self.schema_fingerprint,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
            "importance": {n: self.importance.get(n, 0.0) for n in self.feature_names},
        }


# Binning ---------------------------------------------------------------------


def bin_thresholds(col: np.ndarray, max_bins: int) -> np.ndarray:
    """Candidate thresholds: midpoints between consecutive bin edges.

    With at most ``max_bins`` distinct values the edges are the distinct
    values themselves (exact greedy); otherwise they are data quantiles.
    """
    edges = np.unique(col)
    if len(edges) > max_bins:
        edges = np.unique(np.quantile(col, np.linspace(0.0, 1.0, max_bins), method="inverted_cdf"))
    lo, hi = edges[:-1], edges[1:]
    mid = lo + (hi - lo) / 2.0
    # adjacent floats: the midpoint may round up onto the upper edge
    return np.where(mid < hi, mid, lo)


def bin_matrix(X: np.ndarray, thresholds: list[np.ndarray]) -> np.ndarray:
    """Bin index per value; ``bin <= b`` iff ``value <= thresholds[b]``."""
    out = np.empty(X.shape, dtype=np.int32)
    for j, thr in enumerate(thresholds):
        out[:, j] = np.searchsorted(thr, X[:, j], side="left")
    return out


# Kernels ---------------------------------------------------------------------


@njit(nogil=True, cache=True)
def _fill_hist(bins, grad, hess, rows, f_lo, f_hi, G, H):
    for r in rows:
        g = grad[r]
        h = hess[r]
        for f in range(f_lo, f_hi):
            b = bins[r, f]
            G[f, b] += g
            H[f, b] += h


@njit(nogil=True, cache=True)
def _scan_splits(G, H, n_thr, g_tot, h_tot, lam, gamma, mcw):
    """Best (feature, bin, gain) over all features; strict improvement keeps
    the lowest feature index and then the lowest threshold on ties."""
    best_f = -1
    best_b = -1
    best_gain = 0.0
    parent = g_tot * g_tot / (h_tot + lam)
    for f in range(G.shape[0]):
        gl = 0.0
        hl = 0.0
        for b in range(n_thr[f]):
            gl += G[f, b]
            hl += H[f, b]
            hr = h_tot - hl
            if hl <= 0.0 or hr <= 0.0 or hl < mcw or hr < mcw:
                continue
            gr = g_tot - gl
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - gamma
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
    return best_f, best_b, best_gain


@njit(cache=True)
def _apply_tree(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for r in range(X.shape[0]):
        n = 0
        while feature[n] >= 0:
            if X[r, feature[n]] <= threshold[n]:
                n = left[n]
            else:
                n = right[n]
        out[r] = n
    return out


@njit(cache=True)
def _predict_forest(X, base, eta, feature, threshold, left, right, value, offsets):
    out = np.full(X.shape[0], base)
    for t in range(len(offsets) - 1):
        o = offsets[t]
        for r in range(X.shape[0]):
            n = 0
            while feature[o + n] >= 0:
                if X[r, feature[o + n]] <= threshold[o + n]:
                    n = left[o + n]
                else:
                    n = right[o + n]
            out[r] += eta * value[o + n]
    return out


# Growing ---------------------------------------------------------------------


class _Grower:
    def __init__(self, bins, thresholds, params: GbtParams, n_threads: int):
        self.bins = bins
        self.thresholds = thresholds
        self.n_thr = np.array([len(t) for t in thresholds], dtype=np.int64)
        self.n_bins = int(self.n_thr.max()) + 1 if len(thresholds) else 1
        self.p = params
        n_feat = bins.shape[1]
        n_threads = max(1, min(n_threads, n_feat))
        bounds = np.linspace(0, n_feat, n_threads + 1).astype(int)
        self.chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        self.pool = ThreadPoolExecutor(len(self.chunks)) if len(self.chunks) > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def hist(self, rows, grad, hess):
        G = np.zeros((self.bins.shape[1], self.n_bins))
        H = np.zeros_like(G)
        if self.pool is None:
            _fill_hist(self.bins, grad, hess, rows, 0, self.bins.shape[1], G, H)
        else:
            # each worker owns a disjoint block of feature rows
            futures = [self.pool.submit(_fill_hist, self.bins, grad, hess, rows, a, b, G, H) for a, b in self.chunks]
            for fut in futures:
                fut.result()
        return G, H

    def grow(self, grad, hess) -> Tree:
        nodes: list[list] = []  # [feature, threshold, left, right, value, gain]
        rows = np.arange(self.bins.shape[0], dtype=np.int64)
        self._grow(rows, grad, hess, 0, None, nodes)
        arr = list(zip(*nodes))
        return Tree(
            feature=np.array(arr[0], dtype=np.int64),
            threshold=np.array(arr[1], dtype=np.float64),
            left=np.array(arr[2], dtype=np.int64),
            right=np.array(arr[3], dtype=np.int64),
            value=np.array(arr[4], dtype=np.float64),
            gain=np.array(arr[5], dtype=np.float64),
        )

    def _grow(self, rows, grad, hess, depth, hist, nodes) -> int:
        p = self.p
        node_id = len(nodes)
        g_tot = float(grad[rows].sum())
        h_tot = float(hess[rows].sum())
        nodes.append([-1, 0.0, -1, -1, -g_tot / (h_tot + p.reg_lambda) if h_tot + p.reg_lambda > 0 else 0.0, 0.0])
        if depth >= p.max_depth or len(rows) < 2:
            return node_id
        if hist is None:
            hist = self.hist(rows, grad, hess)
        G, H = hist
        f, b, gain = _scan_splits(G, H, self.n_thr, g_tot, h_tot, p.reg_lambda, p.gamma, p.min_child_weight)
        if f < 0:
            return node_id
        go_left = self.bins[rows, f] <= b
        left_rows, right_rows = rows[go_left], rows[~go_left]
        left_hist = right_hist = None
        if depth + 1 < p.max_depth:
            # build the smaller child's histogram, derive the sibling by subtraction
            if len(left_rows) <= len(right_rows):
                left_hist = self.hist(left_rows, grad, hess)
                right_hist = (G - left_hist[0], H - left_hist[1])
            else:
                right_hist = self.hist(right_rows, grad, hess)
                left_hist = (G - right_hist[0], H - right_hist[1])
        nodes[node_id][0] = int(f)
        nodes[node_id][1] = float(self.thresholds[f][b])
        nodes[node_id][5] = float(gain)
        nodes[node_id][2] = self._grow(left_rows, grad, hess, depth + 1, left_hist, nodes)
        nodes[node_id][3] = self._grow(right_rows, grad, hess, depth + 1, right_hist, nodes)
        return node_id


def _check_finite(X: np.ndarray):
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature value; missing-value routing is not supported")


def train(fm: FeatureMatrix, params: GbtParams = GbtParams(), n_threads: int = 1) -> GbtModel:
    """Fit a boosted ensemble to ``fm.labels``.

    ``n_threads`` only parallelizes histogram construction across features;
    the fitted model does not depend on it.
    """
    if fm.labels is None or len(fm) == 0:
        raise DataError("training needs a non-empty labelled feature matrix")
    X = fm.rows
    _check_finite(X)
    y = fm.labels
    names = fm.schema.names
    thresholds = [bin_thresholds(X[:, j], params.max_bins) for j in range(X.shape[1])]
    bins = np.ascontiguousarray(bin_matrix(X, thresholds))
    base = float(y.mean())
    yhat = np.full(len(y), base)
    hess = np.ones(len(y))
    importance = np.zeros(X.shape[1])
    trees = []
    grower = _Grower(bins, thresholds, params, n_threads)
    try:
        for _ in range(params.num_trees):
            grad = yhat - y
            tree = grower.grow(grad, hess)
            trees.append(tree)
            split = tree.feature >= 0
            np.add.at(importance, tree.feature[split], tree.gain[split])
            yhat += params.learning_rate * tree.value[tree.apply(X)]
    finally:
        grower.close()
    return GbtModel(
        base_score=base,
        trees=trees,
        params=params,
        schema_fingerprint=fm.schema.fingerprint,
        feature_names=list(names),
        importance={n: float(g) for n, g in zip(names, importance)},
    )


def predict_rows(model: GbtModel, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise DataError(f"expected {len(model.feature_names)} feature columns, got shape {X.shape}")
    _check_finite(X)
    if not model.trees:
        return np.full(X.shape[0], model.base_score)
    sizes = [t.n_nodes for t in model.trees]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    cat = lambda attr: np.concatenate([getattr(t, attr) for t in model.trees])  # noqa: E731
    return _predict_forest(
        X, model.base_score, model.params.learning_rate,
        cat("feature"), cat("threshold"), cat("left"), cat("right"), cat("value"), offsets,
    )


def predict(model: GbtModel, fm: FeatureMatrix) -> np.ndarray:
    if fm.schema.fingerprint != model.schema_fingerprint:
        raise ModelError(
            f"feature schema {fm.schema.fingerprint} does not match model schema {model.schema_fingerprint}"
        )
    return predict_rows(model, fm.rows)


def importance(model: GbtModel) -> list[tuple[str, float]]:
    """Gain importance normalized to sum to one, highest first (ties by column order)."""
    gains = [(i, n, model.importance.get(n, 0.0)) for i, n in enumerate(model.feature_names)]
    total = math.fsum(g for _, _, g in gains)
    if total <= 0:
        return []
    ranked = sorted(gains, key=lambda t: (-t[2], t[0]))
    return [(n, g / total) for _, n, g in ranked]


# Persistence -----------------------------------------------------------------


def dumps_model(model: GbtModel, created_at: str | None = None) -> str:
    d = model.to_dict()
    if created_at is not None:
        d["created_at"] = created_at
    return json.dumps(d, indent=1)


def loads_model(text: str) -> GbtModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed model JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ModelError("model JSON must be an object")
    if d.get("version") != MODEL_VERSION:
        raise ModelError(f"unsupported model version {d.get('version')!r}, expected {MODEL_VERSION}")
    try:
        params = GbtParams(**d["params"])
        names = [str(n) for n in d["feature_names"]]
        trees = [Tree.from_dict(t, len(names)) for t in d["trees"]]
        return GbtModel(
            base_score=float(d["base_score"]),
            trees=trees,
            params=params,
            schema_fingerprint=str(d["schema_fingerprint"]),
            feature_names=names,
            importance={str(k): float(v) for k, v in d["importance"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed model JSON: {exc!r}") from exc


def save_model(model: GbtModel, path, created_at: str | None = None) -> None:
    write_atomic(path, dumps_model(model, created_at))


def load_model(path) -> GbtModel:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ModelError(f"cannot read model file {path}: {exc}") from exc
    return loads_model(text)
