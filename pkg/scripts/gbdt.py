"""
Histogram gradient-boosted regression trees.

Trees are grown leaf-wise (always expanding the leaf with the best gain)
on quantile-binned features. Objectives:

- tweedie: log link, prediction = exp(raw score), variance power p in (1, 2)
- squared_error: identity link

Split gain is the second-order formula G^2/(H + 1); leaf values are
-G/(H + 1) scaled by the learning rate. Missing values (NaN) fall in a
reserved bin and follow the direction learned at each split.
"""

import dataclasses
import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np

from errors import ConfigError, MissingSeriesError, SchemaMismatchError, ValidationError

logger = logging.getLogger(__name__)

# Configuration
LAMBDA_L2 = 1.0
SCORE_CLAMP = 30.0
MIN_SUM_HESSIAN = 1e-3
OBJECTIVES = ("tweedie", "squared_error")
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GbdtParams:
    objective: str = "tweedie"
    tweedie_variance_power: float = 1.1
    learning_rate: float = 0.1
    num_leaves: int = 31
    min_data_in_leaf: int = 20
    feature_fraction: float = 1.0
    subsample: float = 1.0
    subsample_freq: int = 0
    max_bin: int = 100
    n_estimators: int = 100
    rng_seed: int = 0
    max_depth: Optional[int] = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got '{self.objective}'")
        if self.objective == "tweedie" and not 1.0 < self.tweedie_variance_power < 2.0:
            raise ConfigError("tweedie_variance_power must lie in (1, 2)")
        if self.num_leaves < 2:
            raise ConfigError("num_leaves must be >= 2")
        if not 2 <= self.max_bin <= 65534:
            raise ConfigError("max_bin must lie in 2..65534")
        if self.min_data_in_leaf < 1:
            raise ConfigError("min_data_in_leaf must be >= 1")
        for name in ("feature_fraction", "subsample"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.learning_rate <= 0 or self.n_estimators < 0:
            raise ConfigError("learning_rate must be > 0 and n_estimators >= 0")

    @classmethod
    def from_dict(cls, values: Dict) -> "GbdtParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown GBDT parameters {unknown}")
        return cls(**values)


def tweedie_loss(y, y_hat, p: float = 1.5):
    """Per-example Tweedie loss -y*yhat^(1-p)/(1-p) + yhat^(2-p)/(2-p)."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if np.any(y_hat <= 0):
        raise ValueError("tweedie_loss is only defined for y_hat > 0")
    return -y * y_hat ** (1.0 - p) / (1.0 - p) + y_hat ** (2.0 - p) / (2.0 - p)


def tweedie_loss_from_score(y, score, p: float):
    score = np.clip(np.asarray(score, dtype=float), -SCORE_CLAMP, SCORE_CLAMP)
    return -y * np.exp((1.0 - p) * score) / (1.0 - p) + np.exp((2.0 - p) * score) / (2.0 - p)


def tweedie_grad_hess(y, score, p: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and hessian of the Tweedie loss w.r.t. the log-link score."""
    y = np.asarray(y, dtype=float)
    score = np.clip(np.asarray(score, dtype=float), -SCORE_CLAMP, SCORE_CLAMP)
    a = np.exp((1.0 - p) * score)
    b = np.exp((2.0 - p) * score)
    return -y * a + b, -(1.0 - p) * y * a + (2.0 - p) * b


def _gradients(y: np.ndarray, scores: np.ndarray, params: GbdtParams) -> Tuple[np.ndarray, np.ndarray]:
    if params.objective == "tweedie":
        return tweedie_grad_hess(y, scores, params.tweedie_variance_power)
    return scores - y, np.ones_like(scores)


def objective_loss(y: np.ndarray, scores: np.ndarray, params: GbdtParams) -> float:
    """Mean training objective at the given raw scores."""
    if params.objective == "tweedie":
        return float(np.mean(tweedie_loss_from_score(y, scores, params.tweedie_variance_power)))
    return float(np.mean(0.5 * (y - scores) ** 2))


@dataclass(frozen=True)
class BinMapper:
    """Per-feature upper bin edges; bin = number of edges strictly below x."""

    edges: Tuple[np.ndarray, ...]
    max_bin: int

    @property
    def n_bins(self) -> int:
        return self.max_bin + 1

    @property
    def missing_bin(self) -> int:
        return self.max_bin

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        binned = np.empty(X.shape, dtype=np.uint16)
        for j, edges in enumerate(self.edges):
            col = X[:, j]
            binned[:, j] = np.searchsorted(edges, col, side="left")
            binned[np.isnan(col), j] = self.missing_bin
        return binned


@dataclass(frozen=True)
class BinnedDataset:
    binned: np.ndarray
    mapper: BinMapper


def _feature_edges(col: np.ndarray, max_bin: int) -> np.ndarray:
    values = col[~np.isnan(col)]
    if len(values) == 0:
        return np.empty(0)
    distinct = np.unique(values)
    if len(distinct) <= max_bin:
        return distinct[:-1]
    quantiles = np.quantile(values, np.linspace(0.0, 1.0, max_bin + 1)[1:-1])
    edges = np.unique(quantiles)
    return edges[edges < distinct[-1]]


def build_histograms(X: np.ndarray, max_bin: int) -> BinnedDataset:
    """
    Quantile-bin every feature into at most max_bin bins plus a missing bin.

    Features with no more than max_bin distinct values are binned losslessly.
    """
    if max_bin < 2:
        raise ValueError("max_bin must be >= 2")
    X = np.asarray(X, dtype=float)
    if np.isinf(X).any():
        raise ValueError("feature matrix contains infinite values")
    mapper = BinMapper(edges=tuple(_feature_edges(X[:, j], max_bin) for j in range(X.shape[1])),
                       max_bin=max_bin)
    return BinnedDataset(binned=mapper.transform(X), mapper=mapper)


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    threshold_bin: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            idx = np.flatnonzero(self.feature[node] >= 0)
            if len(idx) == 0:
                return self.value[node]
            nd = node[idx]
            x = X[idx, self.feature[nd]]
            go_left = np.where(np.isnan(x), self.missing_left[nd], x <= self.threshold[nd])
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])

    def predict_binned(self, binned: np.ndarray, missing_bin: int) -> np.ndarray:
        node = np.zeros(binned.shape[0], dtype=np.int64)
        while True:
            idx = np.flatnonzero(self.feature[node] >= 0)
            if len(idx) == 0:
                return self.value[node]
            nd = node[idx]
            b = binned[idx, self.feature[nd]]
            go_left = np.where(b == missing_bin, self.missing_left[nd], b <= self.threshold_bin[nd])
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])


@dataclass(frozen=True)
class _Split:
    gain: float
    feature: int
    bin: int
    missing_left: bool


def _leaf_histogram(binned: np.ndarray, idx: np.ndarray, feats: np.ndarray,
                    g: np.ndarray, h: np.ndarray, n_bins: int):
    n_feats = len(feats)
    flat = (binned[np.ix_(idx, feats)].astype(np.int64) + np.arange(n_feats) * n_bins).ravel()
    size = n_feats * n_bins
    hist_g = np.bincount(flat, weights=np.repeat(g[idx], n_feats), minlength=size)
    hist_h = np.bincount(flat, weights=np.repeat(h[idx], n_feats), minlength=size)
    hist_c = np.bincount(flat, minlength=size)
    shape = (n_feats, n_bins)
    return hist_g.reshape(shape), hist_h.reshape(shape), hist_c.reshape(shape)


def _best_split(hist, G: float, H: float, N: int, params: GbdtParams) -> Optional[_Split]:
    """
    Best (feature, bin, missing direction) for one leaf.

    Ties resolve to the lowest feature position, then the lowest bin, then
    missing-goes-right.
    """
    hist_g, hist_h, hist_c = hist
    n_regular = hist_g.shape[1] - 1
    cum_g = np.cumsum(hist_g[:, :n_regular], axis=1)
    cum_h = np.cumsum(hist_h[:, :n_regular], axis=1)
    cum_c = np.cumsum(hist_c[:, :n_regular], axis=1)
    miss_g, miss_h, miss_c = hist_g[:, n_regular:], hist_h[:, n_regular:], hist_c[:, n_regular:]

    left_g = np.stack([cum_g, cum_g + miss_g], axis=2)
    left_h = np.stack([cum_h, cum_h + miss_h], axis=2)
    left_c = np.stack([cum_c, cum_c + miss_c], axis=2)
    right_g, right_h, right_c = G - left_g, H - left_h, N - left_c

    gain = (left_g ** 2 / (left_h + LAMBDA_L2) + right_g ** 2 / (right_h + LAMBDA_L2)
            - G ** 2 / (H + LAMBDA_L2))
    valid = ((left_c >= params.min_data_in_leaf) & (right_c >= params.min_data_in_leaf)
             & (left_h >= MIN_SUM_HESSIAN) & (right_h >= MIN_SUM_HESSIAN))
    gain = np.where(valid, gain, -np.inf)

    best = int(np.argmax(gain))
    best_gain = gain.flat[best]
    if not np.isfinite(best_gain) or best_gain <= 0.0:
        return None
    pos, b, direction = np.unravel_index(best, gain.shape)
    return _Split(gain=float(best_gain), feature=int(pos), bin=int(b), missing_left=bool(direction))


class _TreeGrower:
    def __init__(self):
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.threshold_bin: List[int] = []
        self.missing_left: List[bool] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []
        self.depth: List[int] = []

    def add_leaf(self, depth: int) -> int:
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.threshold_bin.append(-1)
        self.missing_left.append(False)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.depth.append(depth)
        return len(self.feature) - 1

    def freeze(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=float),
            threshold_bin=np.array(self.threshold_bin, dtype=np.int64),
            missing_left=np.array(self.missing_left, dtype=bool),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=float),
        )


def _grow_tree(data: BinnedDataset, g: np.ndarray, h: np.ndarray, rows: np.ndarray,
               feats: np.ndarray, params: GbdtParams) -> Tree:
    binned, mapper = data.binned, data.mapper
    n_bins = mapper.n_bins
    grower = _TreeGrower()
    root = grower.add_leaf(0)
    leaves: Dict[int, np.ndarray] = {root: rows}
    hists = {root: _leaf_histogram(binned, rows, feats, g, h, n_bins)}
    heap: List[Tuple[float, int, _Split]] = []

    def consider(node: int):
        idx = leaves[node]
        if params.max_depth is not None and grower.depth[node] >= params.max_depth:
            return
        if len(idx) < 2 * params.min_data_in_leaf:
            return
        split = _best_split(hists[node], float(g[idx].sum()), float(h[idx].sum()), len(idx), params)
        if split is not None:
            heapq.heappush(heap, (-split.gain, node, split))

    consider(root)
    n_leaves = 1
    while heap and n_leaves < params.num_leaves:
        _, node, split = heapq.heappop(heap)
        idx = leaves.pop(node)
        parent_hist = hists.pop(node)
        feature = int(feats[split.feature])
        col = binned[idx, feature]
        go_left = np.where(col == mapper.missing_bin, split.missing_left, col <= split.bin)

        edges = mapper.edges[feature]
        left = grower.add_leaf(grower.depth[node] + 1)
        right = grower.add_leaf(grower.depth[node] + 1)
        grower.feature[node] = feature
        grower.threshold[node] = float(edges[split.bin]) if split.bin < len(edges) else np.inf
        grower.threshold_bin[node] = split.bin
        grower.missing_left[node] = split.missing_left
        grower.left[node] = left
        grower.right[node] = right

        leaves[left], leaves[right] = idx[go_left], idx[~go_left]
        small, large = (left, right) if len(leaves[left]) <= len(leaves[right]) else (right, left)
        hists[small] = _leaf_histogram(binned, leaves[small], feats, g, h, n_bins)
        hists[large] = tuple(p - c for p, c in zip(parent_hist, hists[small]))
        consider(left)
        consider(right)
        n_leaves += 1

    for node, idx in leaves.items():
        grower.value[node] = -g[idx].sum() / (h[idx].sum() + LAMBDA_L2) * params.learning_rate
    return grower.freeze()


@dataclass
class GbdtModel:
    params: GbdtParams
    trees: List[Tree]
    base_score: float
    schema_hash: str
    columns: List[str]
    train_loss: List[float] = field(default_factory=list)

    def _features(self, matrix) -> np.ndarray:
        if isinstance(matrix, np.ndarray):
            if matrix.shape[1] != len(self.columns):
                raise SchemaMismatchError(
                    f"expected {len(self.columns)} feature columns, got {matrix.shape[1]}")
            return matrix
        if matrix.schema_hash != self.schema_hash:
            raise SchemaMismatchError(
                f"feature schema {matrix.schema_hash} differs from the fitted schema {self.schema_hash}")
        return matrix.values

    def raw_score(self, matrix, n_trees: Optional[int] = None) -> np.ndarray:
        X = self._features(matrix)
        score = np.full(X.shape[0], self.base_score)
        for tree in self.trees[:n_trees]:
            score += tree.predict(X)
        return score

    def predict(self, matrix, n_trees: Optional[int] = None) -> np.ndarray:
        score = self.raw_score(matrix, n_trees)
        if self.params.objective == "tweedie":
            return np.exp(np.clip(score, -SCORE_CLAMP, SCORE_CLAMP))
        return score

    def save(self, path: Path) -> Path:
        return save_artifact(self, path, "gbdt")

    @staticmethod
    def load(path: Path) -> "GbdtModel":
        return load_artifact(path, "gbdt")


def save_artifact(model, path: Path, kind: str) -> Path:
    """Versioned joblib dump of a fitted model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({"format_version": MODEL_FORMAT_VERSION, "kind": kind, "model": model}, path)
    return path


def load_artifact(path: Path, kind: str):
    payload = joblib.load(Path(path))
    if payload.get("format_version") != MODEL_FORMAT_VERSION or payload.get("kind") != kind:
        raise SchemaMismatchError(
            f"{path}: expected a {kind} model v{MODEL_FORMAT_VERSION}, found "
            f"{payload.get('kind')} v{payload.get('format_version')}")
    return payload["model"]


def _unpack(matrix) -> Tuple[np.ndarray, np.ndarray, List[str], str]:
    if isinstance(matrix, tuple):
        X, y = matrix
        X = np.asarray(X, dtype=float)
        return X, np.asarray(y, dtype=float), [f"f{j}" for j in range(X.shape[1])], "array"
    return matrix.values, matrix.target, list(matrix.columns), matrix.schema_hash


def fit(matrix, params: GbdtParams) -> GbdtModel:
    """
    Boost ``params.n_estimators`` trees on a FeatureMatrix (or an (X, y) tuple).

    Row bagging redraws every ``subsample_freq`` iterations; features are
    sampled per tree. Both draw from one generator seeded with rng_seed.
    """
    X, y, columns, schema = _unpack(matrix)
    n, n_features = X.shape
    if n == 0 or n_features == 0:
        raise ValidationError("cannot fit a GBDT on an empty feature matrix")
    if np.isnan(y).any():
        raise ValidationError("training targets contain missing values")
    if params.objective == "tweedie" and (y < 0).any():
        raise ValidationError("tweedie objective needs non-negative targets")

    data = build_histograms(X, params.max_bin)
    rng = np.random.default_rng(params.rng_seed)
    mean = float(np.mean(y))
    base = float(np.log(max(mean, 1e-12))) if params.objective == "tweedie" else mean

    scores = np.full(n, base)
    trees: List[Tree] = []
    losses: List[float] = []
    rows = np.arange(n)
    bagging = params.subsample < 1.0 and params.subsample_freq > 0
    n_sampled = max(1, int(round(params.feature_fraction * n_features)))

    for iteration in range(params.n_estimators):
        if bagging and iteration % params.subsample_freq == 0:
            size = max(1, int(round(params.subsample * n)))
            rows = np.sort(rng.choice(n, size=size, replace=False))
        if n_sampled < n_features:
            feats = np.sort(rng.choice(n_features, size=n_sampled, replace=False))
        else:
            feats = np.arange(n_features)
        g, h = _gradients(y, scores, params)
        tree = _grow_tree(data, g, h, rows, feats, params)
        scores += tree.predict_binned(data.binned, data.mapper.missing_bin)
        trees.append(tree)
        losses.append(objective_loss(y, scores, params))

    logger.info("GBDT fitted: %d rows, %d features, %d trees (%s), final loss %.6f",
                n, n_features, len(trees), params.objective, losses[-1] if losses else float("nan"))
    return GbdtModel(params=params, trees=trees, base_score=base, schema_hash=schema,
                     columns=columns, train_loss=losses)


@dataclass
class PerStoreGbdt:
    """One GbdtModel per store; rows are routed by their store id."""

    models: Dict[str, GbdtModel]

    @property
    def schema_hash(self) -> str:
        return next(iter(self.models.values())).schema_hash

    def predict(self, matrix) -> np.ndarray:
        out = np.empty(len(matrix))
        unknown = ~np.isin(matrix.stores, list(self.models))
        if unknown.any():
            raise MissingSeriesError(f"no model for store {matrix.stores[unknown][0]}")
        for store, model in self.models.items():
            mask = matrix.stores == store
            if mask.any():
                out[mask] = model.predict(matrix.select(mask))
        return out

    def save(self, path: Path) -> Path:
        return save_artifact(self, path, "gbdt_per_store")

    @staticmethod
    def load(path: Path) -> "PerStoreGbdt":
        return load_artifact(path, "gbdt_per_store")


def fit_per_store(matrix, params: GbdtParams, stores: Optional[Sequence[str]] = None,
                  per_store_estimators: Optional[Dict[str, int]] = None, jobs: int = 1) -> PerStoreGbdt:
    """Fit one model per store on that store's rows, each with its own tree count."""
    present = sorted(set(matrix.stores.tolist()))
    stores = list(stores) if stores is not None else present
    outside = sorted(set(present) - set(stores))
    if outside:
        raise ValidationError(f"rows for stores {outside} are not covered by the store list")
    per_store_estimators = per_store_estimators or {}

    def fit_store(store: str) -> GbdtModel:
        mask = matrix.stores == store
        if not mask.any():
            raise ValidationError(f"store {store} has no training rows")
        store_params = dataclasses.replace(
            params, n_estimators=int(per_store_estimators.get(store, params.n_estimators)))
        logger.info("Fitting store %s: %d rows, %d trees", store, int(mask.sum()), store_params.n_estimators)
        return fit(matrix.select(mask), store_params)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            fitted = list(pool.map(fit_store, stores))
    else:
        fitted = [fit_store(store) for store in stores]
    return PerStoreGbdt(models=dict(zip(stores, fitted)))
