"""
Feed-forward regressor with categorical embeddings and snapshot averaging.

Architecture: every categorical code column goes through its own embedding
table (row 0 is the unseen-category row), the embeddings are concatenated
with the imputed and standardized numeric columns, then ReLU hidden layers
and one linear output. With the tweedie objective the output is a log-link
score and predictions are exp(score).

Training is mini-batch SGD with momentum and a step-decay learning rate.
The parameters after each of the last ``snapshots_to_keep`` epochs are kept;
predict_averaged averages over every snapshot of every model in a group.
"""

import copy
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.impute import SimpleImputer
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from errors import ConfigError, SchemaMismatchError, TrainingDivergedError, ValidationError
from gbdt import SCORE_CLAMP, load_artifact, save_artifact, tweedie_grad_hess, tweedie_loss_from_score

logger = logging.getLogger(__name__)

# Configuration
OBJECTIVES = ("squared_error", "tweedie")
DEFAULT_EMBEDDING_DIM = 4


@dataclass(frozen=True)
class MlpConfig:
    hidden: Tuple[int, ...] = (64, 32)
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    embedding_dims: Dict[str, int] = field(default_factory=dict, hash=False)
    objective: str = "squared_error"
    tweedie_variance_power: float = 1.5
    epochs: int = 10
    batch_size: int = 512
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.5
    decay_every: int = 0
    snapshots_to_keep: int = 5
    rng_seed: int = 0
    window_days: Optional[int] = None
    embed_columns: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.embed_columns is not None:
            object.__setattr__(self, "embed_columns", tuple(self.embed_columns))
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"MLP objective must be one of {OBJECTIVES}")
        if any(w < 1 for w in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.embedding_dim < 1 or any(d < 1 for d in self.embedding_dims.values()):
            raise ConfigError("embedding dimensions must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.snapshots_to_keep <= self.epochs:
            raise ConfigError("snapshots_to_keep must lie in 1..epochs")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size and learning_rate must be positive")

    @classmethod
    def from_dict(cls, values: Dict) -> "MlpConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown MLP parameters {unknown}")
        return cls(**values)


def embed_lookup(table: np.ndarray, code) -> np.ndarray:
    """Embedding row for a category code; anything outside the table maps to row 0."""
    code = np.asarray(code)
    valid = (code >= 1) & (code < table.shape[0])
    return table[np.where(valid, code, 0).astype(np.int64)]


@dataclass
class MlpNetwork:
    """Parameters plus forward/backward passes."""

    embed_columns: List[str]
    cardinality: List[int]
    embed_dims: List[int]
    n_numeric: int
    hidden: Tuple[int, ...]
    objective: str
    power: float
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return sum(self.embed_dims) + self.n_numeric

    def initialize(self, rng: np.random.Generator, base_output: float):
        params: Dict[str, np.ndarray] = {}
        for col, card, dim in zip(self.embed_columns, self.cardinality, self.embed_dims):
            params[f"emb:{col}"] = rng.normal(0.0, 0.05, size=(card + 1, dim))
        fan_in = self.input_width
        for i, width in enumerate(self.hidden):
            params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=(fan_in, width))
            params[f"b{i}"] = np.zeros(width)
            fan_in = width
        params["Wout"] = rng.normal(0.0, np.sqrt(1.0 / max(fan_in, 1)), size=(fan_in, 1)) * 0.1
        params["bout"] = np.array([base_output])
        self.params = params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _forward(self, params, codes: np.ndarray, numeric: np.ndarray):
        parts = [embed_lookup(params[f"emb:{col}"], codes[:, j]) for j, col in enumerate(self.embed_columns)]
        parts.append(numeric)
        a = np.hstack(parts) if parts else np.empty((len(numeric), 0))
        activations = [a]
        pre = []
        for i in range(len(self.hidden)):
            z = a @ params[f"W{i}"] + params[f"b{i}"]
            pre.append(z)
            a = np.maximum(z, 0.0)
            activations.append(a)
        out = (a @ params["Wout"])[:, 0] + params["bout"][0]
        return out, activations, pre

    def score(self, codes: np.ndarray, numeric: np.ndarray, params=None) -> np.ndarray:
        return self._forward(params or self.params, codes, numeric)[0]

    def predict(self, codes: np.ndarray, numeric: np.ndarray, params=None) -> np.ndarray:
        out = self.score(codes, numeric, params)
        if self.objective == "tweedie":
            return np.exp(np.clip(out, -SCORE_CLAMP, SCORE_CLAMP))
        return out

    def loss(self, out: np.ndarray, y: np.ndarray) -> float:
        if self.objective == "tweedie":
            return float(np.mean(tweedie_loss_from_score(y, out, self.power)))
        return float(np.mean(0.5 * (out - y) ** 2))

    def loss_and_gradients(self, codes: np.ndarray, numeric: np.ndarray, y: np.ndarray,
                           params=None) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean batch loss and its gradient for every parameter array."""
        params = params or self.params
        out, activations, pre = self._forward(params, codes, numeric)
        n = len(y)
        if self.objective == "tweedie":
            d_out = tweedie_grad_hess(y, out, self.power)[0] / n
        else:
            d_out = (out - y) / n

        grads: Dict[str, np.ndarray] = {}
        grads["bout"] = np.array([d_out.sum()])
        grads["Wout"] = activations[-1].T @ d_out[:, None]
        delta = d_out[:, None] @ params["Wout"].T
        for i in reversed(range(len(self.hidden))):
            delta = delta * (pre[i] > 0)
            grads[f"W{i}"] = activations[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ params[f"W{i}"].T

        offset = 0
        for j, (col, dim) in enumerate(zip(self.embed_columns, self.embed_dims)):
            table = params[f"emb:{col}"]
            code = codes[:, j]
            rows = np.where((code >= 1) & (code < table.shape[0]), code, 0).astype(np.int64)
            grad = np.zeros_like(table)
            np.add.at(grad, rows, delta[:, offset:offset + dim])
            grads[f"emb:{col}"] = grad
            offset += dim
        return self.loss(out, y), grads


@dataclass
class MlpModel:
    network: MlpNetwork
    snapshots: List[Dict[str, np.ndarray]]
    preprocessor: object
    columns: List[str]
    numeric_columns: List[str]
    schema_hash: str
    config: MlpConfig
    epoch_losses: List[float] = field(default_factory=list)

    def _inputs(self, matrix) -> Tuple[np.ndarray, np.ndarray]:
        if matrix.schema_hash != self.schema_hash:
            raise SchemaMismatchError(
                f"feature schema {matrix.schema_hash} differs from the fitted schema {self.schema_hash}")
        return _split_inputs(matrix, self.network.embed_columns, self.numeric_columns, self.preprocessor)

    def predict_snapshots(self, matrix) -> np.ndarray:
        """(n_snapshots, n_rows) predictions."""
        codes, numeric = self._inputs(matrix)
        return np.vstack([self.network.predict(codes, numeric, params) for params in self.snapshots])

    def predict(self, matrix) -> np.ndarray:
        """Final-epoch prediction."""
        codes, numeric = self._inputs(matrix)
        return self.network.predict(codes, numeric, self.snapshots[-1])

    def save(self, path: Path) -> Path:
        return save_artifact(self, path, "mlp")

    @staticmethod
    def load(path: Path) -> "MlpModel":
        return load_artifact(path, "mlp")


def _split_inputs(matrix, embed_columns: Sequence[str], numeric_columns: Sequence[str],
                  preprocessor) -> Tuple[np.ndarray, np.ndarray]:
    index = {c: j for j, c in enumerate(matrix.columns)}
    raw_codes = matrix.values[:, [index[c] for c in embed_columns]] if embed_columns \
        else np.empty((len(matrix), 0))
    codes = np.nan_to_num(raw_codes, nan=0.0).astype(np.int64)
    numeric = matrix.values[:, [index[c] for c in numeric_columns]] if numeric_columns \
        else np.empty((len(matrix), 0))
    if numeric_columns:
        numeric = preprocessor.transform(numeric)
    return codes, numeric


def _window(matrix, window_days: Optional[int]):
    if window_days is None:
        return matrix
    cutoff = matrix.days.max() - window_days + 1
    return matrix.select(matrix.days >= cutoff)


def fit(matrix, config: MlpConfig) -> MlpModel:
    """
    Train one network; deterministic for a given seed.

    Raises TrainingDivergedError if a batch loss turns non-finite.
    """
    matrix = _window(matrix, config.window_days)
    if len(matrix) == 0:
        raise ValidationError("cannot fit an MLP on an empty feature matrix")
    y = matrix.target
    if np.isnan(y).any():
        raise ValidationError("training targets contain missing values")
    if config.objective == "tweedie" and (y < 0).any():
        raise ValidationError("tweedie objective needs non-negative targets")

    if config.embed_columns is not None:
        embed_columns = [c for c in config.embed_columns if c in matrix.columns]
    else:
        embed_columns = [c for c in matrix.columns if c in matrix.categorical]
    numeric_columns = [c for c in matrix.columns if c not in embed_columns]

    preprocessor = None
    if numeric_columns:
        preprocessor = make_pipeline(SimpleImputer(strategy="mean", keep_empty_features=True),
                                     StandardScaler())
        index = {c: j for j, c in enumerate(matrix.columns)}
        preprocessor.fit(matrix.values[:, [index[c] for c in numeric_columns]])
    codes, numeric = _split_inputs(matrix, embed_columns, numeric_columns, preprocessor)

    network = MlpNetwork(
        embed_columns=embed_columns,
        cardinality=[int(matrix.categorical.get(c, codes[:, j].max(initial=0)))
                     for j, c in enumerate(embed_columns)],
        embed_dims=[int(config.embedding_dims.get(c, config.embedding_dim)) for c in embed_columns],
        n_numeric=len(numeric_columns),
        hidden=config.hidden,
        objective=config.objective,
        power=config.tweedie_variance_power,
    )
    rng = np.random.default_rng(config.rng_seed)
    mean = float(np.mean(y))
    network.initialize(rng, np.log(max(mean, 1e-6)) if config.objective == "tweedie" else mean)

    velocity = {k: np.zeros_like(v) for k, v in network.params.items()}
    snapshots: List[Dict[str, np.ndarray]] = []
    epoch_losses: List[float] = []
    n = len(y)
    first_snapshot = config.epochs - config.snapshots_to_keep

    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.decay_every > 0:
            lr *= config.lr_decay ** (epoch // config.decay_every)
        order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            loss, grads = network.loss_and_gradients(codes[rows], numeric[rows], y[rows])
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDivergedError("MLP training diverged", {
                    "epoch": epoch, "batch": batch, "loss": loss, "learning_rate": lr})
            for key, grad in grads.items():
                velocity[key] = config.momentum * velocity[key] - lr * grad
                network.params[key] = network.params[key] + velocity[key]
            total += loss * len(rows)
        epoch_losses.append(total / n)
        if epoch >= first_snapshot:
            snapshots.append(copy.deepcopy(network.params))

    logger.info("MLP fitted: %d rows, %d parameters, %d epochs, final loss %.6f",
                n, network.n_parameters(), config.epochs, epoch_losses[-1] if epoch_losses else float("nan"))
    return MlpModel(
        network=network,
        snapshots=snapshots,
        preprocessor=preprocessor,
        columns=list(matrix.columns),
        numeric_columns=numeric_columns,
        schema_hash=matrix.schema_hash,
        config=config,
        epoch_losses=epoch_losses,
    )


def predict_averaged(models, matrix) -> np.ndarray:
    """Mean prediction over every snapshot of every model."""
    if isinstance(models, MlpModel):
        models = [models]
    stacked = np.vstack([m.predict_snapshots(matrix) for m in models])
    return stacked.mean(axis=0)


@dataclass
class MlpGroup:
    """Several presets of one architecture whose snapshots are averaged together."""

    models: List[MlpModel]

    @property
    def schema_hash(self) -> str:
        return self.models[0].schema_hash

    def predict(self, matrix) -> np.ndarray:
        return predict_averaged(self.models, matrix)

    def save(self, path: Path) -> Path:
        return save_artifact(self, path, "mlp_group")

    @staticmethod
    def load(path: Path) -> "MlpGroup":
        return load_artifact(path, "mlp_group")


def fit_group(matrix, base: MlpConfig, presets: Sequence[Dict] = (), jobs: int = 1) -> MlpGroup:
    """Fit one model per preset (each preset overrides fields of ``base``)."""
    configs = [dataclasses.replace(base, **preset) for preset in presets] or [base]
    if jobs > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, len(configs))) as pool:
            models = list(pool.map(lambda cfg: fit(matrix, cfg), configs))
    else:
        models = [fit(matrix, cfg) for cfg in configs]
    return MlpGroup(models=models)
