"""SGD with momentum, the epoch loop, accuracy, stratified k-fold runs and the results table."""
from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetManifest, normalize_batch, stratified_kfold
from .model import ConfigError, Model, NetworkConfig, build_model, init_parameters, predict_class
from .tensor import Parameter, ShapeError

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

# Row labels used in the results table for each network variant.
METHOD_NAMES = {
    "baseline_lenet": "Proposed LeNet based network",
    "midres_classifier": "Proposed MidResBlock classifier network",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    normalize: bool = True
    precision: str = "float64"

    def __post_init__(self):
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if isinstance(self.batch_size, bool) or not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[Parameter], learning_rate: float, momentum: float) -> "OptimizerState":
        ids = [p.id for p in params]
        if len(set(ids)) != len(ids):
            raise ValueError("parameter ids must be unique")
        return cls(learning_rate, momentum, {p.id: np.zeros_like(p.data) for p in params})


def sgd_momentum_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """Classic momentum: ``v = momentum * v + grad``; ``value -= learning_rate * v``."""
    for p in params:
        v = state.velocity.get(p.id)
        if v is None:
            raise KeyError(f"optimizer has no velocity for parameter {p.id!r}; was it built for another model?")
        v *= state.momentum
        v += p.grad
        p.data -= state.learning_rate * v


# ---------------------------------------------------------------------------
# loops


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None,
                 shuffle: bool = True) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if shuffle and rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_dataset(images: np.ndarray, labels: np.ndarray) -> None:
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")


def train_epoch(model: Model, images: np.ndarray, labels: np.ndarray, state: OptimizerState,
                rng: np.random.Generator, batch_size: int = 16, shuffle: bool = True) -> float:
    """One pass over shuffled mini-batches; returns the mean of the per-batch losses."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    _check_dataset(images, labels)
    params = model.parameters()
    losses = []
    for idx in iter_batches(len(images), batch_size, rng, shuffle):
        logits = model.forward(images[idx])
        loss, _ = T.softmax_cross_entropy(logits, labels[idx])
        model.zero_grad()
        T.backward(loss)
        sgd_momentum_step(params, state)
        losses.append(loss.item())
    return float(np.mean(losses))


def fit(model: Model, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
        on_epoch: Callable[[int, float], None] | None = None) -> tuple[Model, list[float]]:
    """Train for ``config.epochs`` epochs; returns the model and its per-epoch mean loss."""
    history: list[float] = []
    if config.epochs == 0:
        return model, history
    state = OptimizerState.for_params(model.parameters(), config.learning_rate, config.momentum)
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs):
        loss = train_epoch(model, images, labels, state, rng, config.batch_size, config.shuffle)
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss diverged at epoch {epoch + 1}: {loss}")
        history.append(loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, loss)
    return model, history


def evaluate_accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of correct argmax predictions."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    _check_dataset(images, labels)
    correct = 0
    for start in range(0, len(images), batch_size):
        pred = predict_class(model, images[start:start + batch_size])
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / len(images)


def evaluate_loss(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    with T.no_grad():
        loss, _ = T.softmax_cross_entropy(model.forward(images), labels)
    return loss.item()


def prepare_images(images: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Apply the configured preprocessing and precision; identical for training and evaluation."""
    x = normalize_batch(images) if config.normalize else np.asarray(images)
    return x.astype(config.dtype)


# ---------------------------------------------------------------------------
# k-fold protocol


@dataclass
class FoldReport:
    fold_index: int
    train_size: int
    val_size: int
    per_epoch_loss: list[float]
    correct: int

    @property
    def val_accuracy(self) -> float:
        return self.correct / self.val_size


@dataclass
class KFoldResult:
    variant: str
    folds: list[FoldReport]

    @property
    def mean_accuracy(self) -> float:
        return sum(f.val_accuracy for f in self.folds) / len(self.folds)

    def folds_csv(self) -> str:
        buf = io.StringIO()
        buf.write("fold,val_accuracy\n")
        for f in self.folds:
            buf.write(f"{f.fold_index},{f.val_accuracy!r}\n")
        return buf.getvalue()


def kfold_run(manifest: DatasetManifest, net_config: NetworkConfig, train_config: TrainConfig,
              k: int = 5) -> KFoldResult:
    """Stratified k-fold: a freshly initialized model per fold, seeded ``seed + fold_index``."""
    if net_config.input_channels != manifest.shape[0] or \
            (net_config.input_size, net_config.input_size) != tuple(manifest.shape[1:]):
        raise ShapeError(f"manifest images {list(manifest.shape)} do not fit network input "
                         f"[{net_config.input_channels}, {net_config.input_size}, {net_config.input_size}]")
    if net_config.num_classes != manifest.num_classes:
        raise ConfigError(f"network has {net_config.num_classes} classes, manifest has {manifest.num_classes}")
    assignment = stratified_kfold(manifest, k, train_config.seed)
    images = prepare_images(manifest.load_images(), train_config)
    labels = manifest.labels
    reports = []
    for fold in range(k):
        tr, va = assignment.train_indices(fold), assignment.val_indices(fold)
        fold_seed = train_config.seed + fold
        model = init_parameters(build_model(net_config, train_config.dtype), fold_seed)
        _, history = fit(model, images[tr], labels[tr], train_config.replace(seed=fold_seed))
        pred = np.concatenate([predict_class(model, images[va[i:i + 64]]) for i in range(0, len(va), 64)])
        correct = int((pred == labels[va]).sum())
        reports.append(FoldReport(fold, len(tr), len(va), history, correct))
        log.info("%s fold %d: val accuracy %.4f", net_config.variant, fold, correct / len(va))
    return KFoldResult(net_config.variant, reports)


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class Table:
    text: str
    csv: str


def report_table(results: Mapping[str, float] | Sequence[tuple[str, float]]) -> Table:
    """Method/accuracy comparison table; accuracies are fractions in [0, 1], shown as percentages."""
    rows = list(results.items()) if isinstance(results, Mapping) else list(results)
    cells = [(name, f"{100 * acc:.2f}") for name, acc in rows]
    width = max([len("Method")] + [len(name) for name, _ in cells])
    lines = [f"{'Method':<{width}}  {'Accuracy':>8}"]
    lines += [f"{name:<{width}}  {pct + '%':>8}" for name, pct in cells]
    out = io.StringIO()
    out.write("method,accuracy_percent\n")
    for name, pct in cells:
        out.write(f"{_csv_field(name)},{pct}\n")
    return Table("\n".join(lines) + "\n", out.getvalue())


def _csv_field(s: str) -> str:
    return f'"{s.replace(chr(34), chr(34) * 2)}"' if any(ch in s for ch in ',"\n') else s


def loss_csv(history: Sequence[float]) -> str:
    lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(history, start=1)]
    return "\n".join(lines) + "\n"
