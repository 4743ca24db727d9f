"""Training loop, cross-validation and last-layer transfer.

Every source of randomness is derived from the config seed: network init uses
``seed``, the epoch shuffle uses ``default_rng([seed, epoch])``, fold ``f`` of a
cross-validation run trains with ``seed + f``, and transfer reinitializes the
final classifier from ``default_rng([seed, TRANSFER_STREAM])``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .architectures import ARCH_KINDS, NetworkGraph, build, freeze_convolutional, parse_width_scale
from .checkpoint import Checkpoint, save_checkpoint
from .data.folds import FoldAssignment, make_folds, validation_size
from .data.storage import Dataset
from .errors import ConfigurationError, ContractError, DataError, NonFiniteError, TrainingDivergedError
from .metrics import EvalReport, ScoredSample, evaluate
from .optim import Adadelta, LossConfig, class_weights_from_counts, total_loss, weighted_bce
from .tensor import Tensor, backward, no_grad

DEFAULT_TRANSFER_EPOCHS = 20
TRANSFER_STREAM = 7
PRETRAIN_STREAM = 11
RECALIBRATE_STREAM = 13
LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    arch_kind: str = "modensenet"
    width_scale: str = "1/8"
    k_folds: int = 5
    validation_fraction: float = 0.025
    max_epochs: int = 150
    batch_size: int = 8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    # derive class weights from each training split instead of loss.class_weights
    auto_class_weights: bool = True
    rho: float = 0.95
    epsilon: float = 1e-6
    lr: float = 1.0
    # recompute batch-norm population statistics on the training set before each validation pass
    recalibrate_bn: bool = True
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.arch_kind not in ARCH_KINDS:
            raise ConfigurationError(f"unknown architecture {self.arch_kind!r}; choose from {', '.join(ARCH_KINDS)}")
        object.__setattr__(self, "width_scale", str(parse_width_scale(self.width_scale)))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if isinstance(self.max_epochs, bool) or not isinstance(self.max_epochs, int) or self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be an integer >= 1, got {self.max_epochs!r}")
        if isinstance(self.batch_size, bool) or not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be an integer >= 2 (batch norm), got {self.batch_size!r}")
        if not isinstance(self.k_folds, int) or self.k_folds < 2:
            raise ConfigurationError(f"k_folds must be an integer >= 2, got {self.k_folds!r}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigurationError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if not 0 < self.rho < 1 or not self.epsilon > 0 or not self.lr > 0:
            raise ConfigurationError("Adadelta needs 0 < rho < 1, epsilon > 0 and lr > 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"]["class_weights"] = list(self.loss.class_weights)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "loss" in doc:
            loss = dict(doc["loss"])
            if "class_weights" in loss:
                loss["class_weights"] = tuple(loss["class_weights"])
            doc["loss"] = LossConfig(**loss)
        return cls(**doc)


@dataclass
class FitResult:
    graph: NetworkGraph
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    epochs_run: int


@dataclass
class CVResult:
    fold_reports: list[EvalReport]
    pooled: EvalReport
    scores: list[ScoredSample]
    fits: list[FitResult]
    folds: FoldAssignment

    def to_json(self) -> dict:
        return {
            "pooled": self.pooled.to_json(),
            "folds": [
                {"fold": i, "best_epoch": f.best_epoch, "epochs_run": f.epochs_run, "report": r.to_json()}
                for i, (f, r) in enumerate(zip(self.fits, self.fold_reports))
            ],
            "scores": [asdict(s) for s in self.scores],
        }


# -- batching and scoring ---------------------------------------------------
def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle split into batches; a trailing batch of one joins the previous batch."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _inputs(graph: NetworkGraph, data: Dataset, idx) -> tuple[Tensor, Tensor]:
    return Tensor(data.small[idx].astype(graph.dtype)), Tensor(data.large[idx].astype(graph.dtype))


def predict(graph: NetworkGraph, data: Dataset, batch_size: int = 32) -> np.ndarray:
    """Final-head malignancy probabilities in inference mode."""
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            prob, _ = graph.forward(*_inputs(graph, data, idx), training=False)
            out.append(prob.data.reshape(-1))
    return np.concatenate(out).astype(np.float64)


def score_dataset(graph: NetworkGraph, data: Dataset, batch_size: int = 32) -> list[ScoredSample]:
    probs = predict(graph, data, batch_size)
    return [ScoredSample(i, float(p), int(y)) for i, p, y in zip(data.ids, probs, data.labels)]


def recalibrate_batch_norm(graph: NetworkGraph, data: Dataset, max_samples: int = 256, seed: int = 0) -> None:
    """Set the running statistics of every unfrozen batch-norm layer to population values.

    One full-batch training-mode pass (no gradients) with momentum 0 stores,
    layer by layer, the mean and biased variance the layer sees over ``data``
    (a seeded subset when larger than ``max_samples``). Frozen layers keep
    their statistics.
    """
    layers = [bn for _, bn in graph.batch_norm_layers() if not bn.frozen]
    if not layers or len(data) < 2:
        return
    idx = np.arange(len(data))
    if len(idx) > max_samples:
        idx = np.sort(np.random.default_rng([seed, RECALIBRATE_STREAM]).choice(idx, max_samples, replace=False))
    saved = [bn.momentum for bn in layers]
    try:
        for bn in layers:
            bn.momentum = 0.0
        with no_grad():
            graph.forward(*_inputs(graph, data, idx), training=True)
    finally:
        for bn, m in zip(layers, saved):
            bn.momentum = m


def _validation_metrics(graph: NetworkGraph, data: Dataset, weights) -> tuple[float, float]:
    probs = predict(graph, data)
    loss = weighted_bce(Tensor(probs), data.labels, weights).item()
    acc = float(np.mean((probs >= 0.5) == (data.labels == 1)))
    return loss, acc


def _weights(config: TrainConfig, data: Dataset) -> tuple[float, float]:
    if not config.auto_class_weights:
        return config.loss.class_weights
    counts = data.class_counts()
    if counts["benign"] == 0 or counts["malignant"] == 0:
        return config.loss.class_weights
    return class_weights_from_counts(counts["benign"], counts["malignant"])


def _check_sets(train_set: Dataset, val_set: Dataset) -> None:
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must both be non-empty")
    if len(train_set) < 2:
        raise DataError("training needs at least two samples (batch norm)")
    overlap = set(train_set.ids) & set(val_set.ids)
    if overlap:
        raise DataError(f"training and validation sets share ids, e.g. {sorted(overlap)[0]!r}")


def write_log(path, log: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in log:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


def loss_trend_flags(losses: Sequence[float], after: int = 5, tolerance: float = 1e-3, window: int = 3) -> list[int]:
    """Epochs (1-based) past ``after`` where the smoothed training loss rose by more than ``tolerance``.

    Smoothing is a trailing moving average over ``window`` epochs. An empty
    list means the loss curve is non-increasing within tolerance.
    """
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    values = np.asarray(losses, dtype=np.float64)
    smooth = np.array([values[max(0, i - window + 1) : i + 1].mean() for i in range(len(values))])
    return [i + 1 for i in range(max(after, 1), len(smooth)) if smooth[i] > smooth[i - 1] + tolerance]


def train_epoch(graph: NetworkGraph, optimizer: Adadelta, config: TrainConfig, train_set: Dataset,
                loss_cfg: LossConfig, epoch: int, step: int = 0) -> tuple[float, float, int]:
    """One seeded pass over ``train_set`` in training mode.

    Returns ``(mean loss, running batch accuracy, last step number)``. Steps
    are numbered from ``step + 1`` so divergence messages count across epochs.
    """
    params = graph.named_parameters()
    total, seen, correct = 0.0, 0, 0
    for idx in epoch_batches(len(train_set), config.batch_size, config.seed, epoch):
        step += 1
        labels = train_set.labels[idx]
        try:
            final, inter = graph.forward(*_inputs(graph, train_set, idx), training=True)
            loss = total_loss(final, inter, labels, loss_cfg, params)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            backward(loss)
            optimizer.step()
        except NonFiniteError as exc:
            raise TrainingDivergedError(
                f"training diverged at epoch {epoch}, step {step}: {exc}", epoch=epoch, step=step
            ) from None
        finally:
            optimizer.zero_grad()
        total += value * len(idx)
        seen += len(idx)
        correct += int(np.sum((final.data.reshape(-1) >= 0.5) == (labels == 1)))
    return total / seen, correct / seen, step


def loss_config(config: TrainConfig, train_set: Dataset) -> LossConfig:
    """The configured loss with class weights resolved for ``train_set``."""
    return replace(config.loss, class_weights=_weights(config, train_set))


def _fit(graph: NetworkGraph, optimizer: Adadelta, config: TrainConfig, train_set: Dataset, val_set: Dataset,
         epochs: int, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Shared epoch loop; keeps the snapshot with the lowest validation loss."""
    _check_sets(train_set, val_set)
    loss_cfg = loss_config(config, train_set)
    log: list[dict] = []
    best: Checkpoint | None = None
    best_loss, best_epoch = np.inf, 0
    step = 0
    for epoch in range(1, epochs + 1):
        train_loss, batch_acc, step = train_epoch(graph, optimizer, config, train_set, loss_cfg, epoch, step)
        if config.recalibrate_bn:
            recalibrate_batch_norm(graph, train_set, seed=config.seed)
        val_loss, val_acc = _validation_metrics(graph, val_set, loss_cfg.class_weights)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc,
               "train_batch_acc": batch_acc}
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best = Checkpoint.from_graph(graph, optimizer, epoch, config.to_json())
    best.load_into(graph, optimizer)
    return FitResult(graph, best, log, best_epoch, epochs)


def new_graph(config: TrainConfig, data: Dataset, seed: int | None = None) -> NetworkGraph:
    return build(config.arch_kind, config.width_scale, config.seed if seed is None else seed,
                 small_shape=data.small_shape, large_shape=data.large_shape)


def train_fold(config: TrainConfig, train_set: Dataset, val_set: Dataset, log_path=None,
               on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train from scratch for ``config.max_epochs``; the returned graph holds the best-validation weights."""
    graph = new_graph(config, train_set)
    optimizer = Adadelta(graph.named_parameters(), config.rho, config.epsilon, config.lr)
    result = _fit(graph, optimizer, config, train_set, val_set, config.max_epochs, on_epoch)
    if log_path is not None:
        write_log(log_path, result.log)
    return result


def load_base(base: Checkpoint, config: TrainConfig, data: Dataset) -> NetworkGraph:
    """Build the network the config describes and fill it from ``base``.

    Any disagreement (architecture, width, patch shape) is an
    IncompatibilityError naming the first mismatched tensor.
    """
    graph = new_graph(config, data)
    base.load_into(graph)
    return graph


def frozen_snapshot(graph: NetworkGraph) -> dict[str, np.ndarray]:
    """Copies of every tensor except the final classifier's."""
    snap = {n: t.data.copy() for n, t in graph.named_parameters().items() if not n.startswith("classifier/")}
    snap.update({f"buffer/{n}": a.copy() for n, a in graph.named_buffers().items()})
    return snap


def transfer(base: Checkpoint, config: TrainConfig, train_set: Dataset, val_set: Dataset,
             epochs: int | None = None, log_path=None, on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Freeze a pretrained network, reinitialize the final classifier and retrain only it.

    ``epochs`` defaults to 20. Raises ContractError if any frozen tensor moved.
    """
    epochs = DEFAULT_TRANSFER_EPOCHS if epochs is None else int(epochs)
    if epochs < 1:
        raise ConfigurationError(f"transfer epochs must be >= 1, got {epochs}")
    graph = load_base(base, config, train_set)
    freeze_convolutional(graph)
    graph.classifier.reset(np.random.default_rng([config.seed, TRANSFER_STREAM]))
    before = frozen_snapshot(graph)
    optimizer = Adadelta(graph.trainable_parameters(), config.rho, config.epsilon, config.lr)
    result = _fit(graph, optimizer, config, train_set, val_set, epochs, on_epoch)
    after = frozen_snapshot(graph)
    moved = [n for n in before if not np.array_equal(before[n], after[n])]
    if moved:
        raise ContractError(f"frozen tensor {moved[0]!r} changed during transfer")
    if log_path is not None:
        write_log(log_path, result.log)
    return result


def pretrain(config: TrainConfig, data: Dataset, validation_fraction: float = 0.1, log_path=None,
             on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Fresh full-data run with a seeded random validation holdout (10% by default)."""
    n_val = validation_size(len(data), validation_fraction)
    order = np.random.default_rng([config.seed, PRETRAIN_STREAM]).permutation(sorted(data.ids))
    val_ids = sorted(order[:n_val].tolist())
    train_ids = sorted(order[n_val:].tolist())
    return train_fold(config, data.subset(train_ids), data.subset(val_ids), log_path, on_epoch)


def cross_validate(config: TrainConfig, data: Dataset, folds: FoldAssignment | None = None, out_dir=None,
                   base: Checkpoint | None = None, transfer_epochs: int | None = None,
                   on_epoch: Callable[[int, dict], None] | None = None) -> CVResult:
    """k-fold evaluation: every id is tested exactly once, pooled over folds.

    With ``base`` each fold runs :func:`transfer` from that checkpoint instead
    of training from scratch.
    """
    if folds is None:
        folds = make_folds(data.ids, config.k_folds, config.seed, config.validation_fraction)
    unknown = set(folds.fold_of) ^ set(data.ids)
    if unknown:
        raise DataError(f"fold assignment and dataset disagree on id {sorted(unknown)[0]!r}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fits, reports, pooled = [], [], []
    for f in range(folds.k):
        train_ids, val_ids, test_ids = folds.split(f)
        leak = set(test_ids) & (set(train_ids) | set(val_ids))
        if leak:
            raise ContractError(f"fold {f}: test id {sorted(leak)[0]!r} is also used for training")
        fold_cfg = replace(config, seed=config.seed + f)
        log_path = out / f"fold{f}_log.csv" if out is not None else None
        hook = (lambda row, f=f: on_epoch(f, row)) if on_epoch is not None else None
        train_set, val_set = data.subset(train_ids), data.subset(val_ids)
        if base is None:
            fit = train_fold(fold_cfg, train_set, val_set, log_path, hook)
        else:
            fit = transfer(base, fold_cfg, train_set, val_set, transfer_epochs, log_path, hook)
        scores = score_dataset(fit.graph, data.subset(test_ids))
        if out is not None:
            save_checkpoint(out / f"fold{f}.ckpt", fit.checkpoint)
        fits.append(fit)
        reports.append(evaluate(scores))
        pooled.extend(scores)
    result = CVResult(reports, evaluate(pooled), pooled, fits, folds)
    if out is not None:
        (out / "report.json").write_text(json.dumps(result.to_json(), indent=2))
    return result
