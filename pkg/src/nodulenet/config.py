"""Run configuration: one JSON document for a train / eval / transfer invocation.

Example::

    {
      "dataset": "data/synth200",
      "out_dir": "runs/modense",
      "train": {"arch_kind": "modensenet", "width_scale": "1/8", "k_folds": 3,
                "validation_fraction": 0.05, "max_epochs": 15, "seed": 42},
      "transfer_epochs": 20
    }

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .optim import LossConfig
from .train import TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_LOSS_KEYS = {f.name for f in fields(LossConfig)}


@dataclass(frozen=True)
class RunConfig:
    dataset: str
    out_dir: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)
    base_checkpoint: str | None = None
    transfer_epochs: int | None = None
    pretrain_validation_fraction: float = 0.1
    report: str | None = None
    roc_csv: str | None = None
    roc_svg: str | None = None

    def output(self, name: str, default: str) -> Path:
        value = getattr(self, name)
        return Path(value) if value else Path(self.out_dir) / default

    def with_train(self, **overrides) -> "RunConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, train=replace(self.train, **overrides)) if overrides else self

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = self.train.to_json()
        return d


_RUN_KEYS = {f.name for f in fields(RunConfig)}
_PATH_KEYS = ("dataset", "out_dir", "base_checkpoint", "report", "roc_csv", "roc_svg")


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key {unknown[0]!r} in {where}; allowed: {', '.join(sorted(allowed))}")


def parse_run_config(doc: dict, base_dir=None) -> RunConfig:
    """Validate a decoded config document; every problem is a ConfigurationError."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    _reject_unknown(doc, _RUN_KEYS, "config")
    if "dataset" not in doc:
        raise ConfigurationError("config needs a 'dataset' path")
    doc = dict(doc)
    train = doc.pop("train", {}) or {}
    if not isinstance(train, dict):
        raise ConfigurationError("'train' must be an object")
    _reject_unknown(train, _TRAIN_KEYS, "train")
    if isinstance(train.get("loss"), dict):
        _reject_unknown(train["loss"], _LOSS_KEYS, "train.loss")
    try:
        train_cfg = TrainConfig.from_json(train)
    except TypeError as exc:
        raise ConfigurationError(f"invalid train section: {exc}") from None
    if base_dir is not None:
        for key in _PATH_KEYS:
            if doc.get(key):
                doc[key] = str(Path(base_dir) / doc[key])
    te = doc.get("transfer_epochs")
    if te is not None and (isinstance(te, bool) or not isinstance(te, int) or te < 1):
        raise ConfigurationError(f"transfer_epochs must be an integer >= 1, got {te!r}")
    pvf = doc.get("pretrain_validation_fraction", 0.1)
    if not isinstance(pvf, (int, float)) or not 0 < pvf < 1:
        raise ConfigurationError(f"pretrain_validation_fraction must be in (0, 1), got {pvf!r}")
    return RunConfig(train=train_cfg, **doc)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(doc, base_dir=path.parent)
