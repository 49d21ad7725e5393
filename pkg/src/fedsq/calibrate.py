"""Centralized pre-federation phase: pretraining and schedule selection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nncore
from .errors import ConfigurationError, FormatError, InputError
from .nncore import ModelArch, ModelParams
from .partition import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Per-parameterized-layer trainability; the head is the last entry."""

    trainable: tuple

    def __post_init__(self):
        flags = tuple(bool(f) for f in self.trainable)
        object.__setattr__(self, "trainable", flags)
        if not flags:
            raise ConfigurationError("empty schedule")
        if not flags[-1]:
            raise ConfigurationError("schedule must keep the head trainable")

    @classmethod
    def last(cls, n_layers: int, n_trainable: int) -> "Schedule":
        """Only the last ``n_trainable`` parameterized layers are trainable."""
        if not 1 <= n_trainable <= n_layers:
            raise ConfigurationError(f"cannot train {n_trainable} of {n_layers} layers")
        return cls((False,) * (n_layers - n_trainable) + (True,) * n_trainable)

    @classmethod
    def all_trainable(cls, n_layers: int) -> "Schedule":
        return cls.last(n_layers, n_layers)

    @classmethod
    def from_bitstring(cls, bits: str) -> "Schedule":
        if not bits or set(bits) - {"0", "1"}:
            raise ConfigurationError(f"bad schedule bitstring {bits!r}")
        return cls(tuple(c == "1" for c in bits))

    def bitstring(self) -> str:
        return "".join("1" if f else "0" for f in self.trainable)

    @property
    def n_trainable(self) -> int:
        return sum(self.trainable)

    def __len__(self):
        return len(self.trainable)


@dataclass(frozen=True)
class TrainConfig:
    """Centralized SGD settings shared by pretraining and candidate fine-tunes."""

    lr: float = 1e-2
    wd: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    finetune_epochs: int = 5
    val_fraction: float = 0.3


@dataclass(frozen=True)
class CalibrationReport:
    candidates: tuple  # (Schedule, probe accuracy) in evaluation order
    selected: Schedule
    stop_reason: str  # "no-improvement" | "all-unfrozen"
    finetune_epochs: int = 5
    seed: int = 0

    @property
    def selected_index(self) -> int:
        return [s for s, _ in self.candidates].index(self.selected)

    def to_dict(self) -> dict:
        return {
            "candidates": [{"schedule": s.bitstring(), "accuracy": acc} for s, acc in self.candidates],
            "selected": self.selected.bitstring(),
            "selected_index": self.selected_index,
            "stop_reason": self.stop_reason,
            "finetune_epochs": self.finetune_epochs,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        cands = tuple((Schedule.from_bitstring(c["schedule"]), float(c["accuracy"])) for c in d["candidates"])
        return cls(cands, Schedule.from_bitstring(d["selected"]), d["stop_reason"],
                   int(d.get("finetune_epochs", 5)), int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
            raise FormatError(f"{path}: not a calibration report: {exc}") from exc


def pretrain(arch: ModelArch, source_data: Dataset, epochs: int, cfg: TrainConfig = TrainConfig()) -> ModelParams:
    """Centralized training from a fresh He-uniform init; stands in for a public checkpoint."""
    rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    params = nncore.init_params(arch, rng)
    for epoch in range(epochs):
        params, losses = nncore.minibatch_sgd(
            arch, params, source_data.inputs, source_data.labels,
            lr=cfg.lr, wd=cfg.wd, batch_size=cfg.batch_size, epochs=1, rng=rng,
        )
        log.debug("pretrain epoch %d: mean loss %.6f", epoch + 1, float(np.mean(losses)))
    return params


def evaluate(arch: ModelArch, params: ModelParams, data: Dataset) -> tuple:
    """(accuracy, mean loss) of the plain ReLU network."""
    logits, _ = nncore.forward(arch, params, data.inputs)
    return nncore.accuracy(logits, data.labels), nncore.loss_ce(logits, data.labels)


def finetune(w_pt: ModelParams, data: Dataset, schedule: Schedule, epochs: int, cfg: TrainConfig) -> ModelParams:
    rng = np.random.default_rng([cfg.seed, 0x5C4ED])
    params, _ = nncore.minibatch_sgd(
        w_pt.arch, w_pt, data.inputs, data.labels, lr=cfg.lr, wd=cfg.wd,
        batch_size=cfg.batch_size, epochs=epochs, rng=rng, trainable_mask=schedule,
    )
    return params


def obtain_schedule(w_pt: ModelParams, probe: Dataset, cfg: TrainConfig = TrainConfig()) -> CalibrationReport:
    """Progressive unfreezing from the head plus last block towards the input.

    Each candidate is fine-tuned from ``w_pt`` for ``cfg.finetune_epochs`` on
    the calibration-train part of ``probe`` (same seed for all candidates) and
    scored on the calibration-val part. The search stops at the first
    candidate that does not strictly beat the best so far; ties keep the
    cheaper schedule.
    """
    if len(probe) == 0:
        raise InputError("empty probe set")
    arch = w_pt.arch
    n_layers = len(arch.param_layers)
    cal_val, cal_train = probe.split(cfg.val_fraction, cfg.seed)
    if len(cal_train) == 0 or len(cal_val) == 0:
        raise InputError(f"probe set of {len(probe)} samples is too small to split")

    candidates = []
    best, best_acc = None, -1.0
    stop_reason = "all-unfrozen"
    for k in range(min(2, n_layers), n_layers + 1):
        schedule = Schedule.last(n_layers, k)
        tuned = finetune(w_pt, cal_train, schedule, cfg.finetune_epochs, cfg)
        acc, _ = evaluate(arch, tuned, cal_val)
        candidates.append((schedule, acc))
        log.info("calibration candidate %s: probe accuracy %.4f", schedule.bitstring(), acc)
        if acc > best_acc:
            best, best_acc = schedule, acc
        else:
            stop_reason = "no-improvement"
            break
    return CalibrationReport(tuple(candidates), best, stop_reason, cfg.finetune_epochs, cfg.seed)
