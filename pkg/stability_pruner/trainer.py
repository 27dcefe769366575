"""SGD-with-momentum training loops: baseline, auxiliary perturbation, fine-tuning."""
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from stability_pruner.errors import ConfigError, DivergenceError, NumericError, ShapeError
from stability_pruner.losses import AUX_FORMS, auxiliary_loss
from stability_pruner.model import ModelGraph
from stability_pruner.tensor import FLOAT64, Tensor, generator

logger = logging.getLogger(__name__)

LOSS_MODES = ("actual", "total")
# decay rules that derive lr breakpoints from (epochs, lr) when no explicit schedule is set
DECAYS = ("none", "step", "last")


@dataclass
class TrainConfig:
    lr: float = 0.05
    lr_schedule: List[Tuple[int, float]] = field(default_factory=list)
    decay: str = "none"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    lam: float = 0.0
    aux_form: str = "abs"

    @classmethod
    def baseline(cls, epochs: int = 10, seed: int = 0, lr: float = 0.05, **kwargs) -> "TrainConfig":
        """lr decays x0.1 at half and three quarters of the run."""
        return cls(lr=lr, decay="step", epochs=epochs, seed=seed, **kwargs)

    @classmethod
    def auxiliary(cls, lam: float = 1e-5, epochs: int = 1, seed: int = 0, **kwargs) -> "TrainConfig":
        kwargs.setdefault("lr", 0.001)
        return cls(weight_decay=0.0, lam=lam, epochs=epochs, seed=seed, **kwargs)

    @classmethod
    def finetune(cls, epochs: int = 3, seed: int = 0, **kwargs) -> "TrainConfig":
        kwargs.setdefault("lr", 0.001)
        return cls(decay="last", epochs=epochs, seed=seed, lam=0.0, **kwargs)

    def validate(self) -> None:
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite value >= 0, got {self.lr}")
        if any(e < 0 or not lr >= 0 for e, lr in self.lr_schedule):
            raise ConfigError(f"invalid lr schedule {self.lr_schedule}")
        if self.decay not in DECAYS:
            raise ConfigError(f"decay must be one of {DECAYS}, got {self.decay!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.aux_form not in AUX_FORMS:
            raise ConfigError(f"aux_form must be one of {AUX_FORMS}, got {self.aux_form!r}")

    def breakpoints(self) -> List[Tuple[int, float]]:
        """(epoch, lr) pairs: the explicit ``lr_schedule`` if set, else the ``decay`` rule
        applied to the current ``epochs`` and ``lr``."""
        if self.lr_schedule:
            return sorted(self.lr_schedule)
        if self.decay == "step":
            half = max(1, self.epochs // 2)
            three_quarters = max(half + 1, (3 * self.epochs) // 4)
            return [(half, self.lr * 0.1), (three_quarters, self.lr * 0.01)]
        if self.decay == "last" and self.epochs > 1:
            return [(self.epochs - 1, self.lr * 0.1)]
        return []

    def lr_at(self, epoch: int) -> float:
        """The last breakpoint at or before ``epoch``, else the base lr."""
        lr = self.lr
        for start, value in self.breakpoints():
            if start <= epoch:
                lr = value
        return lr

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: Optional[float]
    lr: float
    aux_loss: Optional[float]
    wall_time: float


@dataclass
class TrainReport:
    loss_mode: str
    epochs: List[EpochRecord] = field(default_factory=list)
    final_checksum: str = ""

    def to_records(self, phase: str = "train") -> List[Dict]:
        records = [dict(record="epoch", phase=phase, loss_mode=self.loss_mode, **asdict(e)) for e in self.epochs]
        records.append({"record": "train_summary", "phase": phase, "loss_mode": self.loss_mode,
                        "epochs": len(self.epochs), "final_checksum": self.final_checksum})
        return records


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v  (in place)."""
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(param)
        elif v.shape != param.shape:
            raise ShapeError(f"velocity for {name} has shape {v.shape}, parameter {param.shape}")
        v *= momentum
        v += grad
        if weight_decay:
            v += weight_decay * param
        param -= param.dtype.type(lr) * v
    return params, velocity


def _check_finite(arrays: Dict[str, np.ndarray], where: str) -> None:
    for name, value in arrays.items():
        try:
            Tensor(value, FLOAT64).validate_finite(name)
        except NumericError as exc:
            raise DivergenceError(f"{exc} at {where}") from exc


class Trainer:
    """Runs epochs of shuffled mini-batch SGD over a Dataset."""

    def __init__(self, config: TrainConfig, progress: bool = True):
        config.validate()
        self.config = config
        self.progress = progress

    def train(self, model: ModelGraph, dataset, loss_mode: str = "actual",
              test_dataset=None) -> Tuple[ModelGraph, TrainReport]:
        cfg = self.config
        if loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {loss_mode!r}")
        if loss_mode == "total" and cfg.lam <= 0:
            raise ConfigError("loss_mode=total needs lambda > 0")
        if len(dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        lam = cfg.lam if loss_mode == "total" else 0.0

        report = TrainReport(loss_mode=loss_mode)
        velocity: Dict[str, np.ndarray] = {}
        n = len(dataset)
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            start = time.perf_counter()
            order = generator((cfg.seed, epoch)).permutation(n)
            loss_sum, correct = 0.0, 0
            batches = range(0, n, cfg.batch_size)
            bar = tqdm(batches, desc=f"epoch {epoch + 1}/{cfg.epochs}", leave=False,
                       disable=None if self.progress else True)
            for step, offset in enumerate(bar):
                idx = order[offset:offset + cfg.batch_size]
                images, labels = dataset.images[idx], dataset.labels[idx]
                logits, cache = model.forward(images, mode="train")
                data_loss, grads = model.backward(cache, labels, lam, cfg.aux_form)
                _check_finite({"loss": np.array([data_loss])}, f"epoch {epoch}, step {step} (lr {lr})")
                sgd_step(model.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
                loss_sum += data_loss * len(idx)
                correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            bar.close()
            _check_finite(model.params, f"end of epoch {epoch}")

            aux = auxiliary_loss(model, cfg.aux_form)[0] if lam > 0 else None
            train_loss = loss_sum / n + (lam * aux if aux is not None else 0.0)
            test_acc = model.accuracy(test_dataset) if test_dataset is not None and len(test_dataset) else None
            record = EpochRecord(epoch, train_loss, correct / n, test_acc, lr, aux, time.perf_counter() - start)
            report.epochs.append(record)
            logger.info("📈 epoch %d/%d [%s] loss %.4f  train acc %.4f  test acc %s  lr %g  (%.1fs)",
                        epoch + 1, cfg.epochs, loss_mode, record.train_loss, record.train_accuracy,
                        "-" if test_acc is None else f"{test_acc:.4f}", lr, record.wall_time)
        report.final_checksum = model.checksum()
        return model, report

    def finetune(self, model: ModelGraph, dataset, test_dataset=None) -> Tuple[ModelGraph, TrainReport]:
        """Training with the data loss only; the auxiliary term is never applied."""
        return Trainer(replace(self.config, lam=0.0), self.progress).train(
            model, dataset, "actual", test_dataset)


def train(model: ModelGraph, dataset, config: TrainConfig, loss_mode: str = "actual",
          test_dataset=None, progress: bool = True) -> Tuple[ModelGraph, TrainReport]:
    return Trainer(config, progress).train(model, dataset, loss_mode, test_dataset)


def finetune(model: ModelGraph, dataset, config: Optional[TrainConfig] = None,
             test_dataset=None, progress: bool = True) -> Tuple[ModelGraph, TrainReport]:
    return Trainer(config or TrainConfig.finetune(), progress).finetune(model, dataset, test_dataset)


def epoch_medians(report: TrainReport) -> Tuple[float, float]:
    """Median train loss of the first and last quarter of epochs."""
    losses: Sequence[float] = [e.train_loss for e in report.epochs]
    if not losses:
        raise ConfigError("report has no epochs")
    quarter = max(1, len(losses) // 4)
    return float(np.median(losses[:quarter])), float(np.median(losses[-quarter:]))
