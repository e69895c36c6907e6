"""
Training loop for AHP-Net.

Adam over shuffled mini-batches, per-epoch validation PSNR, a CSV report,
periodic checkpoints and resume. Batch order depends only on (seed, epoch),
so two runs with the same seed write identical checkpoints.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from tools.file_tools import read_csv, write_checkpoint, write_csv
from tools.metrics_tools import psnr
from tools.nn_tools import adam_step
from tools.simulation_tools import DatasetSample
from utils.constants import ADAM_DEFAULTS, BATCH_SIZE, EPOCHS
from utils.error_handling import (
    ConvergenceError,
    ErrorSeverity,
    NumericalError,
    ValidationError,
    get_error_metrics,
    log_error_context,
)
from utils.monitoring import get_performance_monitor

from .ahp_net import AhpNet

logger = logging.getLogger(__name__)

REPORT_HEADER = ("epoch", "loss", "val_psnr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    lr: float = ADAM_DEFAULTS["lr"]
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]
    precision: str = "float32"
    seed: int = 0
    checkpoint_every: int = 5
    validation_fraction: float = 0.1

    @classmethod
    def from_section(cls, section) -> "TrainConfig":
        return cls(
            epochs=section.epochs,
            batch_size=section.batch_size,
            lr=section.lr,
            beta1=section.beta1,
            beta2=section.beta2,
            eps=section.eps,
            precision=section.precision,
            seed=section.seed,
            checkpoint_every=section.checkpoint_every,
            validation_fraction=section.validation_fraction,
        )

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_psnr: float
    seconds: float

    def as_row(self) -> Tuple[object, ...]:
        return (self.epoch, f"{self.loss:.8g}", f"{self.val_psnr:.6g}", f"{self.seconds:.3f}")


@dataclass
class TrainingReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    report_path: Optional[Path] = None
    cg_failures: int = 0

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.epochs]


def split_dataset(samples: Sequence[DatasetSample], fraction: float) -> Tuple[List[DatasetSample], List[DatasetSample]]:
    """Hold out the last `fraction` of the samples for validation."""
    samples = list(samples)
    n_val = int(round(len(samples) * fraction))
    if n_val >= len(samples):
        n_val = len(samples) - 1
    return samples[: len(samples) - n_val], samples[len(samples) - n_val:]


def smoothed(values: Sequence[float], window: int = 5) -> List[float]:
    """Trailing moving average (shorter windows at the start)."""
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1): i + 1]
        out.append(float(np.mean(chunk)))
    return out


class Trainer:
    """Owns the optimizer loop for one model."""

    def __init__(
        self,
        model: AhpNet,
        config: TrainConfig,
        checkpoint_dir: Optional[Union[str, Path]] = None,
        progress: bool = False
    ):
        if model.config.stages < 1:
            raise ValidationError("Training needs at least one learnable stage")
        self.model = model
        self.config = config
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.progress = progress
        self.monitor = get_performance_monitor()
        self.cg_failures = 0

    def _batch(self, samples: Sequence[DatasetSample]) -> Tuple[np.ndarray, np.ndarray]:
        dtype = self.model.dtype
        y = np.stack([s.sinogram for s in samples]).astype(dtype)
        truth = np.stack([s.phantom for s in samples]).astype(np.float64)
        return y, truth

    def _dump(self, epoch: int, index: int, y: np.ndarray, truth: np.ndarray) -> Optional[Path]:
        if self.checkpoint_dir is None:
            return None
        path = self.checkpoint_dir / f"nonfinite_epoch{epoch:04d}_batch{index:04d}.ahpc"
        tensors = {"batch.sinogram": y, "batch.truth": truth}
        tensors.update(self.model.state_tensors())
        return write_checkpoint(path, tensors)

    def train_step(self, y: np.ndarray, truth: np.ndarray) -> float:
        """Forward, loss, backward and one Adam update; returns the batch loss."""
        trace = self.model.forward(y, training=True)
        loss = self.model.loss(trace, truth)
        if trace.cg_failures:
            self.cg_failures += trace.cg_failures
            log_error_context(
                ConvergenceError(
                    f"{trace.cg_failures} inversions stopped at the {self.model.config.cg.max_iters}-iteration CG cap",
                    severity=ErrorSeverity.MEDIUM,
                    context={"failures": trace.cg_failures},
                ),
                {"operation": "train_step"},
            )
        if not math.isfinite(loss):
            return loss
        self.model.backward(trace, truth)
        cfg = self.config
        adam_step(self.model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        return loss

    def validate(self, samples: Sequence[DatasetSample]) -> float:
        """Mean PSNR of the network output over the samples (NaN if none)."""
        if not samples:
            return math.nan
        scores = []
        for sample in samples:
            trace = self.model.forward(sample.sinogram, training=False)
            scores.append(psnr(sample.phantom, trace.final[0]))
        return float(np.mean(scores))

    def checkpoint(self, name: str, epoch: int) -> Optional[Path]:
        if self.checkpoint_dir is None:
            return None
        return self.model.save_checkpoint(
            self.checkpoint_dir / name,
            extra={"train.epoch": np.array([epoch], dtype=np.float64)},
        )

    def train(self, samples: Sequence[DatasetSample], start_epoch: int = 0) -> TrainingReport:
        """
        Run epochs start_epoch+1 .. config.epochs.

        Args:
            samples: Training dataset; the last validation_fraction is held out
            start_epoch: Last completed epoch when resuming from a checkpoint

        Returns:
            TrainingReport with one EpochRecord per epoch and the CG failure count

        Raises:
            ValidationError: If samples is empty
        """
        if not samples:
            raise ValidationError("Training dataset is empty")
        cfg = self.config
        train_set, val_set = split_dataset(samples, cfg.validation_fraction)
        logger.info(
            f"Training on {len(train_set)} samples, validating on {len(val_set)}, "
            f"epochs {start_epoch + 1}..{cfg.epochs}, batch {cfg.batch_size}, lr {cfg.lr:g}"
        )
        report = TrainingReport()
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            report.report_path = self.checkpoint_dir / "training_report.csv"
            if start_epoch > 0 and report.report_path.exists():
                report.epochs = [
                    EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["val_psnr"]), float(r["seconds"]))
                    for r in read_csv(report.report_path)
                    if int(r["epoch"]) <= start_epoch
                ]

        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            started = time.perf_counter()
            with self.monitor.track_operation("train_epoch"):
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
                order = rng.permutation(len(train_set))
                batches = [order[i: i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
                if self.progress:
                    batches = tqdm(batches, desc=f"epoch {epoch}", leave=False)
                losses = []
                for index, batch in enumerate(batches):
                    y, truth = self._batch([train_set[i] for i in batch])
                    loss = self.train_step(y, truth)
                    if not math.isfinite(loss):
                        dump = self._dump(epoch, index, y, truth)
                        logger.error(f"Non-finite loss in epoch {epoch}, batch {index}; dump at {dump}")
                        raise NumericalError(
                            f"Non-finite loss in epoch {epoch}, batch {index}",
                            dump_path=str(dump) if dump else None,
                            context={"epoch": epoch, "batch": index},
                        )
                    losses.append(loss)
                val_psnr = self.validate(val_set)
            record = EpochRecord(epoch, float(np.mean(losses)), val_psnr, time.perf_counter() - started)
            report.epochs.append(record)
            logger.info(
                f"Epoch {epoch}/{cfg.epochs}: loss {record.loss:.6g}, "
                f"val PSNR {record.val_psnr:.3f} dB, {record.seconds:.1f}s"
            )
            if report.report_path is not None:
                write_csv(report.report_path, REPORT_HEADER, [r.as_row() for r in report.epochs])
            if epoch % cfg.checkpoint_every == 0:
                path = self.checkpoint(f"epoch_{epoch:04d}.ahpc", epoch)
                if path:
                    report.checkpoints.append(path)

        final = self.checkpoint("final.ahpc", cfg.epochs)
        if final:
            report.checkpoints.append(final)
        report.cg_failures = self.cg_failures
        if self.cg_failures:
            logger.warning(
                f"{self.cg_failures} training inversions missed the CG tolerance; "
                f"errors so far: {get_error_metrics().get_metrics()}"
            )
        self.monitor.log_summary(logger)
        return report
