"""
The unrolled network.

Stage 0 inverts with z = 0 and a constant beta. Stage k = 1..K runs its
denoiser on all previous estimates, splits the result into subbands,
predicts beta from the residual norms against x^{k-1} and solves the
inversion block warm-started at x^{k-1}.

All parameters live in one LayerParams with stage-prefixed names:
`stage{k}.denoiser.conv{i}.*`, `stage{k}.predictor.dense{i}.*` or
`stage{k}.predictor.beta`, and `bank.kernels` for a learnable bank.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from tools.file_tools import read_checkpoint, write_checkpoint
from tools.framelet_tools import FilterBank, adjoint, analyze, bspline_kernels, build_filter_bank, kernel_gradient
from tools.geometry_tools import SystemMatrix, back_project, forward_project
from tools.inversion_tools import (
    CgReport,
    CgSettings,
    InversionProblem,
    backward_inversion,
    backward_inversion_kernels,
    solve_inversion,
)
from tools.nn_tools import LayerParams, init_params
from utils.constants import (
    BETA_INIT,
    CNN_CHANNELS,
    CNN_DEPTH,
    HP_MODES,
    INTERMEDIATE_LOSS_WEIGHT,
    MLP_HIDDEN,
    STAGES,
    VARIANTS,
)
from utils.error_handling import ValidationError
from utils.monitoring import get_performance_monitor
from utils.validation import require_choice, require_finite

from .denoiser import DenoiserCache, denoise_backward, denoise_forward, denoiser_specs
from .predictor import (
    PredictorCache,
    constant_backward,
    constant_betas,
    predict_backward,
    predict_betas,
    predictor_specs,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Network shape and inversion settings.

    `stages` counts the learnable stages after stage 0; 0 is valid for
    inference only.
    """
    stages: int = STAGES
    bank_kind: str = "bspline-linear"
    hp_mode: str = "mlp"
    cnn_depth: int = CNN_DEPTH
    cnn_channels: int = CNN_CHANNELS
    mlp_hidden: Tuple[int, int] = MLP_HIDDEN
    beta0: float = BETA_INIT
    mu: float = INTERMEDIATE_LOSS_WEIGHT
    full_gradient: bool = True
    cg: CgSettings = field(default_factory=CgSettings)

    def __post_init__(self):
        if self.stages < 0:
            raise ValidationError(f"stages must be >= 0, got {self.stages}")
        if self.cnn_depth < 2:
            raise ValidationError(f"cnn_depth must be >= 2, got {self.cnn_depth}")
        if not self.beta0 > 0:
            raise ValidationError(f"beta0 must be > 0, got {self.beta0}")
        require_choice("hp_mode", self.hp_mode, HP_MODES)
        build_filter_bank(self.bank_kind, bspline_kernels() if self.bank_kind == "learnable" else None)

    @classmethod
    def from_section(cls, section) -> "ModelConfig":
        """Build from a ModelSection, applying its variant when set."""
        config = cls(
            stages=section.stages,
            bank_kind=section.bank_kind,
            hp_mode=section.hp_mode,
            cnn_depth=section.cnn_depth,
            cnn_channels=section.cnn_channels,
            mlp_hidden=tuple(section.mlp_hidden),
            beta0=section.beta0,
            mu=section.mu,
            full_gradient=section.full_gradient,
            cg=CgSettings(max_iters=section.cg_max_iters, rel_tolerance=section.cg_rel_tolerance),
        )
        return apply_variant(config, section.variant) if section.variant else config

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """
    Switch bank and hyper-parameter mode for an ablation variant.

    no-filter is identity coupling with one learnable lambda per stage,
    i.e. x = (A^T A + lambda I)^-1 (A^T y + lambda x_tilde).

    Args:
        config: Base model configuration
        variant: One of VARIANTS

    Returns:
        A copy of config with bank_kind and hp_mode set for the variant
    """
    require_choice("variant", variant, VARIANTS)
    if variant == "no-filter":
        return replace(config, bank_kind="none", hp_mode="learnable-constant")
    if variant == "gradient":
        return replace(config, bank_kind="gradient")
    if variant == "learnable-filters":
        return replace(config, bank_kind="learnable")
    return replace(config, hp_mode="learnable-constant")


@dataclass
class StageRecord:
    """Everything one stage produced for a batch."""
    x: np.ndarray
    z: np.ndarray
    betas: np.ndarray
    problems: List[InversionProblem]
    reports: List[CgReport]
    x_tilde: Optional[np.ndarray] = None
    norms: Optional[np.ndarray] = None
    data_residual: Optional[np.ndarray] = None
    channel_residual: Optional[np.ndarray] = None
    denoiser_cache: Optional[DenoiserCache] = None
    predictor_cache: Optional[PredictorCache] = None


@dataclass
class ForwardTrace:
    y: np.ndarray
    stages: List[StageRecord]
    training: bool

    @property
    def outputs(self) -> List[np.ndarray]:
        return [stage.x for stage in self.stages]

    @property
    def final(self) -> np.ndarray:
        return self.stages[-1].x

    @property
    def cg_failures(self) -> int:
        return sum(not r.converged for stage in self.stages for r in stage.reports)

    def norms(self) -> List[np.ndarray]:
        """Residual-norm inputs of stages 1..K, usable as frozen norms."""
        return [stage.norms for stage in self.stages[1:]]


class AhpNet:
    """K+1-stage unrolled reconstruction network on a fixed projector."""

    def __init__(self, config: ModelConfig, A: SystemMatrix, seed: int = 0, dtype=np.float64):
        self.config = config
        self.A = A
        self.dtype = np.dtype(dtype)
        if config.bank_kind == "learnable":
            self.bank = build_filter_bank("learnable", bspline_kernels())
        else:
            self.bank = build_filter_bank(config.bank_kind)
        self.params = self._init_params(seed)
        logger.info(
            f"AHP-Net with {config.stages} stages, bank '{config.bank_kind}' ({self.channels} channels), "
            f"hp '{config.hp_mode}', {self.parameter_count()} parameters"
        )

    @property
    def channels(self) -> int:
        return self.bank.channels

    @property
    def image_shape(self) -> Tuple[int, int]:
        return tuple(self.A.geometry.image_size)

    def _init_params(self, seed: int) -> LayerParams:
        cfg = self.config
        specs = []
        for k in range(1, cfg.stages + 1):
            specs += denoiser_specs(f"stage{k}.denoiser", k, cfg.cnn_depth, cfg.cnn_channels)
            if cfg.hp_mode == "mlp":
                specs += predictor_specs(f"stage{k}.predictor", self.channels, cfg.mlp_hidden)
        params = init_params(specs, seed, dtype=self.dtype)
        if cfg.hp_mode == "learnable-constant":
            for k in range(1, cfg.stages + 1):
                params.add(f"stage{k}.predictor.beta", np.full(self.channels, cfg.beta0, dtype=self.dtype))
        if self.bank.learnable:
            params.add("bank.kernels", self.bank.kernel_array().astype(self.dtype))
        return params

    def parameter_count(self) -> int:
        return int(sum(p.value.size for _, p in self.params.items()))

    def _sync_bank(self):
        if self.bank.learnable:
            self.bank.set_kernels(self.params["bank.kernels"])

    # -- stage pieces ------------------------------------------------------

    def _invert(
        self,
        y: np.ndarray,
        z: np.ndarray,
        betas: np.ndarray,
        warm: Optional[np.ndarray]
    ) -> Tuple[np.ndarray, List[InversionProblem], List[CgReport]]:
        monitor = get_performance_monitor()
        xs, problems, reports = [], [], []
        with monitor.track_operation("inversion"):
            for b in range(y.shape[0]):
                problem = InversionProblem(self.A, self.bank, y[b], z[b], betas[b], self.config.cg)
                x, report = solve_inversion(problem, None if warm is None else warm[b])
                monitor.record_metric("cg_iterations", report.iterations, "iterations")
                xs.append(x.astype(self.dtype, copy=False))
                problems.append(problem)
                reports.append(report)
        return np.stack(xs), problems, reports

    def denoise_stage(self, k: int, history: np.ndarray, training: bool) -> Tuple[np.ndarray, np.ndarray, DenoiserCache]:
        """Stage-k denoiser on (batch, k, rows, cols) -> (x_tilde, z, cache)."""
        if not 1 <= k <= self.config.stages:
            raise ValidationError(f"Stage {k} out of range 1..{self.config.stages}")
        x_tilde, cache = denoise_forward(
            self.params, f"stage{k}.denoiser", history, self.config.cnn_depth, training
        )
        z = np.stack([analyze(self.bank, xt) for xt in x_tilde])
        return x_tilde, z, cache

    def predict_betas(self, k: int, norms: np.ndarray) -> Tuple[np.ndarray, Optional[PredictorCache]]:
        """Floored beta of stage k for a batch of residual-norm vectors."""
        prefix = f"stage{k}.predictor"
        if self.config.hp_mode == "learnable-constant":
            betas, _ = constant_betas(self.params, prefix, np.atleast_2d(norms).shape[0])
            return betas, None
        return predict_betas(self.params, prefix, norms)

    def residual_norms(self, y: np.ndarray, x_prev: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(norms (batch, C+1), data residual, channel residual) against x^{k-1}."""
        data = np.stack([y[b] - forward_project(self.A, x_prev[b]) for b in range(y.shape[0])])
        channel = z - np.stack([analyze(self.bank, xp) for xp in x_prev])
        norms = np.concatenate(
            [
                np.sum(data.astype(np.float64) ** 2, axis=(1, 2))[:, None],
                np.sum(channel.astype(np.float64) ** 2, axis=(2, 3)),
            ],
            axis=1,
        )
        return norms, data, channel

    # -- forward / loss / backward ---------------------------------------

    def forward(
        self,
        y: np.ndarray,
        training: bool = False,
        frozen_norms: Optional[List[np.ndarray]] = None
    ) -> ForwardTrace:
        """
        Run all stages on a sinogram or a (batch, views, bins) stack.

        Stage 0 inverts with z = 0 and beta0 on every channel. Stages 1..K
        denoise the estimate history, predict beta from the residual norms
        and invert again, warm-started at the previous estimate.

        Args:
            y: Sinogram (views, bins) or batch (batch, views, bins)
            training: Batch statistics in the denoisers and caches for backward
            frozen_norms: Replacement residual norms for stages 1..K, which
                detaches beta from the current iterates

        Returns:
            ForwardTrace with one StageRecord per stage; `final` is x^K

        Raises:
            ValidationError: On a malformed or non-finite sinogram
        """
        y = np.asarray(y, dtype=self.dtype)
        if y.ndim == 2:
            y = y[None]
        expected = tuple(self.A.geometry.sinogram_shape)
        if y.ndim != 3 or y.shape[1:] != expected:
            raise ValidationError(
                f"Sinogram batch has shape {y.shape}, expected (batch,) + {expected}",
                context={"shape": y.shape, "expected": expected},
            )
        require_finite("sinogram", y)
        self._sync_bank()
        batch = y.shape[0]
        z0 = np.zeros((batch, self.channels) + self.image_shape, dtype=self.dtype)
        betas0 = np.full((batch, self.channels), self.config.beta0)
        x0, problems, reports = self._invert(y, z0, betas0, None)
        stages = [StageRecord(x=x0, z=z0, betas=betas0, problems=problems, reports=reports)]

        for k in range(1, self.config.stages + 1):
            history = np.stack([stage.x for stage in stages], axis=1)
            x_tilde, z, dcache = self.denoise_stage(k, history, training)
            x_prev = stages[-1].x
            norms, data_residual, channel_residual = self.residual_norms(y, x_prev, z)
            if frozen_norms is not None:
                norms = np.asarray(frozen_norms[k - 1], dtype=np.float64)
            betas, pcache = self.predict_betas(k, norms)
            x, problems, reports = self._invert(y, z, betas, x_prev)
            stages.append(
                StageRecord(
                    x=x,
                    z=z,
                    betas=np.asarray(betas, dtype=np.float64),
                    problems=problems,
                    reports=reports,
                    x_tilde=x_tilde,
                    norms=norms,
                    data_residual=data_residual,
                    channel_residual=channel_residual,
                    denoiser_cache=dcache,
                    predictor_cache=pcache,
                )
            )
            logger.debug(f"Stage {k}: mean beta {float(np.mean(betas)):.4g}")

        trace = ForwardTrace(y=y, stages=stages, training=training)
        if trace.cg_failures:
            logger.warning(f"{trace.cg_failures} inversions missed the CG tolerance in this forward pass")
        return trace

    def loss(self, trace: ForwardTrace, truth: np.ndarray) -> float:
        """
        ||x^K - x||^2 + mu sum_{k=1}^{K-1} ||x^k - x||^2, averaged over the batch.

        Args:
            trace: Output of forward
            truth: Ground-truth image or (batch, rows, cols) stack

        Returns:
            Scalar loss in float64
        """
        truth = self._truth(trace, truth)
        outputs = trace.outputs
        final = np.sum((outputs[-1].astype(np.float64) - truth) ** 2, axis=(1, 2))
        intermediate = sum(
            np.sum((x.astype(np.float64) - truth) ** 2, axis=(1, 2)) for x in outputs[1:-1]
        )
        return float(np.mean(final + self.config.mu * intermediate))

    def _truth(self, trace: ForwardTrace, truth: np.ndarray) -> np.ndarray:
        truth = np.asarray(truth, dtype=np.float64)
        if truth.ndim == 2:
            truth = truth[None]
        if truth.shape != trace.final.shape:
            raise ValidationError(f"Truth has shape {truth.shape}, expected {trace.final.shape}")
        return truth

    def backward(self, trace: ForwardTrace, truth: np.ndarray) -> Dict[str, np.ndarray]:
        """
        Gradient of `loss` with respect to every parameter.

        Gradients are accumulated into `self.params` (zeroed first) and
        returned by name. With `full_gradient` off, beta is treated as
        independent of x^{k-1} and z^k through the residual norms.

        Args:
            trace: Output of forward, run with training=True
            truth: Ground truth passed to loss

        Returns:
            Gradient per parameter name, shaped like the parameter

        Raises:
            ValidationError: If the model has no learnable stage or the
                trace lacks the stage caches
        """
        cfg = self.config
        K = len(trace.stages) - 1
        if K == 0:
            raise ValidationError("Backward needs at least one learnable stage")
        for stage in trace.stages[1:]:
            if stage.denoiser_cache is None or stage.x_tilde is None:
                raise ValidationError("Trace is missing the stage caches needed for backward")
        truth = self._truth(trace, truth)
        batch = truth.shape[0]
        learnable = self.bank.learnable
        self._sync_bank()
        self.params.zero_grad()

        gx = [np.zeros(stage.x.shape, dtype=np.float64) for stage in trace.stages]
        gx[K] += 2.0 * (trace.stages[K].x - truth) / batch
        for k in range(1, K):
            gx[k] += 2.0 * cfg.mu * (trace.stages[k].x - truth) / batch
        grad_kernels = np.zeros(self.bank.kernel_array().shape) if learnable else None

        for k in range(K, 0, -1):
            stage = trace.stages[k]
            x_prev = trace.stages[k - 1].x
            prefix = f"stage{k}.predictor"
            grad_z = np.zeros(stage.z.shape, dtype=np.float64)
            grad_beta = np.zeros(stage.betas.shape)
            for b, problem in enumerate(stage.problems):
                grads = backward_inversion(problem, stage.x[b], gx[k][b])
                grad_z[b] = grads.grad_z
                grad_beta[b] = grads.grad_beta
                if learnable:
                    grad_kernels += backward_inversion_kernels(problem, stage.x[b], grads.adjoint_solution)

            if cfg.hp_mode == "mlp":
                grad_norms = predict_backward(self.params, prefix, grad_beta, stage.predictor_cache)
                if cfg.full_gradient:
                    self._norm_paths(stage, x_prev, grad_norms, grad_z, gx[k - 1], grad_kernels)
            else:
                constant_backward(self.params, prefix, grad_beta)

            grad_xt = np.stack([adjoint(self.bank, grad_z[b]) for b in range(batch)])
            if learnable:
                for b in range(batch):
                    for i, kernel in enumerate(self.bank.highpass):
                        grad_kernels[i] += kernel_gradient(stage.x_tilde[b], grad_z[b, i], kernel.shape)
            grad_history = denoise_backward(
                self.params, f"stage{k}.denoiser", grad_xt.astype(self.dtype), stage.denoiser_cache
            )
            for j in range(k):
                gx[j] += grad_history[:, j]

        if learnable:
            stage0 = trace.stages[0]
            for b, problem in enumerate(stage0.problems):
                grads = backward_inversion(problem, stage0.x[b], gx[0][b])
                grad_kernels += backward_inversion_kernels(problem, stage0.x[b], grads.adjoint_solution)
            self.params.accumulate("bank.kernels", grad_kernels.astype(self.dtype))

        return {name: param.grad.copy() for name, param in self.params.items()}

    def _norm_paths(
        self,
        stage: StageRecord,
        x_prev: np.ndarray,
        grad_norms: np.ndarray,
        grad_z: np.ndarray,
        grad_prev: np.ndarray,
        grad_kernels: Optional[np.ndarray]
    ):
        """Chain rule through ||y - A x^{k-1}||^2 and ||z_i - F_i x^{k-1}||^2."""
        for b in range(grad_norms.shape[0]):
            channel = stage.channel_residual[b].astype(np.float64)
            grad_prev[b] -= 2.0 * grad_norms[b, 0] * back_project(self.A, stage.data_residual[b].astype(np.float64))
            grad_z[b] += 2.0 * grad_norms[b, 1:, None, None] * channel
            grad_prev[b] -= 2.0 * adjoint(self.bank, channel, weights=grad_norms[b, 1:])
            if grad_kernels is not None:
                for i, kernel in enumerate(self.bank.highpass):
                    grad_kernels[i] -= 2.0 * grad_norms[b, i + 1] * kernel_gradient(
                        x_prev[b].astype(np.float64), channel[i], kernel.shape
                    )

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return self.params.state_tensors()

    def save_checkpoint(self, path: Union[str, Path], extra: Optional[Dict[str, np.ndarray]] = None) -> Path:
        """
        Write parameters, buffers and Adam state as an `.ahpc` file.

        Args:
            path: Destination file
            extra: Additional named tensors, e.g. the epoch counter

        Returns:
            Path of the written checkpoint
        """
        tensors = self.state_tensors()
        tensors.update(extra or {})
        return write_checkpoint(path, tensors)

    def load_checkpoint(self, path: Union[str, Path]) -> Dict[str, np.ndarray]:
        """Load parameters, buffers and Adam state; returns all stored tensors."""
        tensors = read_checkpoint(path)
        self.params.load_state_tensors(tensors)
        self._sync_bank()
        logger.info(f"Loaded checkpoint {path}")
        return tensors
