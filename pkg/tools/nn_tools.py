"""
Neural network building blocks with explicit forward and backward passes.

Tensors are numpy arrays in (batch, channels, rows, cols) layout. Every
`*_forward` returns (output, cache) and the matching `*_backward` takes the
upstream gradient and that cache. Convolution is cross-correlation with
zero padding 1 and 3x3 kernels.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from utils.constants import ADAM_DEFAULTS, BN_EPSILON, BN_MOMENTUM
from utils.error_handling import ValidationError
from utils.validation import require_ndim

logger = logging.getLogger(__name__)

KERNEL = 3
PAD = 1


# ---------------------------------------------------------------------------
# Parameters and optimizer state
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """A trainable tensor with its gradient buffer and Adam moments."""
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise ValidationError(f"Gradient shape {grad.shape} does not match parameter {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad


class LayerParams:
    """Ordered named parameters plus non-trainable buffers (BN running stats).

    One step counter is shared by every tensor so Adam bias correction stays
    synchronized.
    """

    def __init__(self):
        self.params: Dict[str, Parameter] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name].value
        return self.buffers[name]

    def add(self, name: str, value: np.ndarray):
        self.params[name] = Parameter(np.asarray(value))

    def add_buffer(self, name: str, value: np.ndarray):
        self.buffers[name] = np.asarray(value)

    def items(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self.params.items())

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def accumulate(self, name: str, grad: np.ndarray):
        self.params[name].accumulate(grad)

    def astype(self, dtype) -> "LayerParams":
        """Cast values, moments and buffers in place; returns self."""
        for param in self.params.values():
            param.value = param.value.astype(dtype)
            if param.grad is not None:
                param.grad = param.grad.astype(dtype)
            if param.m is not None:
                param.m = param.m.astype(dtype)
                param.v = param.v.astype(dtype)
        for name, value in self.buffers.items():
            self.buffers[name] = value.astype(dtype)
        return self

    def copy(self) -> "LayerParams":
        other = LayerParams()
        for name, param in self.params.items():
            other.params[name] = Parameter(
                param.value.copy(),
                None if param.grad is None else param.grad.copy(),
                None if param.m is None else param.m.copy(),
                None if param.v is None else param.v.copy(),
            )
        other.buffers = {name: value.copy() for name, value in self.buffers.items()}
        other.step = self.step
        return other

    def state_tensors(self, prefix: str = "") -> Dict[str, np.ndarray]:
        """Flatten values, buffers and Adam state for checkpointing.

        Adam moments are stored under `<name>.adam_m` / `<name>.adam_v`, the
        shared step under `<prefix>adam_step`.
        """
        tensors: Dict[str, np.ndarray] = {}
        for name, param in self.params.items():
            tensors[prefix + name] = param.value
            if param.m is not None:
                tensors[f"{prefix}{name}.adam_m"] = param.m
                tensors[f"{prefix}{name}.adam_v"] = param.v
        for name, value in self.buffers.items():
            tensors[prefix + name] = value
        tensors[prefix + "adam_step"] = np.array([self.step], dtype=np.float64)
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], prefix: str = ""):
        """Inverse of `state_tensors`; missing parameter names are errors."""
        for name, param in self.params.items():
            key = prefix + name
            if key not in tensors:
                raise ValidationError(f"Checkpoint is missing tensor '{key}'")
            value = tensors[key]
            if value.shape != param.value.shape:
                raise ValidationError(f"Tensor '{key}' has shape {value.shape}, expected {param.value.shape}")
            dtype = param.value.dtype
            param.value = value.astype(dtype)
            if f"{key}.adam_m" in tensors:
                param.m = tensors[f"{key}.adam_m"].astype(dtype)
                param.v = tensors[f"{key}.adam_v"].astype(dtype)
        for name in self.buffers:
            key = prefix + name
            if key not in tensors:
                raise ValidationError(f"Checkpoint is missing buffer '{key}'")
            self.buffers[name] = tensors[key].astype(self.buffers[name].dtype)
        if prefix + "adam_step" in tensors:
            self.step = int(tensors[prefix + "adam_step"][0])


def adam_step(
    params: LayerParams,
    lr: float = ADAM_DEFAULTS["lr"],
    beta1: float = ADAM_DEFAULTS["beta1"],
    beta2: float = ADAM_DEFAULTS["beta2"],
    eps: float = ADAM_DEFAULTS["eps"]
):
    """
    One Adam update with bias correction over every parameter with a gradient.

    Values and moments are updated in place; the shared step counter of
    `params` advances by one.

    Args:
        params: Parameters with gradients from the last backward pass
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard
    """
    params.step += 1
    t = params.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in params.items():
        if param.grad is None:
            continue
        if param.m is None:
            param.m = np.zeros_like(param.value)
            param.v = np.zeros_like(param.value)
        param.m = beta1 * param.m + (1.0 - beta1) * param.grad
        param.v = beta2 * param.v + (1.0 - beta2) * param.grad ** 2
        m_hat = param.m / correction1
        v_hat = param.v / correction2
        param.value = param.value - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """A 3x3 convolution, optionally followed by batch normalization."""
    name: str
    in_channels: int
    out_channels: int
    batch_norm: bool = False


@dataclass(frozen=True)
class DenseSpec:
    name: str
    in_features: int
    out_features: int


LayerSpec = Union[ConvSpec, DenseSpec]


def orthogonal_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """(rows, cols) matrix with orthonormal rows (rows <= cols) or columns."""
    tall = rows > cols
    gaussian = rng.standard_normal((rows, cols) if tall else (cols, rows))
    q, r = linalg.qr(gaussian, mode="economic")
    q = q * np.sign(np.diag(r))[None, :]
    return q if tall else q.T


def init_params(specs: Sequence[LayerSpec], seed: int, dtype=np.float64) -> LayerParams:
    """
    Initialize layers: orthogonal conv kernels, zero biases, unit BN scale,
    all-ones dense weights with zero biases.

    Args:
        specs: Layer descriptions, in network order
        seed: Seed of the orthogonal draws
        dtype: Tensor precision

    Returns:
        LayerParams with trainable tensors and BN running buffers
    """
    rng = np.random.default_rng(seed)
    params = LayerParams()
    for spec in specs:
        if isinstance(spec, ConvSpec):
            unfolded = orthogonal_matrix(spec.out_channels, spec.in_channels * KERNEL * KERNEL, rng)
            params.add(f"{spec.name}.weight", unfolded.reshape(spec.out_channels, spec.in_channels, KERNEL, KERNEL).astype(dtype))
            params.add(f"{spec.name}.bias", np.zeros(spec.out_channels, dtype=dtype))
            if spec.batch_norm:
                params.add(f"{spec.name}.bn_scale", np.ones(spec.out_channels, dtype=dtype))
                params.add(f"{spec.name}.bn_shift", np.zeros(spec.out_channels, dtype=dtype))
                params.add_buffer(f"{spec.name}.running_mean", np.zeros(spec.out_channels, dtype=dtype))
                params.add_buffer(f"{spec.name}.running_var", np.ones(spec.out_channels, dtype=dtype))
        elif isinstance(spec, DenseSpec):
            params.add(f"{spec.name}.weight", np.ones((spec.out_features, spec.in_features), dtype=dtype))
            params.add(f"{spec.name}.bias", np.zeros(spec.out_features, dtype=dtype))
        else:
            raise ValidationError(f"Unknown layer spec {spec!r}")
    logger.debug(f"Initialized {len(params.params)} tensors from {len(specs)} layer specs (seed {seed})")
    return params


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    return sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """
    Same-size 3x3 cross-correlation with zero padding.

    Args:
        x: Input batch (N, Cin, H, W)
        weight: Kernels (Cout, Cin, 3, 3)
        bias: Per-output-channel bias (Cout,)

    Returns:
        (output of shape (N, Cout, H, W), cache for conv2d_backward)
    """
    x = require_ndim("conv input", x, 4)
    weight = require_ndim("conv weight", weight, 4)
    if weight.shape[2:] != (KERNEL, KERNEL):
        raise ValidationError(f"Conv kernels must be {KERNEL}x{KERNEL}, got {weight.shape[2:]}")
    if x.shape[1] != weight.shape[1]:
        raise ValidationError(
            f"Conv input has {x.shape[1]} channels, weight expects {weight.shape[1]}",
            context={"input_channels": x.shape[1], "weight_channels": weight.shape[1]},
        )
    windows = _windows(x)
    out = np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)
    out += bias[None, :, None, None]
    return out, (x, weight)


def conv2d_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weight, grad_bias)."""
    x, weight = cache
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_weight = np.einsum("nchwij,nohw->ocij", _windows(x), grad_out, optimize=True)
    grad_input = np.einsum("nohwij,ocij->nchw", _windows(grad_out), weight[:, :, ::-1, ::-1], optimize=True)
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(
    x: np.ndarray,
    scale: np.ndarray,
    shift: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM
) -> Tuple[np.ndarray, tuple]:
    """
    Per-channel normalization over (batch, rows, cols).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, momentum weighting the new batch).

    Args:
        x: Input batch (N, C, H, W)
        scale: Per-channel gain (C,)
        shift: Per-channel offset (C,)
        running_mean: Inference mean buffer, updated in training mode
        running_var: Inference variance buffer, updated in training mode
        training: Batch statistics when True, running buffers otherwise
        eps: Variance guard
        momentum: Weight of the new batch in the running buffers

    Returns:
        (output, cache for batchnorm_backward)
    """
    x = require_ndim("batchnorm input", x, 4)
    if x.shape[0] == 0:
        raise ValidationError("batchnorm needs a non-empty batch")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale[None, :, None, None] * x_hat + shift[None, :, None, None]
    return out, (x_hat, inv_std, scale, training)


def batchnorm_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_scale, grad_shift)."""
    x_hat, inv_std, scale, training = cache
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    grad_scale = (grad_out * x_hat).sum(axis=(0, 2, 3))
    g = scale * inv_std
    if not training:
        return grad_out * g[None, :, None, None], grad_scale, grad_shift
    count = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    grad_input = (g / count)[None, :, None, None] * (
        count * grad_out
        - grad_shift[None, :, None, None]
        - x_hat * grad_scale[None, :, None, None]
    )
    return grad_input, grad_scale, grad_shift


# ---------------------------------------------------------------------------
# Pointwise and dense layers
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if grad_out.shape != mask.shape:
        raise ValidationError(f"ReLU gradient shape {grad_out.shape} does not match {mask.shape}")
    return grad_out * mask


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """x (N, in) -> x W^T + b, shape (N, out)."""
    x = require_ndim("dense input", x, 2)
    if x.shape[1] != weight.shape[1]:
        raise ValidationError(
            f"Dense input has {x.shape[1]} features, weight expects {weight.shape[1]}",
            context={"features": x.shape[1], "expected": weight.shape[1]},
        )
    return x @ weight.T + bias[None, :], (x, weight)


def dense_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weight, grad_bias)."""
    x, weight = cache
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def parameter_names(specs: Sequence[LayerSpec]) -> List[str]:
    """Trainable tensor names created by `init_params`, in order."""
    names: List[str] = []
    for spec in specs:
        names += [f"{spec.name}.weight", f"{spec.name}.bias"]
        if isinstance(spec, ConvSpec) and spec.batch_norm:
            names += [f"{spec.name}.bn_scale", f"{spec.name}.bn_shift"]
    return names
