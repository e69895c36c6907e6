"""
Stage denoiser CNN.

Stage k maps the k previous estimates [x^0 .. x^{k-1}] (one channel each)
to a single image. Blocks: Conv+ReLU, then (depth - 2) x Conv+BN+ReLU, then
a final Conv.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from tools.nn_tools import (
    ConvSpec,
    LayerParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
)
from utils.error_handling import ValidationError

logger = logging.getLogger(__name__)


def denoiser_specs(prefix: str, in_channels: int, depth: int, channels: int) -> List[ConvSpec]:
    if depth < 2:
        raise ValidationError(f"CNN depth must be >= 2, got {depth}")
    specs = [ConvSpec(f"{prefix}.conv0", in_channels, channels)]
    specs += [ConvSpec(f"{prefix}.conv{i}", channels, channels, batch_norm=True) for i in range(1, depth - 1)]
    specs.append(ConvSpec(f"{prefix}.conv{depth - 1}", channels, 1))
    return specs


@dataclass
class DenoiserCache:
    depth: int
    blocks: List[dict] = field(default_factory=list)


def denoise_forward(
    params: LayerParams,
    prefix: str,
    history: np.ndarray,
    depth: int,
    training: bool
) -> tuple:
    """
    Run one stage's CNN over the stacked prior estimates.

    Args:
        params: Network parameters and batch-norm buffers
        prefix: Parameter name prefix of the stage, e.g. "stage2.denoiser"
        history: Prior estimates of shape (batch, k, rows, cols)
        depth: Number of convolution layers
        training: Use batch statistics and update the running buffers

    Returns:
        (x_tilde of shape (batch, rows, cols), cache for denoise_backward)

    Raises:
        ValidationError: If history is not 4D or k does not match the stage
    """
    if history.ndim != 4:
        raise ValidationError(f"Denoiser history must be (batch, k, rows, cols), got {history.shape}")
    expected = params[f"{prefix}.conv0.weight"].shape[1]
    if history.shape[1] != expected:
        raise ValidationError(
            f"Stage denoiser '{prefix}' takes {expected} prior estimates, got {history.shape[1]}",
            context={"got": history.shape[1], "expected": expected},
        )
    cache = DenoiserCache(depth)
    h = history
    for i in range(depth):
        name = f"{prefix}.conv{i}"
        block = {}
        h, block["conv"] = conv2d_forward(h, params[f"{name}.weight"], params[f"{name}.bias"])
        if 0 < i < depth - 1:
            h, block["bn"] = batchnorm_forward(
                h,
                params[f"{name}.bn_scale"],
                params[f"{name}.bn_shift"],
                params.buffers[f"{name}.running_mean"],
                params.buffers[f"{name}.running_var"],
                training,
            )
        if i < depth - 1:
            h, block["relu"] = relu_forward(h)
        cache.blocks.append(block)
    return h[:, 0], cache


def denoise_backward(params: LayerParams, prefix: str, grad_out: np.ndarray, cache: DenoiserCache) -> np.ndarray:
    """Accumulate parameter gradients; returns d loss / d history."""
    g = grad_out[:, None]
    for i in reversed(range(cache.depth)):
        name = f"{prefix}.conv{i}"
        block = cache.blocks[i]
        if "relu" in block:
            g = relu_backward(g, block["relu"])
        if "bn" in block:
            g, grad_scale, grad_shift = batchnorm_backward(g, block["bn"])
            params.accumulate(f"{name}.bn_scale", grad_scale)
            params.accumulate(f"{name}.bn_shift", grad_shift)
        g, grad_w, grad_b = conv2d_backward(g, block["conv"])
        params.accumulate(f"{name}.weight", grad_w)
        params.accumulate(f"{name}.bias", grad_b)
    return g
