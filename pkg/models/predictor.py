"""
Hyper-parameter predictor.

Maps the squared residual norms of a stage, [||y - A x||^2, ||z_i - F_i x||^2 ...],
to the coupling weights beta_i through three dense + ReLU layers. The
learnable-constant mode replaces the network by a stored vector per stage.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from tools.nn_tools import DenseSpec, LayerParams, dense_backward, dense_forward, relu_backward, relu_forward
from utils.constants import BETA_FLOOR
from utils.error_handling import ValidationError

logger = logging.getLogger(__name__)

MLP_LAYERS = 3


def predictor_specs(prefix: str, channels: int, hidden: Tuple[int, int]) -> List[DenseSpec]:
    """(channels + 1) -> h1 -> h2 -> channels."""
    sizes = [channels + 1, hidden[0], hidden[1], channels]
    return [DenseSpec(f"{prefix}.dense{i}", sizes[i], sizes[i + 1]) for i in range(MLP_LAYERS)]


@dataclass
class PredictorCache:
    layers: list
    raw: np.ndarray


def predict_betas(params: LayerParams, prefix: str, norms: np.ndarray) -> Tuple[np.ndarray, PredictorCache]:
    """
    Floored beta for a batch of residual-norm vectors.

    Args:
        params: Network parameters
        prefix: Parameter name prefix of the stage's MLP
        norms: (batch, channels + 1) vectors of ||r_0||, ||r_1||, ...

    Returns:
        (betas of shape (batch, channels), cache for predict_backward)
    """
    norms = np.atleast_2d(norms)
    expected = params[f"{prefix}.dense0.weight"].shape[1]
    if norms.shape[1] != expected:
        raise ValidationError(
            f"Predictor expects {expected} residual norms, got {norms.shape[1]}",
            context={"got": norms.shape[1], "expected": expected},
        )
    h = norms.astype(params[f"{prefix}.dense0.weight"].dtype)
    layers = []
    for i in range(MLP_LAYERS):
        h, dense_cache = dense_forward(h, params[f"{prefix}.dense{i}.weight"], params[f"{prefix}.dense{i}.bias"])
        h, mask = relu_forward(h)
        layers.append((dense_cache, mask))
    return np.maximum(h, BETA_FLOOR), PredictorCache(layers, h)


def predict_backward(params: LayerParams, prefix: str, grad_betas: np.ndarray, cache: PredictorCache) -> np.ndarray:
    """Accumulate parameter gradients; returns d loss / d norms."""
    g = np.where(cache.raw > BETA_FLOOR, grad_betas, 0.0).astype(cache.raw.dtype)
    for i in reversed(range(MLP_LAYERS)):
        dense_cache, mask = cache.layers[i]
        g = relu_backward(g, mask)
        g, grad_w, grad_b = dense_backward(g, dense_cache)
        params.accumulate(f"{prefix}.dense{i}.weight", grad_w)
        params.accumulate(f"{prefix}.dense{i}.bias", grad_b)
    return g


def constant_betas(params: LayerParams, prefix: str, batch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stored per-stage beta broadcast over the batch: (floored, raw)."""
    raw = params[f"{prefix}.beta"]
    return np.tile(np.maximum(raw, BETA_FLOOR), (batch, 1)), raw


def constant_backward(params: LayerParams, prefix: str, grad_betas: np.ndarray):
    raw = params[f"{prefix}.beta"]
    grad = np.where(raw > BETA_FLOOR, np.sum(grad_betas, axis=0), 0.0)
    params.accumulate(f"{prefix}.beta", grad.astype(raw.dtype))


def heuristic_betas(norms: np.ndarray, n_d: int, n_p: int) -> np.ndarray:
    """Closed-form MAP estimate (||r0||^2 / N_d) / (||r_i||^2 / N_p), floored.

    Under the Gaussian model this is the noise-variance ratio the predictor
    learns to correct.
    """
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 1 or norms.size < 2:
        raise ValidationError(f"Expected a vector of at least 2 residual norms, got shape {norms.shape}")
    data_variance = norms[0] / n_d
    channel_variance = np.maximum(norms[1:] / n_p, np.finfo(np.float64).tiny)
    return np.maximum(data_variance / channel_variance, BETA_FLOOR)
