"""
Finite-difference gradient suites.

Each suite compares an analytic gradient with central differences on a
small double-precision instance and reports the maximum relative error.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from utils.monitoring import get_performance_monitor
from utils.test_helpers import (
    InstanceFactory,
    central_difference,
    directional_difference,
    directional_gradient,
    random_directions,
    relative_error,
)

from .geometry_tools import back_project, forward_project
from .inversion_tools import CgSettings, backward_inversion, solve_inversion
from .nn_tools import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
)

logger = logging.getLogger(__name__)

LAYER_THRESHOLD = 1e-5
MODEL_THRESHOLD = 1e-4


@dataclass
class GradcheckResult:
    suite: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def _sampled_indices(shape, rng: np.random.Generator, count: int):
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _check_array(func: Callable[[], float], array: np.ndarray, analytic: np.ndarray, rng, count: int = 12, step: float = 1e-6) -> float:
    worst = 0.0
    for index in _sampled_indices(array.shape, rng, count):
        numeric = central_difference(func, array, index, step)
        worst = max(worst, relative_error(analytic[index], numeric, floor=1e-8))
    return worst


def check_projector_adjoint(seed: int = 0) -> GradcheckResult:
    factory = InstanceFactory(seed)
    A = factory.system_matrix(8)
    worst = 0.0
    for _ in range(20):
        x = factory.rng.standard_normal(A.geometry.image_size)
        y = factory.rng.standard_normal(A.geometry.sinogram_shape)
        ax = forward_project(A, x)
        lhs = float(np.vdot(ax, y))
        rhs = float(np.vdot(x, back_project(A, y)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)))
    return GradcheckResult("projector_adjoint", worst, 1e-12)


def check_inversion(seed: int = 0) -> List[GradcheckResult]:
    """grad_beta and grad_z of a linear loss <w, x(beta, z)>."""
    factory = InstanceFactory(seed)
    problem, _ = factory.problem(8, cg=CgSettings(max_iters=5000, rel_tolerance=1e-13))
    w = factory.rng.standard_normal(problem.image_shape)

    def loss() -> float:
        x, _ = solve_inversion(problem)
        return float(np.vdot(w, x))

    x, _ = solve_inversion(problem)
    grads = backward_inversion(problem, x, w)
    worst_beta = 0.0
    for i in range(problem.betas.size):
        numeric = central_difference(loss, problem.betas, i, 1e-4 * problem.betas[i])
        worst_beta = max(worst_beta, relative_error(grads.grad_beta[i], numeric, floor=1e-10))
    worst_z = _check_array(loss, problem.z, grads.grad_z, factory.rng, step=1e-2)
    return [
        GradcheckResult("inversion_grad_beta", worst_beta, LAYER_THRESHOLD),
        GradcheckResult("inversion_grad_z", worst_z, LAYER_THRESHOLD),
    ]


def check_layers(seed: int = 0) -> List[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    x = rng.standard_normal((2, 3, 5, 5))
    weight = rng.standard_normal((4, 3, 3, 3))
    bias = rng.standard_normal(4)
    w_out = rng.standard_normal((2, 4, 5, 5))
    out, cache = conv2d_forward(x, weight, bias)
    gx, gw, gb = conv2d_backward(w_out, cache)
    conv_loss = lambda: float(np.sum(w_out * conv2d_forward(x, weight, bias)[0]))
    worst = max(
        _check_array(conv_loss, x, gx, rng),
        _check_array(conv_loss, weight, gw, rng),
        _check_array(conv_loss, bias, gb, rng),
    )
    results.append(GradcheckResult("conv2d", worst, LAYER_THRESHOLD))

    x = rng.standard_normal((3, 2, 4, 4))
    scale = 1.0 + rng.random(2)
    shift = rng.standard_normal(2)
    w_out = rng.standard_normal(x.shape)

    def bn_loss() -> float:
        out, _ = batchnorm_forward(x, scale, shift, np.zeros(2), np.ones(2), training=True)
        return float(np.sum(w_out * out))

    _, cache = batchnorm_forward(x, scale, shift, np.zeros(2), np.ones(2), training=True)
    gx, gs, gsh = batchnorm_backward(w_out, cache)
    worst = max(
        _check_array(bn_loss, x, gx, rng),
        _check_array(bn_loss, scale, gs, rng),
        _check_array(bn_loss, shift, gsh, rng),
    )
    results.append(GradcheckResult("batchnorm", worst, LAYER_THRESHOLD))

    x = rng.standard_normal((3, 4))
    weight = rng.standard_normal((5, 4))
    bias = rng.standard_normal(5)
    w_out = rng.standard_normal((3, 5))
    _, cache = dense_forward(x, weight, bias)
    gx, gw, gb = dense_backward(w_out, cache)
    dense_loss = lambda: float(np.sum(w_out * dense_forward(x, weight, bias)[0]))
    worst = max(
        _check_array(dense_loss, x, gx, rng),
        _check_array(dense_loss, weight, gw, rng),
        _check_array(dense_loss, bias, gb, rng),
    )
    results.append(GradcheckResult("dense", worst, LAYER_THRESHOLD))
    return results


def model_instance(seed: int = 0, full_gradient: bool = True, bank_kind: str = "bspline-linear", hp_mode: str = "mlp"):
    """16x16, K=2, depth-3 toy network with tight CG plus a sinogram/truth pair."""
    from models.ahp_net import AhpNet, ModelConfig

    factory = InstanceFactory(seed)
    A = factory.system_matrix(16)
    config = ModelConfig(
        stages=2,
        bank_kind=bank_kind,
        hp_mode=hp_mode,
        cnn_depth=3,
        cnn_channels=4,
        full_gradient=full_gradient,
        cg=CgSettings(max_iters=5000, rel_tolerance=1e-12),
    )
    model = AhpNet(config, A, seed=seed, dtype=np.float64)
    truth = factory.image(16)
    y = forward_project(A, truth) + 0.01 * factory.rng.standard_normal(A.geometry.sinogram_shape)
    return model, y[None], truth[None], factory.rng


def check_model(seed: int = 0, full_gradient: bool = True, bank_kind: str = "bspline-linear", hp_mode: str = "mlp", directions: int = 3) -> GradcheckResult:
    """End-to-end gradient along random parameter directions.

    Restricted mode is checked against a forward pass whose residual norms
    are frozen at their base values.
    """
    model, y, truth, rng = model_instance(seed, full_gradient, bank_kind, hp_mode)
    trace = model.forward(y, training=True)
    grads = model.backward(trace, truth)
    frozen = None if full_gradient else trace.norms()

    def loss() -> float:
        return model.loss(model.forward(y, training=True, frozen_norms=frozen), truth)

    worst = 0.0
    for _ in range(directions):
        direction = random_directions(model.params, rng)
        numeric = directional_difference(loss, model.params, direction, 1e-5)
        analytic = directional_gradient(grads, direction)
        worst = max(worst, relative_error(analytic, numeric, floor=1e-10))
    mode = "full" if full_gradient else "restricted"
    return GradcheckResult(f"model_{bank_kind}_{hp_mode}_{mode}", worst, MODEL_THRESHOLD)


def check_model_tensors(seed: int = 0, bank_kind: str = "learnable", hp_mode: str = "mlp", samples: int = 1) -> List[GradcheckResult]:
    """Sampled entries of every parameter tensor, reported per group.

    Each tensor contributes its largest-gradient entry plus `samples` random
    entries, compared on the scale of that tensor's own gradient with a
    floor tied to the largest gradient in the model. Groups are
    `denoiser`, `predictor` and `bank`.

    Args:
        seed: Seed of the toy instance and the sampled indices
        bank_kind: Filter bank of the toy network
        hp_mode: Hyper-parameter mode of the toy network
        samples: Random entries per tensor on top of the largest one

    Returns:
        One GradcheckResult per parameter group present in the model
    """
    model, y, truth, rng = model_instance(seed, True, bank_kind, hp_mode)
    grads = model.backward(model.forward(y, training=True), truth)

    def loss() -> float:
        return model.loss(model.forward(y, training=True), truth)

    overall = max(float(np.max(np.abs(g))) for g in grads.values())
    worst: Dict[str, float] = {}
    for name, param in model.params.items():
        analytic = grads[name]
        group = name.split(".")[1] if name.startswith("stage") else name.split(".")[0]
        largest = np.unravel_index(int(np.argmax(np.abs(analytic))), analytic.shape)
        floor = max(1e-3 * float(np.max(np.abs(analytic))), 1e-6 * overall, 1e-10)
        for index in [largest] + _sampled_indices(analytic.shape, rng, samples):
            numeric = central_difference(loss, param.value, index, 1e-5)
            worst[group] = max(worst.get(group, 0.0), relative_error(analytic[index], numeric, floor=floor))
    return [
        GradcheckResult(f"model_{bank_kind}_{hp_mode}_{group}", error, MODEL_THRESHOLD)
        for group, error in worst.items()
    ]


def run_all(seed: int = 0, include_model: bool = True) -> List[GradcheckResult]:
    """Every suite, in order; model suites are the slow part."""
    monitor = get_performance_monitor()
    results: List[GradcheckResult] = []
    with monitor.track_operation("gradcheck"):
        results.append(check_projector_adjoint(seed))
        results += check_inversion(seed)
        results += check_layers(seed)
        if include_model:
            results.append(check_model(seed, full_gradient=True))
            results.append(check_model(seed, full_gradient=False))
            results.append(check_model(seed, bank_kind="learnable"))
            results.append(check_model(seed, hp_mode="learnable-constant"))
            results += check_model_tensors(seed)
    for result in results:
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"gradcheck {result.suite}: max rel err {result.max_rel_error:.3e} (< {result.threshold:.0e})")
    return results


def format_table(results: List[GradcheckResult]) -> str:
    width = max(len(r.suite) for r in results) if results else 5
    lines = [f"{'suite':<{width}}  {'max_rel_err':>12}  {'threshold':>9}  status"]
    for r in results:
        lines.append(f"{r.suite:<{width}}  {r.max_rel_error:>12.3e}  {r.threshold:>9.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
