"""
Inversion block tools.

Solves (A^T A + sum_i beta_i F_i^T F_i) x = A^T y + sum_i beta_i F_i^T z_i by
conjugate gradient and back-propagates through the solution analytically:
with s = M^-1 g,
    dL/dz_i    = beta_i F_i s
    dL/dbeta_i = <F_i^T z_i - F_i^T F_i x, s>.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator

from utils.constants import BETA_FLOOR, CG_TRAIN, CG_VERIFY
from utils.error_handling import ValidationError
from utils.validation import require_shape

from .framelet_tools import FilterBank, SubbandStack, adjoint, analyze, kernel_gradient
from .geometry_tools import SystemMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CgSettings:
    """Conjugate gradient stopping rule."""
    max_iters: int = int(CG_TRAIN["max_iters"])
    rel_tolerance: float = CG_TRAIN["rel_tolerance"]
    record_history: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValidationError("rel_tolerance must lie in (0, 1)")

    @classmethod
    def verification(cls, record_history: bool = True) -> "CgSettings":
        return cls(int(CG_VERIFY["max_iters"]), CG_VERIFY["rel_tolerance"], record_history)


@dataclass
class CgReport:
    """Outcome of one CG solve.

    `energy_history` holds 0.5 x^T M x - b^T x per iterate; it equals the
    squared M-norm error up to a constant and never increases.
    """
    iterations: int
    final_residual: float
    converged: bool
    residual_history: List[float] = field(default_factory=list)
    energy_history: List[float] = field(default_factory=list)


@dataclass
class InversionProblem:
    """One inversion block: data, coupling stack and hyper-parameters."""
    A: SystemMatrix
    bank: FilterBank
    y: np.ndarray
    z: SubbandStack
    betas: np.ndarray
    cg: CgSettings = field(default_factory=CgSettings)

    def __post_init__(self):
        geom = self.A.geometry
        self.y = require_shape("sinogram", self.y, geom.sinogram_shape)
        self.z = require_shape("subband stack", self.z, (self.bank.channels,) + tuple(geom.image_size))
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        require_shape("betas", betas, (self.bank.channels,))
        if np.any(~np.isfinite(betas)):
            raise ValidationError("betas contain non-finite values")
        if np.any(betas < BETA_FLOOR):
            logger.debug(f"Flooring {int(np.sum(betas < BETA_FLOOR))} betas at {BETA_FLOOR}")
            betas = np.maximum(betas, BETA_FLOOR)
        self.betas = betas

    @property
    def dtype(self):
        return np.result_type(self.y.dtype, self.z.dtype, np.float32)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return tuple(self.A.geometry.image_size)

    def matrix(self):
        return self.A.as_dtype(self.dtype)

    def rhs(self) -> np.ndarray:
        """b = A^T y + sum_i beta_i F_i^T z_i."""
        aty = (self.matrix().T @ self.y.reshape(-1).astype(self.dtype, copy=False)).reshape(self.image_shape)
        return aty + adjoint(self.bank, self.z, weights=self.betas.astype(self.dtype))


def apply_normal_operator(p: InversionProblem, v: np.ndarray) -> np.ndarray:
    """
    M v = A^T A v + sum_i beta_i F_i^T F_i v.

    Args:
        p: Inversion block supplying A, the bank and the floored betas
        v: Image of shape p.image_shape

    Returns:
        M v, same shape as v
    """
    v = require_shape("image", v, p.image_shape)
    A = p.matrix()
    out = (A.T @ (A @ v.reshape(-1))).reshape(p.image_shape)
    return out + adjoint(p.bank, analyze(p.bank, v), weights=p.betas.astype(out.dtype))


def normal_operator(p: InversionProblem) -> LinearOperator:
    """M as a scipy LinearOperator on flattened images."""
    n = p.A.cols
    shape = p.image_shape

    def matvec(v):
        return apply_normal_operator(p, np.asarray(v).reshape(shape)).reshape(-1)

    return LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=p.dtype)


def assemble_normal_matrix(p: InversionProblem) -> np.ndarray:
    """Dense M, column by column. Only sensible for tiny images."""
    n = p.A.cols
    dense = np.empty((n, n), dtype=np.float64)
    basis = np.zeros(n)
    for j in range(n):
        basis[j] = 1.0
        dense[:, j] = apply_normal_operator(p, basis.reshape(p.image_shape)).reshape(-1)
        basis[j] = 0.0
    return dense


def conjugate_gradient(
    apply_op,
    b: np.ndarray,
    x0: Optional[np.ndarray],
    settings: CgSettings
) -> Tuple[np.ndarray, CgReport]:
    """
    Plain CG for a symmetric positive definite operator.

    Stops when ||r|| <= rel_tolerance * ||b||. On a miss the last iterate is
    returned: it has the smallest M-norm error of all iterates.

    Args:
        apply_op: Callable returning M v for an array shaped like b
        b: Right-hand side
        x0: Warm start, or None to start from zero
        settings: Iteration cap, tolerance and history switch

    Returns:
        (solution, CgReport); report.converged is False when the cap was hit
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=b.dtype)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), CgReport(0, 0.0, True, [0.0] if settings.record_history else [], [])

    r = b - apply_op(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    residual = np.sqrt(rs) / b_norm
    residual_history: List[float] = []
    energy_history: List[float] = []
    if settings.record_history:
        residual_history.append(residual)
        energy_history.append(-0.5 * float(np.vdot(x, b) + np.vdot(x, r)))

    iterations = 0
    while residual > settings.rel_tolerance and iterations < settings.max_iters:
        mp = apply_op(p)
        curvature = float(np.vdot(p, mp))
        if curvature <= 0.0:
            logger.warning(f"CG stopped: non-positive curvature {curvature:.3e} at iteration {iterations}")
            break
        alpha = rs / curvature
        x += alpha * p
        r -= alpha * mp
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
        residual = np.sqrt(rs) / b_norm
        iterations += 1
        if settings.record_history:
            residual_history.append(residual)
            energy_history.append(-0.5 * float(np.vdot(x, b) + np.vdot(x, r)))

    converged = residual <= settings.rel_tolerance
    if not converged:
        logger.warning(
            f"CG did not reach tolerance {settings.rel_tolerance:.1e} in {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )
    else:
        logger.debug(f"CG converged in {iterations} iterations (relative residual {residual:.3e})")
    return x, CgReport(iterations, residual, converged, residual_history, energy_history)


def solve_inversion(p: InversionProblem, x0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, CgReport]:
    """
    Solve M x = A^T y + sum_i beta_i F_i^T z_i.

    Args:
        p: Inversion block
        x0: Optional warm start; the stopping rule does not depend on it

    Returns:
        (x, CgReport) with x of shape p.image_shape
    """
    if x0 is not None:
        x0 = require_shape("warm start", x0, p.image_shape).astype(p.dtype)
    return conjugate_gradient(lambda v: apply_normal_operator(p, v), p.rhs(), x0, p.cg)


@dataclass
class InversionGradients:
    """Gradients of a scalar loss through one inversion block."""
    grad_z: SubbandStack
    grad_beta: np.ndarray
    grad_xprev_path: np.ndarray
    adjoint_solution: np.ndarray
    report: CgReport


def backward_inversion(p: InversionProblem, x_sol: np.ndarray, grad_x: np.ndarray) -> InversionGradients:
    """
    Back-propagate dL/dx through x = M^-1 b with one shared CG solve.

    The warm start has no influence on the converged solution, so the
    direct path to the previous iterate carries a zero gradient; the
    previous iterate reaches x only through z and beta, which callers
    handle.

    Args:
        p: Inversion block that produced x_sol
        x_sol: Solution returned by solve_inversion
        grad_x: dL/dx, same shape as x_sol

    Returns:
        InversionGradients with grad_z = beta_i F_i s and
        grad_beta_i = <z_i - F_i x, F_i s>, where s = M^-1 grad_x
    """
    x_sol = require_shape("solution", x_sol, p.image_shape)
    grad_x = require_shape("grad_x", grad_x, p.image_shape)
    s, report = conjugate_gradient(lambda v: apply_normal_operator(p, v), grad_x.astype(p.dtype), None, p.cg)

    fs = analyze(p.bank, s)
    grad_z = p.betas.astype(fs.dtype)[:, None, None] * fs
    residual = p.z - analyze(p.bank, x_sol)
    grad_beta = np.einsum("ihw,ihw->i", residual, fs).astype(np.float64)
    return InversionGradients(
        grad_z=grad_z,
        grad_beta=grad_beta,
        grad_xprev_path=np.zeros_like(x_sol),
        adjoint_solution=s,
        report=report,
    )


def backward_inversion_kernels(p: InversionProblem, x_sol: np.ndarray, s: np.ndarray) -> np.ndarray:
    """dL/df_i through M and b for a learnable bank, shape (L, kh, kw).

    With r_i = z_i - F_i x:  dL/df_i = beta_i (d<F_i s, r_i> - d<F_i x, F_i s>).
    """
    kernels = p.bank.coupling_kernels()
    fx = analyze(p.bank, x_sol)
    fs = analyze(p.bank, s)
    grads = []
    for i, kernel in enumerate(kernels):
        r = p.z[i] - fx[i]
        g = kernel_gradient(s, r, kernel.shape) - kernel_gradient(x_sol, fs[i], kernel.shape)
        grads.append(p.betas[i] * g)
    return np.stack(grads)
