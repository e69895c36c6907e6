import numpy as np
import pytest
from scipy import linalg

from tools.framelet_tools import analyze, build_filter_bank
from tools.geometry_tools import back_project, forward_project
from tools.inversion_tools import (
    CgSettings,
    InversionProblem,
    apply_normal_operator,
    assemble_normal_matrix,
    backward_inversion,
    backward_inversion_kernels,
    conjugate_gradient,
    normal_operator,
    solve_inversion,
)
from utils.constants import BETA_FLOOR
from utils.error_handling import ValidationError
from utils.test_helpers import central_difference, relative_error

TIGHT = CgSettings(max_iters=5000, rel_tolerance=1e-13)


def test_cg_settings_validation():
    with pytest.raises(ValidationError):
        CgSettings(max_iters=0)
    with pytest.raises(ValidationError):
        CgSettings(rel_tolerance=1.0)
    verify = CgSettings.verification()
    assert verify.max_iters == 2000
    assert verify.rel_tolerance == 1e-10
    assert verify.record_history


def test_problem_validates_dimensions(factory):
    problem, _ = factory.problem(8)
    with pytest.raises(ValidationError):
        InversionProblem(problem.A, problem.bank, problem.y[:-1], problem.z, problem.betas)
    with pytest.raises(ValidationError):
        InversionProblem(problem.A, problem.bank, problem.y, problem.z[:3], problem.betas)
    with pytest.raises(ValidationError):
        InversionProblem(problem.A, problem.bank, problem.y, problem.z, problem.betas[:3])


def test_betas_are_floored(factory):
    problem, _ = factory.problem(8, betas=np.array([0.0, -1.0, 1e-9, 1.0, 2.0, 3.0, 4.0, 5.0]))
    assert np.all(problem.betas >= BETA_FLOOR)
    assert problem.betas[3] == 1.0


def test_normal_operator_of_zero_is_zero(factory):
    problem, _ = factory.problem(8)
    assert np.all(apply_normal_operator(problem, np.zeros(problem.image_shape)) == 0)


def test_normal_operator_is_symmetric(factory, rng):
    problem, _ = factory.problem(8)
    for _ in range(10):
        v = rng.standard_normal(problem.image_shape)
        w = rng.standard_normal(problem.image_shape)
        lhs = np.vdot(apply_normal_operator(problem, v), w)
        rhs = np.vdot(v, apply_normal_operator(problem, w))
        assert relative_error(lhs, rhs) < 1e-12


def test_identity_coupling_gives_ata_plus_lambda(factory, rng):
    A = factory.system_matrix(8)
    bank = build_filter_bank("none")
    y = forward_project(A, factory.image(8))
    problem = InversionProblem(A, bank, y, np.zeros((1, 8, 8)), np.array([0.3]))
    v = rng.standard_normal((8, 8))
    expected = back_project(A, forward_project(A, v)) + 0.3 * v
    assert np.allclose(apply_normal_operator(problem, v), expected, rtol=1e-12, atol=1e-12)


def test_linear_operator_matches_dense_matrix(factory, rng):
    problem, _ = factory.problem(8)
    dense = assemble_normal_matrix(problem)
    v = rng.standard_normal(64)
    assert np.allclose(normal_operator(problem).matvec(v), dense @ v)
    assert np.allclose(dense, dense.T, atol=1e-12)


def test_consistent_data_is_recovered(factory):
    problem, x_true = factory.problem(8, consistent=True, cg=TIGHT)
    x, report = solve_inversion(problem)
    assert report.converged
    assert np.max(np.abs(x - x_true)) < 1e-8 * np.max(np.abs(x_true))


def test_solution_matches_dense_cholesky(factory):
    problem, _ = factory.problem(8, cg=TIGHT)
    x, report = solve_inversion(problem)
    dense = assemble_normal_matrix(problem)
    direct = linalg.cho_solve(linalg.cho_factor(dense), problem.rhs().ravel()).reshape(8, 8)
    assert report.converged
    assert np.max(np.abs(x - direct)) <= 1e-8 * np.max(np.abs(direct))


def test_solution_meets_the_relative_residual(factory):
    problem, _ = factory.problem(8, cg=CgSettings(max_iters=500, rel_tolerance=1e-6))
    x, report = solve_inversion(problem)
    b = problem.rhs()
    residual = np.linalg.norm(apply_normal_operator(problem, x) - b) / np.linalg.norm(b)
    assert report.converged
    assert residual <= 1e-6 * (1 + 1e-6)


def test_warm_start_does_not_loosen_the_criterion(factory):
    problem, _ = factory.problem(8)
    cold, _ = solve_inversion(problem)
    warm, warm_report = solve_inversion(problem, x0=cold + 1e-9)
    assert warm_report.converged
    assert np.allclose(warm, cold, atol=1e-8 * np.max(np.abs(cold)))


def test_cg_monotonicity_holds_for_the_quadratic_energy(factory):
    # CG minimizes the energy monotonically; the residual norm may oscillate
    problem, _ = factory.problem(8)
    _, report = solve_inversion(problem)
    energies = np.array(report.energy_history)
    assert len(energies) == report.iterations + 1
    slack = 1e-12 * np.max(np.abs(energies))
    assert np.all(np.diff(energies) <= slack)
    assert len(report.residual_history) == report.iterations + 1


def test_non_convergence_returns_a_flagged_report(factory, caplog):
    problem, _ = factory.problem(8, cg=CgSettings(max_iters=2, rel_tolerance=1e-12))
    x, report = solve_inversion(problem)
    assert not report.converged
    assert report.iterations == 2
    assert np.all(np.isfinite(x))
    assert "did not reach tolerance" in caplog.text


def test_zero_rhs_returns_zero():
    x, report = conjugate_gradient(lambda v: 2.0 * v, np.zeros(5), None, CgSettings())
    assert np.all(x == 0)
    assert report.converged and report.iterations == 0


def test_framelet_residual_shrinks_with_beta(factory):
    A = factory.system_matrix(16)
    bank = build_filter_bank("bspline-linear")
    x_true = factory.image(16)
    y = forward_project(A, x_true) + 0.01 * factory.rng.standard_normal(A.geometry.sinogram_shape)
    z = analyze(bank, factory.image(16))
    gaps = []
    for beta in (1.0, 1e2, 1e4):
        problem = InversionProblem(A, bank, y, z, np.full(8, beta), TIGHT)
        x, _ = solve_inversion(problem)
        gaps.append(np.linalg.norm(analyze(bank, x) - z))
    assert gaps[0] > gaps[1] > gaps[2]


def test_zero_upstream_gradient_gives_zero_gradients(factory):
    problem, _ = factory.problem(8)
    x, _ = solve_inversion(problem)
    grads = backward_inversion(problem, x, np.zeros(problem.image_shape))
    assert np.all(grads.grad_z == 0)
    assert np.all(grads.grad_beta == 0)
    assert np.all(grads.grad_xprev_path == 0)


def _tight_problem(factory):
    return factory.problem(8, cg=TIGHT)


def test_grad_beta_matches_finite_differences(factory):
    problem, _ = _tight_problem(factory)
    w = factory.rng.standard_normal(problem.image_shape)

    def loss():
        x, _ = solve_inversion(problem)
        return float(np.vdot(w, x))

    x, _ = solve_inversion(problem)
    grads = backward_inversion(problem, x, w)
    for i in range(problem.betas.size):
        numeric = central_difference(loss, problem.betas, i, 1e-4 * problem.betas[i])
        assert relative_error(grads.grad_beta[i], numeric, floor=1e-10) < 1e-5


def test_grad_z_matches_finite_differences(factory):
    problem, _ = _tight_problem(factory)
    w = factory.rng.standard_normal(problem.image_shape)

    def loss():
        x, _ = solve_inversion(problem)
        return float(np.vdot(w, x))

    x, _ = solve_inversion(problem)
    grads = backward_inversion(problem, x, w)
    for index in [(0, 0, 0), (3, 4, 5), (7, 7, 1)]:
        numeric = central_difference(loss, problem.z, index, 1e-2)
        assert relative_error(grads.grad_z[index], numeric, floor=1e-10) < 1e-5


def test_adjoint_solution_is_reproducible(factory):
    problem, _ = factory.problem(8)
    x, _ = solve_inversion(problem)
    g = factory.rng.standard_normal(problem.image_shape)
    first = backward_inversion(problem, x, g)
    second = backward_inversion(problem, x, g)
    assert np.max(np.abs(first.grad_beta - second.grad_beta)) < 1e-12
    assert np.max(np.abs(first.grad_z - second.grad_z)) < 1e-12


def test_kernel_gradient_through_the_inversion(factory):
    A = factory.system_matrix(8)
    bank = build_filter_bank("learnable", build_filter_bank("bspline-linear").highpass)
    y = forward_project(A, factory.image(8)) + 0.01 * factory.rng.standard_normal(A.geometry.sinogram_shape)
    z = 0.01 * factory.rng.standard_normal((8, 8, 8))
    betas = 0.5 + factory.rng.random(8)
    cg = TIGHT
    w = factory.rng.standard_normal((8, 8))
    kernels = bank.kernel_array()

    def loss():
        bank.set_kernels(kernels)
        x, _ = solve_inversion(InversionProblem(A, bank, y, z, betas, cg))
        return float(np.vdot(w, x))

    bank.set_kernels(kernels)
    problem = InversionProblem(A, bank, y, z, betas, cg)
    x, _ = solve_inversion(problem)
    s = backward_inversion(problem, x, w).adjoint_solution
    analytic = backward_inversion_kernels(problem, x, s)
    for index in [(0, 1, 1), (3, 0, 2), (7, 2, 0)]:
        numeric = central_difference(loss, kernels, index, 1e-5)
        assert relative_error(analytic[index], numeric, floor=1e-10) < 1e-5
