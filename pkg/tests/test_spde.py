import numpy as np
import pytest

from app.exceptions import DivergenceError, HypothesisViolationError, InvalidArgumentError
from app.models.grid_field import constant_field
from app.services.noise import deterministic_driver, sample_white_noise
from app.services.spde import (
    SpdeProblem,
    adaptedness_error,
    boundary_field,
    boundary_term,
    goursat_solution,
    linear_young_problem,
    mean_ratio,
    mesh_convergence_study,
    picard_step,
    regularity_report,
    sigma_from_name,
    solve,
    sup_l2_distance,
    sweep_solve,
)


def make_problem(N, sigma="lipschitz", f=0.5, **kwargs):
    g, lipschitz = sigma_from_name(sigma)
    driver = deterministic_driver("frozen_fbm_sheet", N, 1.0, 2, H=0.75)
    return SpdeProblem(driver, constant_field(f, N, 1.0, 2), g, lipschitz, boundary=1.0, **kwargs)


def test_unknown_diffusion_is_rejected():
    with pytest.raises(InvalidArgumentError):
        sigma_from_name("cubic")


def test_problem_hypotheses():
    problem = make_problem(8)
    assert problem.check_hypotheses() == []
    with pytest.raises(HypothesisViolationError):
        make_problem(8, alpha=(0.2, 0.2))
    relaxed = make_problem(8, alpha=(0.2, 0.2), override=True)
    assert relaxed.check_hypotheses()


def test_random_driver_is_rejected(small_sheet):
    with pytest.raises(InvalidArgumentError):
        SpdeProblem(small_sheet, constant_field(0.5, 16, 1.0, 2), np.sin, 1.0)


def test_boundary_term_reproduces_additive_data():
    v = lambda p: 1.0 + np.asarray(p)[..., 0] + 2.0 * np.asarray(p)[..., 1]
    assert boundary_term(v, [0.25, 0.5]) == pytest.approx(v(np.array([0.25, 0.5])))
    assert boundary_term(3.0, [0.25, 0.5]) == 3.0
    field = boundary_field(v, 4, 1.0, 2)
    assert field.at([0.5, 0.75])[0] == pytest.approx(v(np.array([0.5, 0.75])))


def test_zero_coefficients_leave_the_boundary_term():
    problem = linear_young_problem(0.0, 2.0, 8, 1.0)
    noise = sample_white_noise(8, 1.0, 2, 4, seed=1)
    solution = solve(problem, noise)
    np.testing.assert_array_equal(solution.u.data, 2.0)
    assert solution.iterations == 1 and solution.converged


def goursat_error(N):
    problem = linear_young_problem(1.0, 1.0, N, 1.0)
    u = sweep_solve(problem, sample_white_noise(N, 1.0, 2, 1, seed=0))
    return float(np.abs(u.data[0] - goursat_solution(1.0, 1.0, N, 1.0).data[0]).max())


def test_goursat_problem_converges_at_first_order():
    coarse, fine = goursat_error(32), goursat_error(64)
    assert fine < 0.05
    assert 1.7 < coarse / fine < 2.3


def test_goursat_oracle_equals_boundary_on_axes():
    exact = goursat_solution(2.0, 1.5, 8, 1.0)
    np.testing.assert_allclose(exact.data[0, 0, :], 1.5)
    np.testing.assert_allclose(exact.data[0, :, 0], 1.5)


def test_picard_iteration_reaches_the_sweep_solution(small_noise):
    problem = make_problem(16)
    exact = sweep_solve(problem, small_noise)
    solution = solve(problem, small_noise, tol=1e-13)
    assert solution.converged
    assert sup_l2_distance(solution.u.data, exact.data) < 1e-10
    rows = solution.iteration_rows()
    assert rows[0]["iteration"] == 1 and np.isnan(rows[0]["ratio"])
    assert len(rows) == solution.iterations
    assert 0.0 < solution.contraction_ratio < 1.0


def test_mean_ratio_of_differences():
    assert mean_ratio([1.0, 0.5, 0.25]) == pytest.approx(0.5)
    assert mean_ratio([4.0, 2.0, 0.0]) == pytest.approx(0.5)
    assert mean_ratio([1e-3]) == 0.0


def test_patching_gives_the_same_fixed_point(small_noise):
    problem = make_problem(16)
    exact = sweep_solve(problem, small_noise)
    solution = solve(problem, small_noise, tol=1e-13, patching=True)
    assert solution.patches >= 2
    assert len(solution.patch_ratios) == solution.patches ** 2
    assert solution.contraction_ratio == max(solution.patch_ratios) < 1.0
    assert sup_l2_distance(solution.u.data, exact.data) < 1e-10


def test_reconstruction_path_matches_the_fast_path(small_noise, haar2):
    problem = make_problem(16)
    u = sweep_solve(problem, small_noise)
    fast = picard_step(u, problem, small_noise)
    slow = picard_step(u, problem, small_noise, basis=haar2, path="reconstruction")
    assert sup_l2_distance(fast.data, slow.data) < 1e-10
    with pytest.raises(InvalidArgumentError):
        picard_step(u, problem, small_noise, path="reconstruction")


def test_iteration_budget_exhaustion_raises(small_noise):
    with pytest.raises(DivergenceError) as info:
        solve(make_problem(16), small_noise, tol=1e-13, max_iter=2)
    assert len(info.value.diagnostics["differences"]) == 2


def test_solution_is_adapted(small_noise):
    assert adaptedness_error(make_problem(16), small_noise, [0.5, 0.5]) == 0.0


def test_grid_mismatch_is_rejected(small_noise):
    with pytest.raises(InvalidArgumentError):
        solve(make_problem(8), small_noise)


def test_mesh_study_rows(stat_noise):
    study = mesh_convergence_study(make_problem(32), [2, 4, 8, 16, 32], stat_noise)
    assert [row["N"] for row in study.rows()] == [2, 4, 8, 16]
    assert all(e > 0 for e in study.errors)
    assert study.fit is not None


def test_mesh_study_needs_four_differences(small_noise):
    study = mesh_convergence_study(make_problem(16), [2, 4, 8, 16], small_noise)
    assert len(study.errors) == 3
    assert study.fit is None
    with pytest.raises(InvalidArgumentError):
        mesh_convergence_study(make_problem(16), [4, 8], small_noise)


def test_regularity_of_the_solution(stat_noise):
    problem = make_problem(32)
    solution = solve(problem, stat_noise)
    report = regularity_report(solution, problem)
    assert len(report["exponents"]) == 2
    assert all(e > 0.3 for e in report["exponents"])
    assert report["table"].flags
