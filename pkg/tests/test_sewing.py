import numpy as np
import pytest

from app.exceptions import InvalidArgumentError, SupportError, UnsupportedOperationError
from app.models.test_function import TestFunction
from app.services.calculus import walsh_sum
from app.services.increments import IndexSet
from app.services.noise import brownian_sheet, sample_white_noise
from app.services.sewing import (
    AdditiveGerm,
    FunctionGerm,
    ProductTwoPointGerm,
    SquareGerm,
    additivity_defect,
    delta_op,
    delta_scaling_fit,
    partition_boxes,
    riemann_sum,
    scaling_report,
    sew,
    sew_on_grid,
    sewing_reconstruction_bridge,
)


@pytest.fixture(scope="module")
def fine_sheet():
    return brownian_sheet(sample_white_noise(128, 1.0, 2, 200, seed=21))


def volume(lo, hi):
    return np.prod(hi - lo, axis=1)


def test_additive_germs_have_no_delta(small_sheet):
    Xi = AdditiveGerm(small_sheet)
    for eta in IndexSet.all_subsets(2)[1:]:
        np.testing.assert_allclose(delta_op(eta, [0.5, 0.5], Xi, [0.25, 0.25], [0.75, 0.75]), 0.0, atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        delta_op(IndexSet.full(2), [0.9, 0.5], Xi, [0.25, 0.25], [0.75, 0.75])


def test_riemann_sums_of_additive_germs_are_exact(small_sheet):
    Xi = AdditiveGerm(small_sheet)
    s, t = [0.125, 0.25], [0.875, 0.75]
    for theta in IndexSet.all_subsets(2):
        np.testing.assert_allclose(riemann_sum(Xi, theta, s, t, [4, 2]), Xi.evaluate(s, t), atol=1e-12)


def test_partition_refines_only_theta_axes():
    lo, hi = partition_boxes(IndexSet.of([1], 2), np.array([0.0, 0.0]), np.array([1.0, 0.5]), [4, 4])
    assert lo.shape == (4, 2)
    np.testing.assert_allclose(hi[:, 1], 0.5)
    np.testing.assert_allclose(lo[:, 0], [0.0, 0.25, 0.5, 0.75])


def test_sewing_the_product_germ_gives_the_walsh_sum(small_noise, small_sheet):
    Xi = ProductTwoPointGerm(small_sheet, small_sheet)
    result = sew(Xi, IndexSet.full(2), [0.0, 0.0], [1.0, 1.0])
    np.testing.assert_allclose(result.values, walsh_sum(small_sheet, small_noise), atol=1e-12)
    assert result.log.levels == [0, 1, 2, 3, 4]
    rows = result.rows()
    assert len(rows) == 5 and np.isnan(rows[0]["cauchy_increment"])


def test_sewing_a_deterministic_additive_germ_converges():
    Xi = FunctionGerm(volume, 2)
    result = sew(Xi, IndexSet.full(2), [0.0, 0.0], [0.5, 1.0], levels=[0, 1, 2, 3])
    np.testing.assert_allclose(result.values, 0.5)
    assert result.log.converged
    with pytest.raises(InvalidArgumentError):
        sew(Xi, IndexSet.full(2), [0.0, 0.0], [0.5, 1.0])


def test_square_germ_sews_to_the_area(small_sheet):
    total = sew_on_grid(SquareGerm(small_sheet), IndexSet.full(2), [0.0, 0.0], [1.0, 1.0])
    assert float(np.mean(total)) == pytest.approx(1.0, rel=0.05)


def test_sewn_product_germ_is_additive(small_sheet):
    Xi = ProductTwoPointGerm(small_sheet, small_sheet)
    assert additivity_defect(Xi, IndexSet.full(2), [0.0, 0.0], [0.5, 0.25], [1.0, 1.0]) < 1e-12


def test_bridge_is_exact_at_the_grid_level(small_sheet, haar2):
    Xi = ProductTwoPointGerm(small_sheet, small_sheet)
    report = sewing_reconstruction_bridge(Xi, haar2, [0.0, 0.0], TestFunction.bump(1.0, 2))
    assert report["level"] == 4
    assert report["relative_l2"] < 1e-8


def test_bridge_preconditions(small_sheet, haar2, db2_2d):
    Xi = ProductTwoPointGerm(small_sheet, small_sheet)
    bump = TestFunction.bump(1.0, 2)
    with pytest.raises(UnsupportedOperationError):
        sewing_reconstruction_bridge(Xi, db2_2d, [0.0, 0.0], bump)
    with pytest.raises(SupportError):
        sewing_reconstruction_bridge(Xi, haar2, [0.5, 0.5], bump)
    with pytest.raises(InvalidArgumentError):
        sewing_reconstruction_bridge(Xi, haar2, [0.0, 0.0], bump, n=5)


def test_unsewn_germ_scales_with_half_the_dimension(fine_sheet):
    Xi = ProductTwoPointGerm(fine_sheet, fine_sheet)
    report = scaling_report(Xi, IndexSet.empty(2), predicted=1.0, tolerance=0.15)
    assert report["passed"]
    assert len(report["sizes"]) == len(report["scales"]) == 4


def test_fully_sewn_remainder_scales_with_the_dimension(fine_sheet):
    Xi = ProductTwoPointGerm(fine_sheet, fine_sheet)
    report = scaling_report(Xi, IndexSet.full(2), predicted=2.0, tolerance=0.2, points=16,
                            scales=[0.25, 0.125, 0.0625, 0.03125])
    assert report["passed"]


def test_conditioned_scaling_needs_a_context(small_sheet):
    with pytest.raises(UnsupportedOperationError):
        scaling_report(ProductTwoPointGerm(small_sheet, small_sheet), IndexSet.full(2), IndexSet.of([1], 2))


def test_one_directional_delta_scaling(fine_sheet):
    Xi = ProductTwoPointGerm(fine_sheet, fine_sheet)
    fit = delta_scaling_fit(Xi, IndexSet.of([1], 2))
    assert fit.slope == pytest.approx(1.5, abs=0.15)


def test_three_scales_give_no_rate(fine_sheet):
    Xi = ProductTwoPointGerm(fine_sheet, fine_sheet)
    report = scaling_report(Xi, IndexSet.empty(2), predicted=1.0, scales=[0.25, 0.125, 0.0625])
    assert report["fit"] is None
    assert report["passed"] is None
