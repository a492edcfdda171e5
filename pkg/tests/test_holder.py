import numpy as np
import pytest

from app.exceptions import InvalidArgumentError, NotAdaptedError
from app.models.distributions import white_noise_distribution
from app.models.germs import DistributionGerm
from app.models.test_function import TestFunction
from app.services.holder import (
    ConditioningContext,
    bdg_check,
    coherence_norm,
    deterministic_norm,
    distribution_norm,
    embedding_check,
    fit_rate,
    germ_increment,
    lm_norms,
    resample_sensitivity,
    stochastic_seminorms,
    table_rows,
)
from app.services.increments import IndexSet
from app.services.noise import brownian_sheet, deterministic_driver, sample_white_noise


def test_fit_rate_recovers_power_law():
    scales = [0.5, 0.25, 0.125, 0.0625]
    fit = fit_rate(scales, [3.0 * s ** 1.5 for s in scales])
    assert fit.slope == pytest.approx(1.5)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.intercept == pytest.approx(np.log2(3.0))


def test_fit_rate_needs_enough_positive_points():
    with pytest.raises(InvalidArgumentError):
        fit_rate([0.5, 0.25, 0.125, 0.0625], [1.0, 0.0, -1.0, 0.5])
    with pytest.raises(InvalidArgumentError):
        fit_rate([0.5, 0.25, 0.125], [1.0, 0.5, 0.25])


def test_lm_norms_match_direct_moments(rng):
    values = rng.standard_normal((500, 3))
    norms, se = lm_norms(values, 2.0)
    np.testing.assert_allclose(norms, np.sqrt(np.mean(values ** 2, axis=0)))
    assert np.all(se > 0)
    norms4, _ = lm_norms(values, 4.0)
    np.testing.assert_allclose(norms4, np.mean(values ** 4, axis=0) ** 0.25)


def test_deterministic_norm_of_product_polynomial():
    f = deterministic_driver("smooth_poly", 64, 1.0, 2)
    table = deterministic_norm(f, 1.0)
    full = table.entry([1, 2])
    assert full.value == pytest.approx(1.0, abs=1e-12)
    assert full.fit.slope == pytest.approx(2.0, abs=1e-9)
    assert table.entry([1]).value <= 1.0 + 1e-12


def test_sheet_increment_sizes_scale_with_the_box(stat_noise):
    table = stochastic_seminorms(brownian_sheet(stat_noise), 0.45)
    assert table.flags
    assert all(not e.eta for e in table.entries)
    assert table.entry([1, 2]).fit.slope == pytest.approx(1.0, abs=0.05)
    assert table.entry([1]).fit.slope == pytest.approx(0.5, abs=0.05)
    rows = table_rows(table)
    assert {"theta", "eta", "separation", "size", "value", "se", "slope", "r2"} <= set(rows[0])


def test_conditioned_future_increments_of_the_sheet_vanish(small_noise, small_sheet):
    context = ConditioningContext(small_noise, rebuild=brownian_sheet, linear=True)
    table = stochastic_seminorms(small_sheet, 0.45, 1.0, context=context, points=10, conditional_points=4)
    conditioned = [e for e in table.entries if e.eta]
    assert len(conditioned) == 5
    assert all(e.value == 0.0 for e in conditioned)
    assert not table.flags


def test_non_adapted_fields_are_rejected(small_sheet):
    with pytest.raises(NotAdaptedError):
        stochastic_seminorms(small_sheet.with_data(small_sheet.data, adapted=False), 0.45)


def test_embedding_of_sheet_exponents(small_sheet):
    report = embedding_check(small_sheet, 0.3, 0.45)
    assert report.passed
    assert report.low_norm <= report.high_norm


def test_distribution_norm_needs_resolved_scales(small_noise):
    with pytest.raises(InvalidArgumentError):
        distribution_norm(white_noise_distribution(small_noise), -0.5)


def test_white_noise_pairings_scale_like_inverse_square_root():
    noise = sample_white_noise(256, 1.0, 1, 400, seed=5)
    report = distribution_norm(white_noise_distribution(noise), -0.5, points=20)
    assert report.fits[0].slope == pytest.approx(-0.5, abs=0.15)
    assert report.value > 0
    assert report.flags


def test_constant_germ_has_vanishing_increments():
    noise = sample_white_noise(32, 1.0, 2, 16, seed=9)
    germ = DistributionGerm(white_noise_distribution(noise))
    psi = TestFunction.bump(1.0, 2)
    x, y = np.array([0.25, 0.25]), np.array([0.5, 0.375])
    np.testing.assert_array_equal(germ_increment(germ, IndexSet.full(2), x, y, psi), 0.0)
    np.testing.assert_array_equal(germ_increment(germ, IndexSet.empty(2), x, y, psi), germ.evaluate(y, psi))

    report = coherence_norm(germ, -1.0, 0.5, points=5)
    assert report.entries[0].theta == [] and report.entries[0].value > 0
    assert all(e.value == 0.0 for e in report.entries if e.theta)


def test_resample_sensitivity_of_a_constant_germ():
    noise = sample_white_noise(32, 1.0, 2, 8, seed=9)
    germ = DistributionGerm(white_noise_distribution(noise))
    report = resample_sensitivity(germ, ConditioningContext(noise), resamples=3)
    assert report["resamples"] == 3
    assert report["relative_change"] == 0.0 and report["l2_doubled"] == 0.0
    with pytest.raises(InvalidArgumentError):
        resample_sensitivity(germ, ConditioningContext(noise), lam=0.7, resamples=3)


def test_bdg_bound_for_white_noise_masses(small_noise):
    def builder(nz):
        return nz.coarsen(4).data

    report = bdg_check(builder, small_noise, IndexSet.full(2), IndexSet.empty(2), linear=True)
    assert not report.violated
    assert report.rhs > 0
    assert report.anchors > 1
    assert all(0.0 <= y <= 0.75 for y in report.anchor)
    # the box from y to the top corner has area (1 - y1)(1 - y2)
    area = (1.0 - report.anchor[0]) * (1.0 - report.anchor[1])
    assert report.lhs == pytest.approx(np.sqrt(area), rel=0.3)


def test_conditioned_bdg_bound_at_sampled_anchors(small_noise):
    def builder(nz):
        return nz.coarsen(4).data

    reports = [bdg_check(builder, small_noise, IndexSet.full(2), IndexSet.of([1], 2), linear=True, seed=s)
               for s in (1, 2)]
    assert all(not r.violated and r.rhs > 0 for r in reports)
    assert all(r.anchors >= 2 for r in reports)
