import numpy as np
import pytest

from app.exceptions import ConsistencyError, InvalidArgumentError, SupportError
from app.models.distributions import WaveletPairings, white_noise_distribution
from app.models.germs import CoherenceClass, DistributionGerm, EvaluationCache, ProductGerm
from app.models.test_function import TestFunction
from app.services.increments import IndexSet
from app.services.noise import brownian_sheet
from app.services.reconstruction import (
    PartialReconstruction,
    incoherent_germ,
    partial_sum,
    reconstruct,
    rect_germ_sum,
    verify_characterization,
)


@pytest.fixture
def box():
    return TestFunction.indicator([0.25, 0.25], [0.75, 0.75], 1.0)


@pytest.fixture
def sheet_germ(small_noise, small_sheet):
    return ProductGerm(small_sheet, white_noise_distribution(small_noise), field_builder=brownian_sheet,
                       declared=CoherenceClass((-0.5, -0.5), (0.0, 0.0), (float("inf"),) * 2))


def test_haar_partial_sum_of_noise_is_the_pairing(small_noise, haar2, box):
    germ = DistributionGerm(white_noise_distribution(small_noise))
    values = partial_sum(germ, IndexSet.empty(2), [0.5, 0.5], box, 4, haar2)
    np.testing.assert_allclose(values, small_noise.pair_indicator([0.25, 0.25], [0.75, 0.75]), atol=1e-12)


def test_reconstruction_of_smooth_pairing_converges(small_noise, haar2, box):
    germ = DistributionGerm(white_noise_distribution(small_noise))
    result = reconstruct(germ, IndexSet.full(2), [0.5, 0.5], box, haar2)
    assert result.log.converged and not result.log.diverged
    assert result.log.levels == [0, 1, 2, 3, 4]
    assert result.log.increments[-1] < 1e-10
    assert len(result.history) == 5


def test_incoherent_germ_diverges(small_noise, haar2, box):
    germ = incoherent_germ(small_noise, seed=3)
    result = reconstruct(germ, IndexSet.full(2), [0.25, 0.25], box, haar2)
    assert result.log.diverged
    assert not result.log.converged


def test_empty_level_range_is_rejected(small_noise, haar2, box):
    germ = DistributionGerm(white_noise_distribution(small_noise))
    with pytest.raises(InvalidArgumentError):
        reconstruct(germ, IndexSet.empty(2), [0.5, 0.5], box, haar2, n_max=1, n_min=3)


def test_wavelets_leaving_the_domain_raise(small_noise, db2_2d):
    germ = DistributionGerm(white_noise_distribution(small_noise))
    edge = TestFunction.indicator([0.0, 0.0], [0.25, 0.25], 1.0)
    with pytest.raises(SupportError):
        partial_sum(germ, IndexSet.empty(2), [0.0, 0.0], edge, 2, db2_2d)


def test_rect_germ_sum_for_empty_kappa_is_the_partial_sum(sheet_germ, haar2, box):
    x = [0.25, 0.5]
    direct = partial_sum(sheet_germ, IndexSet.empty(2), x, box, 4, haar2)
    np.testing.assert_allclose(rect_germ_sum(sheet_germ, IndexSet.empty(2), x, box, 4, haar2), direct)
    full = rect_germ_sum(sheet_germ, IndexSet.full(2), x, box, 4, haar2)
    assert full.shape == direct.shape


def test_partial_reconstruction_records_logs(sheet_germ, haar2, box):
    recon = PartialReconstruction(sheet_germ, IndexSet.of([1], 2), [0.25, 0.25], haar2)
    values = recon(box)
    assert values.shape == (sheet_germ.M,)
    assert list(recon.logs.values())[0].levels[-1] == 4


def test_characterization_of_sheet_times_noise(sheet_germ, small_noise, haar2):
    report = verify_characterization(sheet_germ, sheet_germ.declared, haar2, noise=small_noise)
    assert report.identity_error < 1e-10
    assert report.independence_error == 0.0
    assert report.measurability_error == pytest.approx(0.0, abs=1e-12)
    assert report.passed


class CountingGerm(DistributionGerm):
    def __init__(self, dist):
        super().__init__(dist)
        self.calls = 0

    def wavelet_evaluations(self, theta, x, n, basis):
        self.calls += 1
        return super().wavelet_evaluations(theta, x, n, basis)


class MisweightedGerm(ProductGerm):
    """Lattice evaluations off by a constant factor from the pointwise germ."""

    def wavelet_evaluations(self, theta, x, n, basis):
        evals = super().wavelet_evaluations(theta, x, n, basis)
        return WaveletPairings(1.5 * evals.values, evals.k_lo, evals.levels)


@pytest.mark.parametrize("kappa", [[], [1], [2], [1, 2]])
def test_rect_germ_sum_matches_pointwise_increments(sheet_germ, haar2, box, kappa):
    values = rect_germ_sum(sheet_germ, IndexSet.of(kappa, 2), [0.25, 0.5], box, 4, haar2, crosscheck=True)
    assert values.shape == (sheet_germ.M,)


def test_rect_germ_sum_rejects_inconsistent_lattice_evaluations(small_noise, small_sheet, haar2, box):
    germ = MisweightedGerm(small_sheet, white_noise_distribution(small_noise))
    assert np.any(rect_germ_sum(germ, IndexSet.empty(2), [0.25, 0.5], box, 4, haar2) != 0.0)
    with pytest.raises(ConsistencyError):
        rect_germ_sum(germ, IndexSet.empty(2), [0.25, 0.5], box, 4, haar2, crosscheck=True)
    with pytest.raises(ConsistencyError):
        verify_characterization(germ, CoherenceClass((-0.5,) * 2, (0.0,) * 2, (1.0,) * 2), haar2)


def test_lattice_evaluations_are_memoized(small_noise, haar2, box):
    germ = CountingGerm(white_noise_distribution(small_noise))
    x = [0.25, 0.5]
    first = partial_sum(germ, IndexSet.empty(2), x, box, 4, haar2)
    np.testing.assert_array_equal(partial_sum(germ, IndexSet.empty(2), x, box, 4, haar2), first)
    assert germ.calls == 1
    rect_germ_sum(germ, IndexSet.full(2), x, box, 4, haar2)
    assert germ.calls == 4
    rect_germ_sum(germ, IndexSet.full(2), x, box, 4, haar2)
    assert germ.calls == 4
    partial_sum(germ, IndexSet.empty(2), [0.5, 0.5], box, 4, haar2)
    partial_sum(germ, IndexSet.empty(2), x, box, 3, haar2)
    assert germ.calls == 6


def test_evaluation_cache_evicts_least_recently_used():
    cache = EvaluationCache(max_bytes=200)

    def pairings():
        return WaveletPairings(np.zeros(10), (0,), (1,))

    cache.get_or_compute(("a",), None, pairings)
    cache.get_or_compute(("b",), None, pairings)
    cache.get_or_compute(("a",), None, pairings)
    cache.get_or_compute(("c",), None, pairings)
    assert len(cache) == 2
    assert (cache.hits, cache.misses) == (1, 3)
    cache.get_or_compute(("b",), None, pairings)
    assert cache.misses == 4


def test_oversized_evaluations_are_not_cached():
    cache = EvaluationCache(max_bytes=16)
    cache.get_or_compute(("a",), None, lambda: WaveletPairings(np.zeros(10), (0,), (1,)))
    assert len(cache) == 0
