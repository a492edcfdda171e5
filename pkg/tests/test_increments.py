import itertools

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from app.exceptions import InvalidArgumentError
from app.services.increments import (
    IndexSet,
    check_composition_identity,
    check_product_identity,
    evaluate_terms,
    project,
    rect_increment,
    shift_expand,
)


def polynomial(coeffs, d):
    exponents = [e for e in itertools.product(range(4), repeat=d) if sum(e) <= 3]
    powers = np.array(exponents)
    coeffs = np.asarray(coeffs[:len(exponents)])

    def f(z):
        z = np.asarray(z, dtype=float)
        return float(np.dot(coeffs, np.prod(z[None, :] ** powers, axis=1)))

    return f


unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
coefficients = st.lists(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False), min_size=20, max_size=20)


def test_index_set_members_and_axes():
    s = IndexSet.of([1, 3], 3)
    assert s.members == (1, 3)
    assert s.axes == (0, 2)
    assert 3 in s and 2 not in s
    assert s.label() == "{1,3}"
    assert s.complement() == IndexSet.of([2], 3)
    assert len(IndexSet.full(4)) == 4
    assert not IndexSet.empty(2)


def test_index_set_rejects_bad_members():
    with pytest.raises(InvalidArgumentError):
        IndexSet.of([0], 2)
    with pytest.raises(InvalidArgumentError):
        IndexSet.of([1, 1], 2)
    with pytest.raises(InvalidArgumentError):
        IndexSet.empty(0)


def test_subsets_are_in_bitmask_order():
    subsets = IndexSet.of([1, 3], 3).subsets()
    assert [s.mask for s in subsets] == [0, 1, 4, 5]
    assert len(IndexSet.all_subsets(3)) == 8


def test_project_replaces_theta_coordinates():
    out = project(IndexSet.of([2], 3), [1.0, 2.0, 3.0], [7.0, 8.0, 9.0])
    np.testing.assert_array_equal(out, [7.0, 2.0, 9.0])


def test_rect_increment_of_product_function():
    f = lambda z: float(np.prod(z))
    x = np.array([0.1, 0.2, 0.3])
    y = np.array([0.5, 0.7, 0.4])
    full = rect_increment(IndexSet.full(3), x, y, f)
    assert full == pytest.approx(np.prod(y - x), abs=1e-15)
    assert rect_increment(IndexSet.empty(3), x, y, f) == pytest.approx(f(x))


def test_one_dimensional_increment_is_a_difference():
    f = lambda z: float(z[0] ** 2)
    assert rect_increment(IndexSet.full(1), [0.5], [2.0], f) == pytest.approx(3.75)


def test_composition_rejects_overlapping_sets():
    f = lambda z: float(z.sum())
    with pytest.raises(InvalidArgumentError):
        check_composition_identity(IndexSet.of([1], 2), IndexSet.of([1, 2], 2), [0, 0], [1, 1], f)


@hsettings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3]), coefficients, st.lists(unit, min_size=6, max_size=6))
def test_composition_identity_for_polynomials(d, coeffs, coords):
    f = polynomial(coeffs, d)
    x, y = np.array(coords[:d]), np.array(coords[3:3 + d])
    for theta1, theta2 in itertools.product(IndexSet.all_subsets(d), repeat=2):
        if theta1.isdisjoint(theta2):
            assert check_composition_identity(theta1, theta2, x, y, f, tol=1e-10)


@hsettings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3]), coefficients, coefficients, st.lists(unit, min_size=6, max_size=6))
def test_product_identity_for_polynomials(d, cf, cg, coords):
    f, g = polynomial(cf, d), polynomial(cg, d)
    x, y = np.array(coords[:d]), np.array(coords[3:3 + d])
    for theta in IndexSet.all_subsets(d):
        assert check_product_identity(theta, x, y, f, g, tol=1e-10)


@hsettings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3]), coefficients, st.lists(unit, min_size=6, max_size=6))
def test_shift_expansion_reproduces_the_increment(d, coeffs, coords):
    f = polynomial(coeffs, d)
    x, y = np.array(coords[:d]), np.array(coords[3:3 + d])
    for theta, eta in itertools.product(IndexSet.all_subsets(d), repeat=2):
        if not theta.isdisjoint(eta):
            continue
        direct = rect_increment(theta, x, y, f)
        expanded = evaluate_terms(shift_expand(theta, eta, x, y), y, f)
        assert expanded == pytest.approx(direct, abs=1e-10 * max(1.0, abs(direct)))


def test_shift_expansion_term_count():
    terms = shift_expand(IndexSet.of([1], 3), IndexSet.of([2, 3], 3), [0.1, 0.2, 0.3], [0.9, 0.8, 0.7])
    assert len(terms) == 4
    assert sorted(sign for sign, _, _ in terms) == [-1.0, -1.0, 1.0, 1.0]
