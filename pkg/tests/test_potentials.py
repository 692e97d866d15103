import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import square_cell_average
from ucplab.discretization import Domain, build_grid
from ucplab.potentials import (
    CATALOG_NAMES, AdmissibilityConstants, Bounded, PowerSingularity, RandomSample, SubclassScaling, Sum,
    catalog, check_relative_bound, constant, cosine, estimate_constants, extend_by_reflection, lp_exponent,
    restriction_constants, sample_on_grid, subclass_constants, zero,
)


def grid1(bc="N", n=64, a=0.0, b=1.0):
    return build_grid(Domain(((a, b),), (bc,)), [n])


# --- sampling --------------------------------------------------------------------------


def test_constant_sampling():
    g = build_grid(Domain(((0, 1), (0, 2)), ("D", "P")), [4, 5])
    np.testing.assert_array_equal(sample_on_grid(constant(5.0), g), 5.0)


def test_sum_is_linear():
    g = grid1("D", 7)
    np.testing.assert_array_equal(sample_on_grid(Sum([constant(1.0), constant(2.0)]), g), 3.0)
    np.testing.assert_array_equal(sample_on_grid(constant(1.0) + constant(2.0), g), 3.0)


def test_power_singularity_at_node_2d():
    g = build_grid(Domain(((0, 1), (0, 1)), ("P", "P")), [8, 8])
    pot = PowerSingularity((0.5, 0.5), 0.4, cap=1e6)
    v = sample_on_grid(pot, g)
    k = int(np.flatnonzero(np.all(np.isclose(g.coords, 0.5), axis=1))[0])
    ref = square_cell_average(g.spacing[0], 0.4)
    assert np.all(np.isfinite(v))
    assert v[k] == pytest.approx(ref, rel=1e-3)
    # away from the centre the plain cell average is close to the point value
    far = int(np.argmax(np.linalg.norm(g.coords - 0.5, axis=1)))
    r = np.linalg.norm(g.coords[far] - 0.5)
    assert v[far] == pytest.approx(r**-0.4, rel=1e-2)


def test_power_singularity_1d_cell_average():
    # node exactly on the singularity: mean of |x|^-0.4 over (-h/2, h/2) is (h/2)^-0.4 / 0.6
    g = grid1("P", 10)
    v = sample_on_grid(PowerSingularity((0.5,), 0.4), g)
    h = g.spacing[0]
    assert v[5] == pytest.approx((h / 2) ** -0.4 / 0.6, rel=1e-3)


def test_power_requires_cap_when_singular():
    g = grid1("P", 10)
    with pytest.raises(ValueError, match="no cap"):
        sample_on_grid(PowerSingularity((0.5,), 0.4, cap=None), g)


def test_power_center_outside_domain():
    with pytest.raises(ValueError, match="outside"):
        sample_on_grid(PowerSingularity((2.0,), 0.4), grid1())


@pytest.mark.parametrize("gamma,d,ok", [(0.4, 1, True), (0.6, 1, False), (0.9, 2, True), (1.0, 2, False),
                                        (0.9, 3, True), (1.2, 3, False)])
def test_lp_thresholds(gamma, d, ok):
    p = lp_exponent(gamma, d)
    assert (p is not None) == ok
    if ok:
        assert gamma * p < d
        assert p >= {1: 2, 2: 2, 3: 3}[d]
        if d == 2:
            assert p > 2


def test_random_sample_couplings_range():
    with pytest.raises(ValueError):
        RandomSample(np.array([0.5, 1.5]), lambda x: np.ones(len(x)))


# --- relative-bound constants ------------------------------------------------------------


def test_constant_potential_constants():
    g = grid1("N", 32)
    c = estimate_constants(constant(3.0), g, [1.0, 4.0, 9.0, 16.0])
    assert (c.lambda1, c.lambda2) == (0.0, 9.0)
    assert c.provenance.startswith("estimated")


def test_zero_potential_constants():
    c = estimate_constants(zero(), grid1("N", 32), [0.0, 1.0])
    assert (c.lambda1, c.lambda2) == (0.0, 0.0)


def test_singular_1d_constants_pass_check():
    g = grid1("N", 128)
    pot = PowerSingularity((0.0,), 0.25, cap=1e6)
    c = estimate_constants(pot, g, list(range(101)))
    assert check_relative_bound(sample_on_grid(pot, g), g, c, n_vectors=100, seed=7) == 0
    assert c.lambda1 > 0


def test_infeasible_lambda2_grid():
    with pytest.raises(ValueError, match="mean"):
        estimate_constants(constant(3.0), grid1("N", 16), [1.0])
    with pytest.raises(ValueError, match="empty"):
        estimate_constants(constant(3.0), grid1("N", 16), [])


@pytest.mark.parametrize("bc", ["D", "N", "P"])
def test_bounded_analytic_pair_valid(bc):
    g = build_grid(Domain(((0, 2), (0, 1)), (bc, "N")), [12, 9])
    pot = cosine(3.0, [7.0, 7.0], offset=3.0)
    c = pot.analytic_constants(g)
    vals = sample_on_grid(pot, g)
    assert c.lambda1 == 0 and c.lambda2 >= np.max(vals**2) * (1 - 1e-12)
    assert check_relative_bound(vals, g, c, seed=3) == 0


@pytest.mark.parametrize("name", CATALOG_NAMES)
def test_catalog_constants_pass(name):
    dom = Domain(((0, 4),), ("N",))
    g = build_grid(dom, [96])
    c = estimate_constants(catalog(dom)[name], g)
    assert check_relative_bound(sample_on_grid(catalog(dom)[name], g), g, c, seed=11) == 0


def test_catalog_rejects_inadmissible_gamma():
    with pytest.raises(ValueError):
        catalog(Domain(((0, 1),), ("N",)), gamma=0.6)


def test_constants_nonnegative():
    with pytest.raises(ValueError):
        AdmissibilityConstants(-1.0, 0.0)


# --- reflection extension -------------------------------------------------------------------


def test_extension_of_constant():
    g = build_grid(Domain(((0, 1), (0, 1)), ("D", "P")), [5, 4])
    ext = extend_by_reflection(np.full(g.size, 2.5), g)
    assert ext.values.shape == (15, 12)
    np.testing.assert_array_equal(ext.values, 2.5)


def test_dirichlet_extension_mirror():
    g = grid1("D", 9)
    x = g.axes[0]
    ext = extend_by_reflection(x, g)
    X, V = ext.axes[0], ext.values
    lookup = dict(zip(np.round(X, 12), V))
    for xi, vi in zip(X, V):
        assert lookup.get(round(-xi, 12), vi) == vi
        assert lookup.get(round(2 - xi, 12), vi) == vi
    # the middle block is V itself and both copies are mirrored
    np.testing.assert_array_equal(V[9:18], x)
    np.testing.assert_array_equal(V[:9], x[::-1])


def test_periodic_extension_copy():
    g = grid1("P", 8)
    x = g.axes[0]
    ext = extend_by_reflection(x, g)
    X, V = ext.axes[0], ext.values
    for i in range(len(X) - 8):
        assert X[i + 8] == pytest.approx(X[i] + 1)
        assert V[i + 8] == V[i]


@given(shape=st.tuples(st.integers(3, 6), st.integers(3, 6)),
       bc=st.tuples(st.sampled_from("DNP"), st.sampled_from("DNP")), seed=st.integers(0, 1000))
def test_extension_restriction_identity(shape, bc, seed):
    g = build_grid(Domain(((0, 1), (-1, 1)), bc), shape)
    v = np.random.default_rng(seed).standard_normal(g.size)
    ext = extend_by_reflection(v, g)
    np.testing.assert_array_equal(ext.restrict().reshape(-1), v)


def test_extension_resolution_mismatch():
    with pytest.raises(ValueError, match="resolution"):
        extend_by_reflection(np.ones(5), grid1("D", 6))


def test_constants_on_extension_pass():
    dom = Domain(((0, 2),), ("N",))
    g = build_grid(dom, [48])
    v = sample_on_grid(catalog(dom)["cosine+power"], g)
    ext = extend_by_reflection(v, g)
    c0 = estimate_constants(v, g)
    c1 = estimate_constants(ext.values.reshape(-1), ext.grid)
    assert check_relative_bound(v, g, c0) == 0
    assert check_relative_bound(ext.values.reshape(-1), ext.grid, c1) == 0


# --- constant arithmetic ---------------------------------------------------------------------


def test_restriction_examples():
    assert restriction_constants(1, 0, 2, 2).as_tuple() == (18, 18)
    assert restriction_constants(1, 1, 1, 1).as_tuple() == (6, 27)
    assert restriction_constants(0, 5, 3.0, 3).as_tuple() == (0, 135)


def test_restriction_exact_rational():
    c = restriction_constants(Fraction(1, 3), Fraction(2, 7), Fraction(3, 2), 2)
    assert c.lambda1 == Fraction(6)
    assert c.lambda2 == 9 * (Fraction(8, 3) / Fraction(9, 4) + Fraction(2, 7))


@given(l1=st.floats(0, 10), l2=st.floats(0, 10), L0=st.floats(0.1, 10), d=st.integers(1, 3),
       dl=st.floats(0, 5))
def test_restriction_monotone(l1, l2, L0, d, dl):
    base = restriction_constants(l1, l2, L0, d)
    for bigger in (restriction_constants(l1 + dl, l2, L0, d), restriction_constants(l1, l2 + dl, L0, d)):
        assert bigger.lambda1 >= base.lambda1 and bigger.lambda2 >= base.lambda2
    # larger cubes weaken the gradient penalty
    assert restriction_constants(l1, l2, L0 + dl, d).lambda2 <= base.lambda2
    assert restriction_constants(l1, l2, L0, d + 1).lambda2 >= base.lambda2


def test_restriction_rejects_bad_input():
    with pytest.raises(ValueError):
        restriction_constants(1, 1, 0, 1)


def test_subclass_examples():
    for eps in (0.1, 1.0, 7.0):
        assert subclass_constants(SubclassScaling(0, 2.5), eps).as_tuple() == (0, 2.5)
    assert subclass_constants(SubclassScaling(1, 0), 1 / 4).as_tuple() == (0.25, 4.0)
    assert subclass_constants(SubclassScaling(2, 3), 1).as_tuple() == (2, 5)
    with pytest.raises(ValueError):
        subclass_constants(SubclassScaling(1, 1), 0.0)
    with pytest.raises(ValueError):
        SubclassScaling(-1, 0)


def test_bounded_func_broadcast():
    g = grid1("D", 5)
    pot = Bounded(lambda x: x[:, 0] ** 2, name="x2")
    np.testing.assert_allclose(sample_on_grid(pot, g), g.axes[0] ** 2)
    assert pot.analytic_constants(g).lambda2 == pytest.approx(np.max(g.axes[0] ** 4))
    assert math.isfinite(pot.analytic_constants(g).lambda2)
