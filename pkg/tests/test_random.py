import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import wilson
from ucplab.discretization import assemble_hamiltonian
from ucplab.randomops import (
    RandomEnsemble, draw_operator, gap_precheck, ils_experiment, lifting_check, plateau_shape, spectrum,
    wegner_experiment, wilson_interval,
)


def ens(**kw):
    base = dict(d=1, nodes_per_unit=8, delta=0.25, amplitude=4.0, master_seed=3)
    base.update(kw)
    return RandomEnsemble(**base)


# --- operators ------------------------------------------------------------------------------------


def test_forced_couplings():
    e = ens()
    grid, lap, v0, U = e.parts(4)
    H0 = assemble_hamiltonian(grid, v0)
    np.testing.assert_array_equal(draw_operator(e, 4, 0, couplings=0.0).matrix, H0.matrix)
    np.testing.assert_array_equal(draw_operator(e, 4, 0, couplings=1.0).matrix,
                                  assemble_hamiltonian(grid, v0 + e.W(4)).matrix)


def test_draws_bitwise_deterministic():
    a = draw_operator(ens(), 8, 17).matrix
    b = draw_operator(ens(), 8, 17).matrix
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, draw_operator(ens(), 8, 18).matrix)
    assert not np.array_equal(a, draw_operator(ens(master_seed=4), 8, 17).matrix)


def test_coupling_monotonicity():
    e = ens()
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.uniform(size=e.cells(6))
        j = rng.integers(e.cells(6))
        w2 = w.copy()
        w2[j] = rng.uniform(w[j], 1.0)
        lo = spectrum(draw_operator(e, 6, 0, couplings=w))
        hi = spectrum(draw_operator(e, 6, 0, couplings=w2))
        assert np.all(hi >= lo - 1e-10)


def test_tridiagonal_spectrum_matches_dense():
    H = draw_operator(ens(), 6, 2)
    np.testing.assert_allclose(spectrum(H), np.linalg.eigvalsh(H.matrix), atol=1e-10)
    H2 = draw_operator(ens(d=2, nodes_per_unit=4), 3, 0)
    np.testing.assert_allclose(spectrum(H2), np.linalg.eigvalsh(H2.matrix), atol=1e-10)


def test_plateau_shape_values():
    u = plateau_shape(0.25, floor=0.2, amplitude=1.0)
    np.testing.assert_allclose(u(np.array([[0.0], [0.25], [0.375], [0.5]])), [1.0, 1.0, 0.5, 0.2])
    with pytest.raises(ValueError):
        plateau_shape(0.25, amplitude=0.5)


def test_embedded_ball_needs_resolution():
    with pytest.raises(ValueError, match="refine"):
        RandomEnsemble(nodes_per_unit=2, delta=0.1).parts(4)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        RandomEnsemble(shape="spiky")
    with pytest.raises(ValueError):
        draw_operator(ens(), 4, 0, couplings=1.5)


# --- Wegner ------------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def wegner():
    return wegner_experiment(ens(), 2.0, [0.04, 0.08, 0.16], [8, 16], 100, 3.0)


def test_wegner_counts_nondecreasing(wegner):
    assert np.all(np.diff(wegner.mean, axis=1) >= 0)


def test_wegner_volume_scaling(wegner):
    # doubling L in d = 1 doubles the expected count
    m8, m16 = wegner.mean
    s8, s16 = wegner.stderr
    for k in range(len(wegner.epsilons)):
        assert abs(m16[k] - 2 * m8[k]) <= 2 * math.hypot(s16[k], 2 * s8[k])


def test_wegner_fit_reported(wegner):
    assert math.isfinite(wegner.tau_w) and wegner.tau_stderr > 0
    assert 0 <= wegner.r2 <= 1
    assert wegner.C > 0


def test_wegner_refusals():
    with pytest.raises(ValueError, match="at least 50"):
        wegner_experiment(ens(), 2.0, [0.1, 0.2], [8], 49, 3.0)
    with pytest.raises(ValueError, match="E0"):
        wegner_experiment(ens(), 2.0, [0.1, 0.4], [8], 50, 3.0)
    with pytest.raises(ValueError, match="two positive"):
        wegner_experiment(ens(), 2.0, [0.1], [8], 50, 3.0)


# --- lifting -----------------------------------------------------------------------------------------


def test_lift_zero_at_zero_coupling():
    t = lifting_check(ens(), 8, 0, [0.0, 0.1], [1, 2, 3], 50.0)
    assert all(r.lift == 0 for r in t.rows if r.epsilon == 0)


def test_lift_with_floor():
    t = lifting_check(ens(floor=0.2, amplitude=1.0), 8, 1, [0.01, 0.05, 0.1, 0.2], [1, 2, 4, 8], 100.0)
    assert t.W_min >= 0.2
    assert t.lower_bound_holds and t.upper_bound_holds
    assert t.all_positive and t.all_monotone
    assert set(t.exponents) == {1, 2, 4, 8}


def test_lift_energy_filter_and_errors():
    e = ens()
    t = lifting_check(e, 8, 0, [0.1], [1, 40], 100.0)
    assert {r.k for r in t.rows} == {1}  # E_40 lies above E0
    with pytest.raises(ValueError, match="outside"):
        lifting_check(e, 8, 0, [0.1], [65], 1e6)
    with pytest.raises(ValueError):
        lifting_check(e, 4, 0, [-0.1], [1], 10.0)


# --- initial length scale ------------------------------------------------------------------------------


def test_ils_deterministic_gap():
    rec = ils_experiment(ens(), -1.0, 0.5, 1.0, [8, 16], 50)
    assert all(r.p_hat == 1.0 for r in rec.rows)
    assert rec.L0 == 8 and rec.passed and rec.gap_checked
    assert rec.note  # d = 1 is outside the stated dimension range


def test_ils_negative_control():
    rec = ils_experiment(ens(amplitude=1.0), None, 0.2, 1.0, [8, 16], 50, require_gap=False, center_energy=2.0)
    assert all(r.p_hat <= 0.1 for r in rec.rows)
    assert rec.L0 is None


def test_gap_precheck_names_t():
    e = ens()
    with pytest.raises(ValueError, match="t=0.0"):
        gap_precheck(e, 8, 0.0, 5.0)
    with pytest.raises(ValueError, match="t="):
        ils_experiment(e, 0.0, 0.5, 1.0, [8], 50)


def test_ils_argument_errors():
    with pytest.raises(ValueError):
        ils_experiment(ens(), -1.0, 1.5, 1.0, [8], 50)
    with pytest.raises(ValueError, match="exactly one"):
        ils_experiment(ens(), -1.0, 0.5, 1.0, [8], 50, center_energy=2.0)


def test_ils_rerun_identical():
    a = ils_experiment(ens(), None, 0.3, 1.0, [8], 50, require_gap=False, center_energy=5.0)
    b = ils_experiment(ens(), None, 0.3, 1.0, [8], 50, require_gap=False, center_energy=5.0)
    assert a.rows == b.rows


@settings(max_examples=60)
@given(n=st.integers(1, 500), data=st.data())
def test_wilson_matches_scipy(n, data):
    k = data.draw(st.integers(0, n))
    np.testing.assert_allclose(wilson_interval(k, n), wilson(k, n), atol=1e-12)
