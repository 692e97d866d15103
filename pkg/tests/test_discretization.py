import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dirichlet_eigs, neumann_eigs, periodic_eigs, tridiagonal
from ucplab.discretization import (
    Domain, assemble_hamiltonian, assemble_laplacian, build_grid, dump_grid_csv, eigendecompose,
    forward_differences, symmetry_defect,
)


def line(length, bc, n):
    return build_grid(Domain(((0.0, length),), (bc,)), [n])


# --- build_grid -----------------------------------------------------------------


def test_dirichlet_grid_nodes():
    g = line(1.0, "D", 3)
    assert g.spacing == (0.25,)
    np.testing.assert_allclose(g.axes[0], [0.25, 0.5, 0.75])


def test_periodic_grid_nodes():
    g = line(1.0, "P", 4)
    assert g.spacing == (0.25,)
    np.testing.assert_allclose(g.axes[0], [0.0, 0.25, 0.5, 0.75])


def test_mixed_grid_count():
    g = build_grid(Domain(((0, 2), (0, 1)), ("D", "N")), [7, 4])
    assert g.spacing == (0.25, 0.25)
    assert g.size == 28
    assert g.coords.shape == (28, 2)


def test_neumann_grid_is_cell_centred():
    g = line(1.0, "N", 4)
    np.testing.assert_allclose(g.axes[0], [0.125, 0.375, 0.625, 0.875])


@pytest.mark.parametrize("bc", ["D", "N", "P"])
def test_nodes_inside_closure(bc):
    g = build_grid(Domain(((-1, 2), (0, 0.5)), (bc, bc)), [5, 6])
    assert np.all(g.coords >= [-1, 0]) and np.all(g.coords <= [2, 0.5])


def test_grid_rejections():
    with pytest.raises(ValueError, match="at least 3"):
        line(1.0, "D", 2)
    with pytest.raises(ValueError):
        Domain(((0, 1),) * 4, ("D",) * 4)
    with pytest.raises(ValueError):
        Domain(((1, 0),), ("D",))
    with pytest.raises(ValueError):
        Domain(((0, math.inf),), ("D",))


# --- Laplacian ------------------------------------------------------------------------


def test_dirichlet_n3_eigenvalues():
    A = assemble_laplacian(line(4.0, "D", 3)).toarray()
    np.testing.assert_array_equal(A, tridiagonal(3, 1.0, "D"))
    ev = np.linalg.eigvalsh(A)
    np.testing.assert_allclose(ev, [2 - math.sqrt(2), 2, 2 + math.sqrt(2)], rtol=1e-12)


@pytest.mark.parametrize("n", [3, 4, 9, 20])
def test_neumann_kernel(n):
    A = assemble_laplacian(line(1.0, "N", n))
    np.testing.assert_array_equal(A @ np.ones(n), np.zeros(n))


def test_periodic_n4_eigenvalues():
    ev = np.linalg.eigvalsh(assemble_laplacian(line(4.0, "P", 4)).toarray())
    np.testing.assert_allclose(ev, [0, 2, 2, 4], atol=1e-12)


@given(n=st.integers(3, 64), bc=st.sampled_from(["D", "N", "P"]), length=st.floats(0.5, 10))
def test_closed_form_spectra(n, bc, length):
    g = line(length, bc, n)
    h = g.spacing[0]
    ev = eigendecompose(assemble_laplacian(g)).values
    ref = {"D": dirichlet_eigs, "N": neumann_eigs, "P": periodic_eigs}[bc](n, h)
    scale = np.max(ref)
    assert np.max(np.abs(ev - np.sort(ref))) <= 1e-10 * scale


@given(shape=st.tuples(st.integers(3, 7), st.integers(3, 7)),
       bc=st.tuples(st.sampled_from("DNP"), st.sampled_from("DNP")), seed=st.integers(0, 2**16))
def test_stiffness_equals_gradient_form(shape, bc, seed):
    g = build_grid(Domain(((0, 1.3), (0, 0.7)), bc), shape)
    psi = np.random.default_rng(seed).standard_normal(g.size)
    form = psi @ (assemble_laplacian(g) @ psi)
    grad = sum(float(np.sum((D @ psi) ** 2)) for D in forward_differences(g))
    assert abs(form - grad) <= 1e-12 * max(abs(grad), 1.0)


@given(shape=st.tuples(st.integers(3, 6), st.integers(3, 6)),
       bc=st.tuples(st.sampled_from("NP"), st.sampled_from("NP")))
def test_constant_in_kernel_2d(shape, bc):
    # exact in 1D; the Kronecker-sum diagonal 2/hx^2 + 2/hy^2 is rounded once
    g = build_grid(Domain(((0, 1), (0, 2)), bc), shape)
    A = assemble_laplacian(g)
    assert np.max(np.abs(A @ np.ones(g.size))) <= 4 * np.finfo(float).eps * np.max(np.abs(A.data))


def test_definiteness():
    g = build_grid(Domain(((0, 1), (0, 1)), ("D", "N")), [5, 5])
    assert eigendecompose(assemble_laplacian(g)).values[0] > 0
    g = build_grid(Domain(((0, 1), (0, 1)), ("N", "P")), [5, 5])
    assert abs(eigendecompose(assemble_laplacian(g)).values[0]) < 1e-12


def test_tensor_sum_structure():
    g = build_grid(Domain(((0, 1), (0, 2)), ("D", "P")), [4, 5])
    ev = eigendecompose(assemble_laplacian(g)).values
    ref = np.add.outer(dirichlet_eigs(4, g.spacing[0]), periodic_eigs(5, g.spacing[1])).ravel()
    np.testing.assert_allclose(ev, np.sort(ref), rtol=1e-12, atol=1e-12)


# --- Hamiltonian and eigensolver --------------------------------------------------------


def test_zero_potential_is_laplacian():
    g = line(1.0, "N", 6)
    H = assemble_hamiltonian(g, np.zeros(6))
    np.testing.assert_array_equal(H.matrix, assemble_laplacian(g).toarray())


def test_constant_shift():
    g = line(2.0, "P", 8)
    c = 3.25
    np.testing.assert_allclose(assemble_hamiltonian(g, c).eig.values,
                               assemble_hamiltonian(g, 0.0).eig.values + c, atol=1e-12)


def test_rank_one_bracket():
    H = assemble_hamiltonian(line(4.0, "D", 3), [1.0, 0.0, 0.0])
    ev = np.linalg.eigvalsh(tridiagonal(3, 1.0, "D") + np.diag([1.0, 0, 0]))
    assert H.kappa == pytest.approx(ev[0], abs=1e-12)
    assert 2 - math.sqrt(2) < H.kappa < 3 - math.sqrt(2)


def test_nonfinite_potential_names_node():
    with pytest.raises(ValueError, match="node 2"):
        assemble_hamiltonian(line(1.0, "D", 4), [0, 0, np.nan, 0])


@given(seed=st.integers(0, 2**16), bc=st.sampled_from("DNP"))
def test_hamiltonian_symmetric_and_eigs_accurate(seed, bc):
    g = build_grid(Domain(((0, 1), (0, 1)), (bc, bc)), [6, 5])
    V = np.random.default_rng(seed).normal(scale=10, size=g.size)
    H = assemble_hamiltonian(g, V)
    assert symmetry_defect(H.matrix) <= 1e-12
    eig = H.eig
    assert np.all(np.diff(eig.values) >= 0)
    np.testing.assert_allclose(eig.vectors.T @ eig.vectors, np.eye(g.size), atol=1e-10)
    norm = np.linalg.norm(H.matrix, 2)
    res = np.linalg.norm(H.matrix @ eig.vectors - eig.vectors * eig.values, axis=0)
    assert np.all(res <= 1e-8 * norm)


def test_eigendecompose_small_matrices():
    np.testing.assert_allclose(eigendecompose(2.5 * np.eye(4)).values, 2.5)
    np.testing.assert_allclose(eigendecompose(np.array([[0.0, 1.0], [1.0, 0.0]])).values, [-1, 1])


def test_eigendecompose_cap():
    with pytest.raises(ValueError, match="coarsen"):
        eigendecompose(np.eye(10), cap=5)


def test_grid_dump(tmp_path):
    g = line(1.0, "D", 3)
    path = tmp_path / "grid.csv"
    dump_grid_csv(g, path, assemble_laplacian(g))
    text = path.read_text()
    assert "0.25" in text and len(text.splitlines()) > 3
