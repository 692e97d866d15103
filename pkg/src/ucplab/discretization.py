"""Finite-difference grids and Schrödinger operators on generalized rectangles.

A domain is a bounded box ``(a_1, b_1) x ... x (a_d, b_d)`` with one boundary
condition per axis.  Node layouts are chosen so that the discrete Laplacian of
each boundary condition has an exactly known spectrum:

* Dirichlet: interior nodes ``a + i h``, ``i = 1..n``, ``h = (b - a)/(n + 1)``;
  eigenvalues ``4 sin^2(j pi / (2 (n + 1))) / h^2``.
* Neumann: cell-centred nodes ``a + (i + 1/2) h``, ``h = (b - a)/n``, boundary
  closed by a mirrored ghost node; eigenvalues ``4 sin^2(j pi / (2 n)) / h^2``,
  ``j = 0..n-1``.
* Periodic: nodes ``a + i h``, ``i = 0..n-1``, ``h = (b - a)/n`` with wraparound;
  eigenvalues ``4 sin^2(j pi / n) / h^2``.

Multi-dimensional operators are Kronecker sums of the 1D ones, flattened in
C order (last axis fastest).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

MAX_DIM = 3
DENSE_CAP = 6000

_BC_ALIASES = {
    "d": "D",
    "dirichlet": "D",
    "n": "N",
    "neumann": "N",
    "p": "P",
    "per": "P",
    "periodic": "P",
}


def normalize_bc(tag: str) -> str:
    """Map a boundary-condition tag (``"D"``, ``"neumann"``, ``"per"``, ...) to D/N/P."""
    try:
        return _BC_ALIASES[str(tag).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown boundary condition {tag!r}; use Dirichlet, Neumann or Periodic") from None


@dataclass(frozen=True)
class Domain:
    """Bounded generalized rectangle with a boundary condition per axis."""

    intervals: tuple[tuple[float, float], ...]
    bc: tuple[str, ...]

    def __post_init__(self):
        intervals = tuple((float(a), float(b)) for a, b in self.intervals)
        bc = tuple(normalize_bc(t) for t in self.bc)
        if len(intervals) != len(bc):
            raise ValueError(f"{len(intervals)} intervals but {len(bc)} boundary conditions")
        if not 1 <= len(intervals) <= MAX_DIM:
            raise ValueError(f"dimension must be in 1..{MAX_DIM}, got {len(intervals)}")
        for j, (a, b) in enumerate(intervals):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ValueError(f"axis {j}: endpoints must be finite, got ({a}, {b})")
            if not a < b:
                raise ValueError(f"axis {j}: need a < b, got ({a}, {b})")
        object.__setattr__(self, "intervals", intervals)
        object.__setattr__(self, "bc", bc)

    @classmethod
    def box(cls, lengths: Sequence[float], bc: str | Sequence[str]) -> "Domain":
        """``(0, L_1) x ... x (0, L_d)`` with a shared or per-axis boundary condition."""
        if isinstance(bc, str):
            bc = [bc] * len(lengths)
        return cls(tuple((0.0, float(L)) for L in lengths), tuple(bc))

    @property
    def dim(self) -> int:
        return len(self.intervals)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([b - a for a, b in self.intervals])

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def scaled(self, s: float) -> "Domain":
        return Domain(tuple((s * a, s * b) for a, b in self.intervals), self.bc)


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid on a :class:`Domain`."""

    domain: Domain
    points_per_axis: tuple[int, ...]
    spacing: tuple[float, ...]
    axes: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points_per_axis

    @property
    def size(self) -> int:
        return int(np.prod(self.points_per_axis))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates as a ``(size, dim)`` array in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def key(self) -> str:
        """Short identifier used in result provenance."""
        parts = [f"{bc}{n}[{a:g},{b:g}]" for bc, n, (a, b) in zip(self.domain.bc, self.shape, self.domain.intervals)]
        return "x".join(parts)


def build_grid(domain: Domain, points_per_axis: Sequence[int]) -> Grid:
    """Place ``n_j`` nodes per axis according to that axis' boundary condition."""
    points = tuple(int(n) for n in points_per_axis)
    if domain.dim > MAX_DIM:
        raise ValueError(f"dimension {domain.dim} exceeds the memory guard of {MAX_DIM}")
    if len(points) != domain.dim:
        raise ValueError(f"need {domain.dim} point counts, got {len(points)}")
    for j, n in enumerate(points):
        if n < 3:
            raise ValueError(f"axis {j}: need at least 3 points, got {n}")

    spacing, axes = [], []
    for (a, b), bc, n in zip(domain.intervals, domain.bc, points):
        if bc == "D":
            h = (b - a) / (n + 1)
            x = a + h * np.arange(1, n + 1)
        elif bc == "N":
            h = (b - a) / n
            x = a + h * (np.arange(n) + 0.5)
        else:
            h = (b - a) / n
            x = a + h * np.arange(n)
        spacing.append(h)
        axes.append(x)
    return Grid(domain, points, tuple(spacing), tuple(axes))


def laplacian_1d(n: int, h: float, bc: str) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    if bc == "N":
        main[0] = main[-1] = 1.0
    A = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if bc == "P":
        A[0, n - 1] = -1.0
        A[n - 1, 0] = -1.0
    return (A.tocsr() / h**2).astype(float)


def difference_1d(n: int, h: float, bc: str) -> sp.csr_matrix:
    """Forward differences whose Gram matrix is the 1D Laplacian of ``bc``."""
    if bc == "D":
        # includes the two differences against the zero boundary values
        D = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n))
    elif bc == "N":
        D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
    else:
        D = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n), format="lil")
        D[n - 1, 0] = 1.0
    return (sp.csr_matrix(D) / h).astype(float)


def embed_axis(op: sp.spmatrix, axis: int, shape: Sequence[int]) -> sp.csr_matrix:
    before = int(np.prod(shape[:axis]))
    after = int(np.prod(shape[axis + 1:]))
    out = op
    if before > 1:
        out = sp.kron(sp.identity(before), out)
    if after > 1:
        out = sp.kron(out, sp.identity(after))
    return sp.csr_matrix(out)


def axis_laplacians(grid: Grid, bc: Sequence[str] | None = None) -> list[sp.csr_matrix]:
    """Per-axis second-difference operators ``-d^2/dx_j^2`` embedded in the full grid."""
    bc = grid.domain.bc if bc is None else tuple(normalize_bc(t) for t in bc)
    return [
        embed_axis(laplacian_1d(n, h, b), j, grid.shape)
        for j, (n, h, b) in enumerate(zip(grid.shape, grid.spacing, bc))
    ]


def forward_differences(grid: Grid, bc: Sequence[str] | None = None) -> list[sp.csr_matrix]:
    """Per-axis forward-difference operators with the boundary rule of ``bc``.

    ``sum_j D_j.T @ D_j`` equals :func:`assemble_laplacian` for the same
    boundary conditions, so ``h^d * |D psi|^2`` is the discrete ``||grad psi||^2``.
    """
    bc = grid.domain.bc if bc is None else tuple(normalize_bc(t) for t in bc)
    return [
        embed_axis(difference_1d(n, h, b), j, grid.shape)
        for j, (n, h, b) in enumerate(zip(grid.shape, grid.spacing, bc))
    ]


def assemble_laplacian(grid: Grid, bc: Sequence[str] | None = None) -> sp.csr_matrix:
    """Second-order FD matrix of ``-Delta`` (nonnegative) on ``grid``.

    ``bc`` overrides the domain's boundary conditions; this is how the Neumann
    stiffness used for the relative bound is built on any grid.
    """
    parts = axis_laplacians(grid, bc)
    A = parts[0]
    for P in parts[1:]:
        A = A + P
    return sp.csr_matrix(A)


def neumann_stiffness(grid: Grid) -> sp.csr_matrix:
    """Neumann form matrix on ``grid``'s nodes: ``psi^T K psi = sum |D_j psi|^2`` over interior differences."""
    return assemble_laplacian(grid, bc=("N",) * grid.dim)


@dataclass
class Eigenpairs:
    """Eigenvalues (ascending) and l2-orthonormal eigenvectors as columns."""

    values: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.values)

    def below(self, E: float, atol: float | None = None) -> np.ndarray:
        """Indices of eigenvalues ``<= E`` (with a small rounding allowance)."""
        if atol is None:
            scale = max(1.0, float(np.max(np.abs(self.values)))) if len(self.values) else 1.0
            atol = 1e-10 * scale
        return np.flatnonzero(self.values <= E + atol)


class DiscretizedHamiltonian:
    """``-Delta_h + diag(V)`` on a grid, with a lazily computed eigendecomposition."""

    def __init__(self, grid: Grid, laplacian: sp.csr_matrix, potential: np.ndarray):
        self.grid = grid
        self.laplacian = laplacian
        self.potential = np.asarray(potential, dtype=float)
        self._eig: Eigenpairs | None = None

    @property
    def size(self) -> int:
        return self.grid.size

    @cached_property
    def sparse(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.laplacian + sp.diags(self.potential))

    @cached_property
    def matrix(self) -> np.ndarray:
        return self.sparse.toarray()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.sparse @ x

    @property
    def eig(self) -> Eigenpairs:
        if self._eig is None:
            self._eig = eigendecompose(self)
        return self._eig

    @property
    def kappa(self) -> float:
        """Bottom of the spectrum."""
        return float(self.eig.values[0])

    def with_potential(self, potential: np.ndarray) -> "DiscretizedHamiltonian":
        return assemble_hamiltonian(self.grid, potential, laplacian=self.laplacian)


def assemble_hamiltonian(grid: Grid, potential_values, laplacian: sp.csr_matrix | None = None) -> DiscretizedHamiltonian:
    """``H = -Delta_h + diag(potential_values)``; rejects non-finite node values."""
    V = np.asarray(potential_values, dtype=float)
    if V.ndim == 0:
        V = np.full(grid.size, float(V))
    V = V.reshape(-1)
    if V.size != grid.size:
        raise ValueError(f"potential has {V.size} values, grid has {grid.size} nodes")
    bad = np.flatnonzero(~np.isfinite(V))
    if bad.size:
        i = int(bad[0])
        idx = np.unravel_index(i, grid.shape)
        raise ValueError(f"non-finite potential value {V[i]} at node {i} (index {tuple(int(k) for k in idx)}, x={grid.coords[i]})")
    if laplacian is None:
        laplacian = assemble_laplacian(grid)
    return DiscretizedHamiltonian(grid, laplacian, V)


def eigendecompose(H, cap: int = DENSE_CAP) -> Eigenpairs:
    """Dense symmetric eigensolve of a Hamiltonian or a plain symmetric matrix."""
    if isinstance(H, DiscretizedHamiltonian):
        M = H.matrix
    elif sp.issparse(H):
        M = H.toarray()
    else:
        M = np.asarray(H, dtype=float)
    n = M.shape[0]
    if M.ndim != 2 or M.shape[1] != n:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if n > cap:
        raise ValueError(
            f"matrix dimension {n} exceeds the dense eigensolver cap {cap}; coarsen the grid"
        )
    values, vectors = scipy.linalg.eigh(M)
    return Eigenpairs(values, vectors)


def symmetry_defect(M) -> float:
    """``max|M - M^T| / max|M|``."""
    M = M.toarray() if sp.issparse(M) else np.asarray(M)
    scale = np.max(np.abs(M))
    return float(np.max(np.abs(M - M.T)) / scale) if scale > 0 else 0.0


def dump_grid_csv(grid: Grid, path, matrix=None) -> None:
    """Debug dump: node table, and optionally the matrix as (row, col, value) triples."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [f"x{j}" for j in range(grid.dim)])
        for i, x in enumerate(grid.coords):
            w.writerow([i] + [repr(float(c)) for c in x])
    if matrix is not None:
        M = sp.coo_matrix(matrix)
        with path.with_suffix(".matrix.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            for r, c, v in zip(M.row, M.col, M.data):
                w.writerow([int(r), int(c), repr(float(v))])
