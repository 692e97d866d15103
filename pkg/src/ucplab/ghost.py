"""Ghost-dimension extension of spectral-subspace functions.

``Psi(., t) = sum_i c_i s_t(lambda_i) phi_i`` turns ``psi = sum_i c_i phi_i``
into a solution of ``H Psi = d^2 Psi / dt^2`` with ``Psi(., 0) = 0`` and
``d Psi / dt (., 0) = psi``, where

    s_t(l) = sinh(sqrt(l) t)/sqrt(l)   (l > 0)
           = t                          (l = 0)
           = sin(sqrt(-l) t)/sqrt(-l)   (l < 0)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid

from .discretization import DiscretizedHamiltonian, Grid, difference_1d, embed_axis, assemble_laplacian, axis_laplacians
from .potentials import AdmissibilityConstants
from .ucp import SubspaceFunction

SERIES_THRESHOLD = 1e-6


def s_values(lam, t, order: int = 0) -> np.ndarray:
    """``d^k/dt^k s_t(lambda)`` on the outer product ``t x lambda`` (order 0..2)."""
    lam = np.asarray(lam, dtype=float)
    t = np.asarray(t, dtype=float)
    if lam.ndim and t.ndim:
        L, T = np.broadcast_arrays(lam[None, :], t[:, None])
    else:
        L, T = np.broadcast_arrays(lam, t)
    if order == 2:
        return L * s_values(lam, t, 0)
    if order not in (0, 1):
        raise ValueError(f"derivative order must be 0, 1 or 2, got {order}")
    x = L * T * T
    out = np.empty(np.broadcast(L, T).shape)
    small = np.abs(x) < SERIES_THRESHOLD
    pos = (~small) & (L > 0)
    neg = (~small) & (L < 0)
    if order == 0:
        out[small] = T[small] * (1 + x[small] / 6 + x[small] ** 2 / 120)
        r = np.sqrt(L[pos])
        out[pos] = np.sinh(r * T[pos]) / r
        r = np.sqrt(-L[neg])
        out[neg] = np.sin(r * T[neg]) / r
    else:
        out[small] = 1 + x[small] / 2 + x[small] ** 2 / 24
        out[pos] = np.cosh(np.sqrt(L[pos]) * T[pos])
        out[neg] = np.cos(np.sqrt(-L[neg]) * T[neg])
    return out


def s_eval(lam: float, t: float, derivative_order: int = 0) -> float:
    return float(s_values(np.float64(lam), np.float64(t), derivative_order))


@dataclass(eq=False)
class GhostExtension:
    source: SubspaceFunction
    t: np.ndarray
    tau: float
    omega: float
    constants: AdmissibilityConstants

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def coefficients(self, order: int = 0) -> np.ndarray:
        """``c_i d^k s_t(lambda_i)`` as an ``(n_t, m)`` table."""
        src = self.source
        return s_values(src.eigenvalues, self.t, order) * src.coefficients[None, :]

    def nodal(self, order: int = 0) -> np.ndarray:
        """``d^k Psi / dt^k`` on the grid, shape ``(n_t, nodes)``."""
        src = self.source
        return self.coefficients(order) @ src.basis.T / math.sqrt(src.cell_volume)

    @property
    def values(self) -> np.ndarray:
        return self.nodal(0)

    def dump_csv(self, path) -> None:
        vals = self.values
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_index", "t", "value"])
            for k, tk in enumerate(self.t):
                for i, v in enumerate(vals[k]):
                    w.writerow([i, repr(float(tk)), repr(float(v))])


def omega_constant(constants: AdmissibilityConstants, E: float) -> float:
    l1, l2 = float(constants.lambda1), float(constants.lambda2)
    return (1 + 2 * l1 * E + l1 * l1 + 2 * l2) / 2


def build_extension(psi: SubspaceFunction, tau: float, n_t: int, constants: AdmissibilityConstants) -> GhostExtension:
    """Tabulate ``Psi`` on a symmetric ``t`` grid of ``n_t`` (odd, >= 9) points on ``[-tau, tau]``."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if n_t < 9 or n_t % 2 == 0:
        raise ValueError(f"n_t must be odd and >= 9 so that t = 0 is a node, got {n_t}")
    t = np.linspace(-tau, tau, n_t)
    t[n_t // 2] = 0.0
    return GhostExtension(psi, t, float(tau), omega_constant(constants, psi.E), constants)


def _check_operator(ext: GhostExtension, H: DiscretizedHamiltonian) -> None:
    src = ext.source
    if H.size != src.basis.shape[0]:
        raise ValueError("operator and extension live on different grids")
    res = H.apply(src.basis) - src.basis * src.eigenvalues[None, :]
    scale = max(1.0, float(np.max(np.abs(src.eigenvalues))))
    if np.max(np.abs(res)) > 1e-8 * scale:
        raise ValueError("extension was not built from this operator's eigenpairs")


@dataclass
class PdeResidual:
    spectral: float
    fd: float
    psi_norm: float
    dt: float


def check_pde_identity(ext: GhostExtension, H: DiscretizedHamiltonian) -> PdeResidual:
    """Residuals of ``H Psi - d^2 Psi/dt^2`` with spectral and with central-difference t-derivatives.

    Both are l2 norms over the whole ``(t, x)`` table; the FD residual uses the
    interior ``t`` nodes only.
    """
    _check_operator(ext, H)
    Psi = ext.values
    HPsi = H.apply(Psi.T).T
    spec = float(np.linalg.norm(HPsi - ext.nodal(2)))
    fd_tt = (Psi[2:] - 2 * Psi[1:-1] + Psi[:-2]) / ext.dt**2
    fd = float(np.linalg.norm(HPsi[1:-1] - fd_tt))
    return PdeResidual(spec, fd, float(np.linalg.norm(Psi)), ext.dt)


def fd_convergence_order(psi: SubspaceFunction, H: DiscretizedHamiltonian, tau: float, n_t: int,
                         constants: AdmissibilityConstants) -> tuple[float, float, float]:
    """Observed order of the FD residual under halving of ``dt``.

    The residual is measured at the interior nodes of the coarse ``t`` grid on
    both meshes.  Returns ``(coarse, fine, order)``.
    """
    coarse = build_extension(psi, tau, n_t, constants)
    fine = build_extension(psi, tau, 2 * n_t - 1, constants)
    _check_operator(coarse, H)

    def residual(ext, stride):
        Psi = ext.values
        fd_tt = (Psi[2:] - 2 * Psi[1:-1] + Psi[:-2]) / ext.dt**2
        HPsi = H.apply(Psi[1:-1].T).T
        return np.linalg.norm((HPsi - fd_tt)[stride - 1::stride])

    r1 = float(residual(coarse, 1))
    r2 = float(residual(fine, 2))
    return r1, r2, math.log2(r1 / r2)


@dataclass
class SandwichResult:
    lower_ok: bool
    upper_ok: bool
    lower: float
    norm: float
    upper: float

    @property
    def ok(self) -> bool:
        return self.lower_ok and self.upper_ok


def _trapezoid(y: np.ndarray, t: np.ndarray) -> float:
    return float(trapezoid(y, t, axis=0))


def h1_norm_sandwich(ext: GhostExtension, grid: Grid) -> SandwichResult:
    """Compare ``||Psi||^2_{H^1(Lambda x (-tau, tau))}`` with its two-sided bound.

    Spatial gradients use the stiffness form of the grid's own boundary
    conditions; ``t``-derivatives are spectral, ``t``-integrals trapezoidal.
    """
    src = ext.source
    E = src.E
    if E < 0:
        raise ValueError(f"the norm comparison assumes E >= 0, got E={E}")
    A = assemble_laplacian(grid)
    stiff = src.basis.T @ (A @ src.basis)
    a0 = ext.coefficients(0)
    a1 = ext.coefficients(1)
    density = np.sum(a0**2, axis=1) + np.einsum("ti,ij,tj->t", a0, stiff, a0) + np.sum(a1**2, axis=1)
    norm2 = _trapezoid(density, ext.t)
    psi2 = float(np.sum(src.coefficients**2))
    tau = ext.tau
    lower = tau / 2 * psi2
    upper = 2 * tau * (1 + (1 + ext.omega) * tau**2) * math.exp(2 * tau * math.sqrt(E)) * psi2
    return SandwichResult(lower <= norm2, norm2 <= upper, lower, norm2, upper)


# --- second derivatives -------------------------------------------------------


def mixed_difference(grid: Grid, j: int, k: int) -> sp.csr_matrix:
    """``D_k D_j`` for axes ``j != k`` with the grid's boundary rules."""
    shape = list(grid.shape)
    bc = grid.domain.bc
    Dj = embed_axis(difference_1d(shape[j], grid.spacing[j], bc[j]), j, shape)
    rows_j = Dj.shape[0] // (grid.size // shape[j])
    shape_j = list(shape)
    shape_j[j] = rows_j
    Dk = embed_axis(difference_1d(shape[k], grid.spacing[k], bc[k]), k, shape_j)
    return sp.csr_matrix(Dk @ Dj)


def second_derivative_gram(grid: Grid, basis: np.ndarray) -> np.ndarray:
    """Gram matrix of ``sum_{|mu| = 2} ||d^mu f||^2`` on ``span(basis)`` (l2 units).

    Pure derivatives use the per-axis second differences, mixed ones ``D_k D_j``;
    with these choices ``sum_{j,k} ||d_jk f||^2 = ||Delta_h f||^2`` exactly.
    """
    Q = np.zeros((basis.shape[1], basis.shape[1]))
    for Aj in axis_laplacians(grid):
        X = Aj @ basis
        Q += X.T @ X
    for j in range(grid.dim):
        for k in range(j + 1, grid.dim):
            X = mixed_difference(grid, j, k) @ basis
            Q += X.T @ X
    return Q


def minimal_c(H: DiscretizedHamiltonian) -> float:
    """Smallest ``c >= 0`` with ``<-Delta f, f> <= 2 <H f, f> + c |f|^2``."""
    M = H.laplacian.toarray() - 2 * H.matrix
    return max(0.0, float(np.linalg.eigvalsh(M)[-1]))


def minimal_c_tilde(H: DiscretizedHamiltonian) -> float:
    """Smallest ``c~ >= 0`` with ``|Delta f|^2 <= 4 |H f|^2 + c~ |f|^2``."""
    A = H.laplacian.toarray()
    Hm = H.matrix
    M = A @ A - 4 * Hm @ Hm
    M = (M + M.T) / 2
    return max(0.0, float(np.linalg.eigvalsh(M)[-1]))


@dataclass
class H2Decomposition:
    time_second: float
    mixed: float
    spatial_second: float
    mixed_ok: bool
    spatial_ok: bool
    mixed_margin: float
    spatial_margin: float

    @property
    def ok(self) -> bool:
        return self.mixed_ok and self.spatial_ok


def h2_decomposition(ext: GhostExtension, H: DiscretizedHamiltonian, c: float, c_tilde: float,
                     n_probe: int = 100, seed: int = 0) -> H2Decomposition:
    """The three pieces of ``sum_{|mu| = 2} ||d^mu Psi||^2`` and their bounds.

    ``c`` and ``c_tilde`` are first probed on seeded random vectors; the bounds
    ``||grad d_t Psi_t||^2 <= (2E + c) ||d_t Psi_t||^2`` and
    ``sum ||d_x^mu Psi_t||^2 <= (8 max(|kappa|, |E|)^2 + 2 c~) ||Psi_t||^2``
    are checked at every ``t`` node.  Norms are over ``Lambda x (-tau, tau)``.
    """
    _check_operator(ext, H)
    src = ext.source
    A = H.laplacian
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((H.size, n_probe))
    AF, HF = A @ F, H.apply(F)
    lhs_c = np.sum(F * AF, axis=0)
    rhs_c = 2 * np.sum(F * HF, axis=0) + c * np.sum(F**2, axis=0)
    if np.any(lhs_c > rhs_c + 1e-10 * np.abs(rhs_c).max()):
        raise ValueError(f"c={c} fails the form-bound probe")
    lhs_ct = np.sum(AF**2, axis=0)
    rhs_ct = 4 * np.sum(HF**2, axis=0) + c_tilde * np.sum(F**2, axis=0)
    if np.any(lhs_ct > rhs_ct * (1 + 1e-10)):
        raise ValueError(f"c_tilde={c_tilde} fails the operator-bound probe")

    a0, a1, a2 = ext.coefficients(0), ext.coefficients(1), ext.coefficients(2)
    stiff = src.basis.T @ (A @ src.basis)
    Q = second_derivative_gram(H.grid, src.basis)
    s_tt = np.sum(a2**2, axis=1)
    s_xt = np.einsum("ti,ij,tj->t", a1, stiff, a1)
    s_xx = np.einsum("ti,ij,tj->t", a0, Q, a0)
    E = src.E
    kappa = H.kappa
    bound_xt = (2 * E + c) * np.sum(a1**2, axis=1)
    bound_xx = (8 * max(abs(kappa), abs(E)) ** 2 + 2 * c_tilde) * np.sum(a0**2, axis=1)
    tol_xt = 1e-10 * max(1.0, float(np.max(bound_xt)))
    tol_xx = 1e-10 * max(1.0, float(np.max(bound_xx)))
    return H2Decomposition(
        time_second=_trapezoid(s_tt, ext.t),
        mixed=_trapezoid(s_xt, ext.t),
        spatial_second=_trapezoid(s_xx, ext.t),
        mixed_ok=bool(np.all(s_xt <= bound_xt + tol_xt)),
        spatial_ok=bool(np.all(s_xx <= bound_xx + tol_xx)),
        mixed_margin=_relative_margin(bound_xt, s_xt),
        spatial_margin=_relative_margin(bound_xx, s_xx),
    )


def _relative_margin(bound: np.ndarray, value: np.ndarray) -> float:
    """``min (bound - value) / bound`` over nodes with a positive bound (1.0 if there are none)."""
    pos = bound > 0
    if not np.any(pos):
        return 1.0
    return float(np.min((bound[pos] - value[pos]) / bound[pos]))
