"""Heat-equation null control from an equidistributed set by spectral truncation.

The state is expanded in the lowest ``m`` eigenvectors of ``H``.  With
``M = V^T diag(w) V`` (``w`` the node weights of ``S_delta``) the observability
Gramian of the truncated system is

    W = int_0^T e^{-Lam (T-s)} M e^{-Lam (T-s)} ds

and the minimal-norm control steering ``u0`` to zero is
``f(s) = sqrt(w) * Phi e^{-Lam (T-s)} z`` with ``W z = -e^{-Lam T} a0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .discretization import DiscretizedHamiltonian
from .ucp import EquidistributedSet, geometric_factor

N_TIME = 256
GRADING = 3
REG = 1e-12
LOG_MAX = math.log(np.finfo(float).max)


def heat_evolve(H: DiscretizedHamiltonian, state, t: float) -> np.ndarray:
    """``e^{-tH} state`` by spectral evaluation."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    eig = H.eig
    state = np.asarray(state, dtype=float)
    decay = np.exp(-eig.values * t).reshape((-1,) + (1,) * (state.ndim - 1))
    return eig.vectors @ (decay * (eig.vectors.T @ state))


@dataclass
class ControlProblem:
    """Truncated null-control problem on the ``m`` lowest modes (or those ``<= E_c``)."""

    H: DiscretizedHamiltonian
    sset: EquidistributedSet
    T: float
    u0: np.ndarray
    m: int | None = None
    E_c: float | None = None

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        self.u0 = np.asarray(self.u0, dtype=float).reshape(-1)
        if self.u0.size != self.H.grid.size:
            raise ValueError(f"u0 has {self.u0.size} entries for {self.H.grid.size} nodes")
        if self.sset.node_weights.size != self.H.grid.size:
            raise ValueError("observation set was built on a different grid")
        if (self.m is None) == (self.E_c is None):
            raise ValueError("give exactly one of m (mode count) or E_c (truncation energy)")
        if self.modes == 0:
            raise ValueError("truncated subspace is empty")

    @property
    def modes(self) -> int:
        if self.m is not None:
            return min(int(self.m), len(self.H.eig.values))
        return int(self.H.eig.below(self.E_c).size)

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.H.eig.values[: self.modes]

    @property
    def basis(self) -> np.ndarray:
        return self.H.eig.vectors[:, : self.modes]

    @property
    def kappa(self) -> float:
        return float(self.H.eig.values[0])

    @property
    def kappa_minus(self) -> float:
        return min(self.kappa, 0.0)

    def initial_coefficients(self) -> np.ndarray:
        """Coefficients of ``u0`` in the L2-orthonormal eigenbasis ``basis / sqrt(cell_volume)``."""
        return math.sqrt(self.H.grid.cell_volume) * (self.basis.T @ self.u0)

    def observation_matrix(self) -> np.ndarray:
        V = self.basis
        return V.T @ (self.sset.node_weights[:, None] * V)


def simpson_nodes(T: float, n_time: int, grading: int = GRADING) -> tuple[np.ndarray, np.ndarray]:
    """Nodes ``sigma = T - s`` and weights of composite Simpson on ``n_time`` panels.

    Panel ends follow ``T (k/n)^grading`` so the short time scales of high modes
    near ``sigma = 0`` are resolved.
    """
    if n_time < 1:
        raise ValueError(f"need at least one panel, got {n_time}")
    ends = T * (np.arange(n_time + 1) / n_time) ** grading
    nodes = np.empty(2 * n_time + 1)
    nodes[0::2] = ends
    nodes[1::2] = (ends[:-1] + ends[1:]) / 2
    weights = np.zeros_like(nodes)
    width = np.diff(ends)
    weights[0:-1:2] += width / 6
    weights[1::2] += 4 * width / 6
    weights[2::2] += width / 6
    return nodes, weights


def _pairwise_sum(terms: np.ndarray) -> np.ndarray:
    """Sum along axis 0 in a fixed binary-tree order."""
    while len(terms) > 1:
        if len(terms) % 2:
            terms = np.concatenate([terms[:-2], (terms[-2] + terms[-1])[None]])
        terms = terms[0::2] + terms[1::2]
    return terms[0]


def gramian(problem: ControlProblem, n_time: int = N_TIME) -> np.ndarray:
    """Observability Gramian on the truncated subspace (symmetric PSD, ``m x m``)."""
    lam = problem.eigenvalues
    M = problem.observation_matrix()
    sigma, wq = simpson_nodes(problem.T, n_time)
    decay = np.exp(-np.outer(sigma, lam))
    terms = wq[:, None, None] * decay[:, :, None] * M[None, :, :] * decay[:, None, :]
    W = _pairwise_sum(terms)
    return (W + W.T) / 2


def gramian_exact(problem: ControlProblem) -> np.ndarray:
    """Closed-form Gramian ``M_ij (1 - e^{-(l_i + l_j) T}) / (l_i + l_j)`` (``T`` when the sum vanishes)."""
    lam = problem.eigenvalues
    s = lam[:, None] + lam[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(np.abs(s * problem.T) > 1e-12, -np.expm1(-s * problem.T) / s, problem.T)
    return problem.observation_matrix() * f


@dataclass
class ControlResult:
    times: np.ndarray
    control: np.ndarray
    cost: float
    quadrature_cost: float
    terminal_residual: float
    worst_case_cost: float
    regularized: bool
    z: np.ndarray
    W: np.ndarray


def synthesize_control(problem: ControlProblem, n_time: int = N_TIME, regularize: bool = True) -> ControlResult:
    """Minimal-norm null control of the truncated dynamics.

    ``cost`` is ``sqrt(z^T W z)``; ``quadrature_cost`` integrates ``||f(s)||^2``
    on the same Simpson nodes.  ``worst_case_cost`` is
    ``||W^{-1/2} e^{-Lam T}||``, the largest cost over unit initial states in the
    truncated space.
    """
    W = gramian(problem, n_time)
    lam = problem.eigenvalues
    a0 = problem.initial_coefficients()
    decayT = np.exp(-lam * problem.T)
    norm_W = float(np.linalg.norm(W, 2))
    evals, evecs = scipy.linalg.eigh(W)
    regularized = False
    if evals[0] <= REG * norm_W:
        if not regularize:
            raise np.linalg.LinAlgError(
                f"Gramian is numerically singular (min eig {evals[0]:.3e} <= 1e-12 * ||W|| = {REG * norm_W:.3e})"
            )
        evals = evals + REG * norm_W
        regularized = True
    b = -decayT * a0
    z = evecs @ ((evecs.T @ b) / evals)
    cost2 = float(z @ W @ z)
    u0n = float(np.linalg.norm(a0))
    if u0n == 0:
        residual = 0.0
    else:
        u0_l2 = math.sqrt(problem.H.grid.cell_volume) * float(np.linalg.norm(problem.u0))
        residual = float(np.linalg.norm(decayT * a0 + W @ z) / u0_l2)

    # control trajectory on the quadrature nodes, in time order s = T - sigma
    sigma, wq = simpson_nodes(problem.T, n_time)
    phi = problem.basis / math.sqrt(problem.H.grid.cell_volume)
    coef = np.exp(-np.outer(sigma, lam)) * z[None, :]
    f = (coef @ phi.T) * np.sqrt(problem.sset.node_weights)[None, :]
    qcost2 = float(np.sum(wq * np.sum(f**2, axis=1)) * problem.H.grid.cell_volume)
    order = np.argsort(problem.T - sigma, kind="stable")

    Winv_half = evecs @ np.diag(1 / np.sqrt(evals)) @ evecs.T
    worst = float(np.linalg.norm(Winv_half * decayT[None, :], 2))
    return ControlResult(
        times=(problem.T - sigma)[order], control=f[order],
        cost=math.sqrt(max(cost2, 0.0)), quadrature_cost=math.sqrt(max(qcost2, 0.0)),
        terminal_residual=residual, worst_case_cost=worst, regularized=regularized, z=z, W=W,
    )


@dataclass(frozen=True)
class CostBoundParams:
    K: float
    G: float
    delta: float
    T: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    kappa_minus: float = 0.0

    def __post_init__(self):
        if self.K <= 0:
            raise ValueError(f"K must be positive, got {self.K}")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not 0 < self.delta < self.G:
            raise ValueError(f"need 0 < delta < G, got delta={self.delta}, G={self.G}")
        if self.kappa_minus > 0:
            raise ValueError("kappa_minus = min(kappa, 0) cannot be positive")


def _log_bound_parts(p: CostBoundParams) -> tuple[float, float]:
    """``log(bound) = a + K * b``."""
    lr = math.log(p.G / p.delta)
    a = -0.5 * math.log(p.T) - p.kappa_minus * p.T
    b = float(geometric_factor(p.G, p.lambda1, p.lambda2)) * lr + p.G**2 * lr**2 / p.T
    return a, b


def cost_bound(params: CostBoundParams) -> float:
    """``T^{-1/2} (G/delta)^{K F} exp(K G^2 ln^2(G/delta)/T - kappa_- T)``."""
    a, b = _log_bound_parts(params)
    log_bound = a + params.K * b
    return math.inf if log_bound > LOG_MAX else math.exp(log_bound)


def calibrate_K(experiments: Sequence[tuple[CostBoundParams, float]]) -> float:
    """Smallest ``K`` making ``cost_bound`` dominate each measured cost.

    Each experiment is ``(params, measured_cost)``; ``params.K`` is ignored.
    """
    if not experiments:
        raise ValueError("no calibration experiments")
    best = -math.inf
    for p, cost in experiments:
        if cost <= 0:
            continue
        a, b = _log_bound_parts(p)
        best = max(best, (math.log(cost) - a) / b)
    if best <= 0:
        best = np.finfo(float).tiny
    return float(best) * (1 + 1e-12)
