"""Equidistributed observation sets, spectral-subspace sampling and the UCP bound.

For ``psi`` in the spectral subspace of ``H`` below ``E`` the observed mass
fraction ``||psi||^2_{S_delta} / ||psi||^2`` is compared against

    (delta/G) ** (N * (1 + G^2 l1 + G^(4/3) l2^(1/3) + G sqrt(max(0, E))))

with the dimension constant ``N`` calibrated from data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .discretization import DiscretizedHamiltonian, Domain, Grid

SUBSAMPLES = 4


@dataclass(eq=False)
class EquidistributedSet:
    G: float
    delta: float
    centers: np.ndarray
    cell_corners: np.ndarray
    node_weights: np.ndarray

    @property
    def count(self) -> int:
        return len(self.centers)

    def measure(self, grid: Grid) -> float:
        """Quadrature measure of ``S_delta`` on ``grid``."""
        return float(np.sum(self.node_weights) * grid.cell_volume)

    def exact_measure(self) -> float:
        d = self.centers.shape[1]
        return self.count * ball_volume(d, self.delta)


def ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d


def _cells(domain: Domain, G: float) -> tuple[np.ndarray, tuple[int, ...]]:
    counts = tuple(int(math.floor(L / G + 1e-9)) for L in domain.lengths)
    if any(c == 0 for c in counts):
        raise ValueError(
            f"S_delta would be empty: no lattice cell of side G={G} fits inside the domain "
            f"with lengths {tuple(domain.lengths)} (a non-empty set of cells is assumed)"
        )
    lo = np.array([a for a, _ in domain.intervals])
    idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), axis=-1).reshape(-1, domain.dim)
    return lo + G * idx, counts


def build_set(domain: Domain, grid: Grid, G: float, delta: float, placement: str = "center",
              seed: int = 0, centers: Sequence[Sequence[float]] | None = None) -> EquidistributedSet:
    """One ``delta``-ball per lattice cell of side ``G`` inside ``domain``.

    The lattice is anchored at the lower corner of the domain.  ``placement`` is
    ``"center"`` (ball at the cell centre), ``"seeded-random"`` (uniform among
    positions keeping the ball inside the cell) or ``"explicit"`` (``centers``
    given, one per cell, in the cell order).
    """
    if G <= 0:
        raise ValueError(f"G must be positive, got {G}")
    if not 0 < delta < G / 2:
        raise ValueError(f"need 0 < delta < G/2, got delta={delta}, G={G}")
    corners, counts = _cells(domain, G)
    d = domain.dim
    if placement == "center":
        ctr = corners + G / 2
    elif placement == "seeded-random":
        rng = np.random.default_rng(seed)
        ctr = corners + delta + rng.uniform(size=corners.shape) * (G - 2 * delta)
    elif placement == "explicit":
        if centers is None:
            raise ValueError("explicit placement needs a list of centers")
        ctr = np.asarray(centers, dtype=float).reshape(-1, d)
        if len(ctr) != len(corners):
            raise ValueError(f"{len(ctr)} centers given for {len(corners)} cells")
        inside = np.all((ctr - delta > corners) & (ctr + delta < corners + G), axis=1)
        if not np.all(inside):
            k = int(np.flatnonzero(~inside)[0])
            raise ValueError(f"ball {k} at {ctr[k]} is not contained in its cell {corners[k]} + (0, G)^{d}")
    else:
        raise ValueError(f"unknown placement {placement!r}")

    weights = _node_weights(grid, ctr, counts, G, delta)
    return EquidistributedSet(float(G), float(delta), ctr, corners, weights)


def _node_weights(grid: Grid, centers: np.ndarray, counts: tuple[int, ...], G: float, delta: float) -> np.ndarray:
    """Volume fraction of each node cell inside the balls, by ``4^d`` midpoint subsamples."""
    d = grid.dim
    base = (np.arange(SUBSAMPLES) + 0.5) / SUBSAMPLES - 0.5
    offs = np.stack(np.meshgrid(*[base * h for h in grid.spacing], indexing="ij"), axis=-1).reshape(-1, d)
    lo = np.array([a for a, _ in grid.domain.intervals])
    cnt = np.array(counts)
    out = np.empty(grid.size)
    coords = grid.coords
    chunk = max(1, 100_000 // len(offs))
    for s in range(0, grid.size, chunk):
        pts = coords[s:s + chunk, None, :] + offs[None, :, :]
        cell = np.floor((pts - lo) / G).astype(int)
        valid = np.all((cell >= 0) & (cell < cnt), axis=-1)
        cell = np.clip(cell, 0, cnt - 1)
        flat = np.ravel_multi_index(tuple(np.moveaxis(cell, -1, 0)), counts)
        dist2 = np.sum((pts - centers[flat]) ** 2, axis=-1)
        hit = valid & (dist2 < delta**2)
        out[s:s + chunk] = hit.mean(axis=1)
    return out


@dataclass(eq=False)
class SubspaceFunction:
    """``psi = sum_i c_i phi_i`` over eigenpairs with eigenvalue ``<= E``.

    ``basis`` holds l2-orthonormal eigenvectors; nodal values are scaled so the
    grid quadrature gives unit L2 norm.
    """

    coefficients: np.ndarray
    eigenvalues: np.ndarray
    basis: np.ndarray
    cell_volume: float
    E: float

    @property
    def values(self) -> np.ndarray:
        return self.basis @ self.coefficients / math.sqrt(self.cell_volume)

    @property
    def dimension(self) -> int:
        return len(self.eigenvalues)

    def l2_norm(self) -> float:
        return math.sqrt(self.cell_volume * float(np.sum(self.values**2)))


def sample_subspace(H: DiscretizedHamiltonian, E: float, seed: int = 0, mode: str = "random-mix",
                    k: int = 1) -> SubspaceFunction:
    """Unit-norm element of the spectral subspace of ``H`` below ``E``.

    ``mode="single"`` returns the ``k``-th eigenvector (1-based);
    ``mode="random-mix"`` uses seeded standard-normal coefficients.
    """
    eig = H.eig
    idx = eig.below(E)
    if idx.size == 0:
        raise ValueError(f"no eigenvalue <= E={E}; the smallest eigenvalue is {eig.values[0]:.6g}")
    m = idx.size
    if mode == "single":
        if not 1 <= k <= m:
            raise ValueError(f"k={k} outside 1..{m} (eigenvalues <= E)")
        c = np.zeros(m)
        c[k - 1] = 1.0
    elif mode == "random-mix":
        c = np.random.default_rng(seed).standard_normal(m)
        c /= np.linalg.norm(c)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return SubspaceFunction(c, eig.values[idx].copy(), eig.vectors[:, idx], H.grid.cell_volume, float(E))


def observed_ratio(psi: SubspaceFunction | np.ndarray, sset: EquidistributedSet, grid: Grid) -> float:
    values = psi.values if isinstance(psi, SubspaceFunction) else np.asarray(psi).reshape(-1)
    if values.size != grid.size or sset.node_weights.size != grid.size:
        raise ValueError("function, set and grid sizes do not match")
    mass = values**2
    den = float(np.sum(mass))
    if den == 0:
        raise ValueError("zero function: observed ratio undefined")
    return float(np.sum(sset.node_weights * mass) / den)


@dataclass(frozen=True)
class UcpBoundParams:
    N: float
    G: float
    delta: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    E: float = 0.0

    def __post_init__(self):
        if self.N <= 0:
            raise ValueError(f"N must be positive, got {self.N}")
        if not 0 < self.delta < self.G / 2:
            raise ValueError(f"need 0 < delta < G/2, got delta={self.delta}, G={self.G}")


def geometric_factor(G, lambda1, lambda2) -> float:
    """``1 + G^2 l1 + G^(4/3) l2^(1/3)``, written through scale-invariant products."""
    return 1.0 + G * G * lambda1 + np.cbrt(G**4 * lambda2)


def exponent_factor(G, lambda1, lambda2, E) -> float:
    """The bracket multiplying ``N`` in the bound."""
    return float(geometric_factor(G, lambda1, lambda2) + math.sqrt(G * G * max(0.0, E)))


def predicted_bound(params: UcpBoundParams) -> float:
    p = params
    return (p.delta / p.G) ** (p.N * exponent_factor(p.G, p.lambda1, p.lambda2, p.E))


def observability_form(params: UcpBoundParams, kappa: float) -> tuple[float, float, float]:
    """``(d0, d1, kappa_minus)`` of ``||psi||^2 <= d0 exp(d1 sqrt(E - kappa_-)) ||psi||^2_S``."""
    p = params
    if not p.delta < p.G:
        raise ValueError("need delta < G")
    ratio = p.G / p.delta
    d0 = ratio ** (p.N * float(geometric_factor(p.G, p.lambda1, p.lambda2)))
    d1 = p.N * p.G * math.log(ratio)
    return d0, d1, min(kappa, 0.0)


def calibrate_N(experiments: Sequence[tuple[UcpBoundParams, float]], min_experiments: int = 3) -> float:
    """Smallest ``N`` for which the bound sits below every observed ratio.

    Each experiment is ``(params, observed)``; ``params.N`` is ignored.  The
    result carries a relative margin of ``1e-12`` so that re-evaluating a
    calibration experiment does not fail on rounding.
    """
    if len(experiments) < min_experiments:
        raise ValueError(f"need at least {min_experiments} experiments, got {len(experiments)}")
    if min_experiments >= 3 and len({round(p.delta / p.G, 12) for p, _ in experiments}) < 3:
        raise ValueError("calibration needs at least 3 distinct values of delta/G")
    best = -math.inf
    for p, obs in experiments:
        if obs <= 0:
            raise ValueError(f"observed ratio must be positive, got {obs}")
        n = math.log(obs) / (exponent_factor(p.G, p.lambda1, p.lambda2, p.E) * math.log(p.delta / p.G))
        best = max(best, n)
    if best <= 0:
        # observed ratio 1 on every experiment; any positive N is admissible
        best = np.finfo(float).tiny
    return float(best) * (1 + 1e-12)


def with_N(params: UcpBoundParams, N: float) -> UcpBoundParams:
    return replace(params, N=N)
