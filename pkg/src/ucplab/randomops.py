"""Alloy-type random Schrodinger operators and Monte Carlo checks.

``H_omega = -Delta + V0 + sum_j omega_j u_j`` on ``Lambda_L = (0, L)^d`` with
unit lattice cells, i.i.d. uniform couplings and a common single-site shape.
Each sample's couplings come from a Philox stream keyed by the master seed and
the sample index, so any sample can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .discretization import (DiscretizedHamiltonian, Domain, Grid, assemble_hamiltonian, assemble_laplacian,
                             build_grid)
from .potentials import Potential, cell_index, sample_on_grid, single_site_matrix

MIN_SAMPLES = 50
GAP_CHECK_T = (0.0, 0.25, 0.5, 0.75, 1.0)


def plateau_shape(delta: float, floor: float = 0.0, amplitude: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """``amplitude`` on the ball of radius ``delta`` about the cell centre, linear decay to ``floor`` at radius 1/2.

    Offsets beyond radius 1/2 (cell corners) keep the value ``floor``.
    """
    if not 0 < delta < 0.5:
        raise ValueError(f"plateau radius must lie in (0, 1/2), got {delta}")
    if floor < 0:
        raise ValueError(f"floor must be nonnegative, got {floor}")
    if amplitude < 1:
        raise ValueError(f"amplitude must be at least 1 so that u >= 1 on the ball, got {amplitude}")

    def u(offset: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(offset), axis=1)
        ramp = amplitude * np.clip((0.5 - r) / (0.5 - delta), 0.0, 1.0)
        return np.maximum(ramp, floor)

    return u


def singular_shape(delta: float, floor: float = 0.0, amplitude: float = 1.0, gamma: float = 0.4, cap: float = 10.0):
    """Plateau times ``max(1, |x|^-gamma)`` near the centre, capped; still ``>= 1`` on the ball."""
    base = plateau_shape(delta, floor, amplitude)

    def u(offset: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(offset), axis=1)
        with np.errstate(divide="ignore"):
            bump = np.minimum(np.maximum(1.0, np.power(r, -gamma)), cap)
        return base(offset) * np.where(r <= delta, bump, 1.0)

    return u


SHAPES = {"plateau": plateau_shape, "singular": singular_shape}


@dataclass
class RandomEnsemble:
    """Ensemble on boxes ``(0, L)^d``; operators for several ``L`` share the seed.

    ``delta`` is the radius of the ball on which every single-site bump is
    at least one.
    """

    d: int = 1
    nodes_per_unit: int = 8
    delta: float = 0.25
    shape: str = "plateau"
    floor: float = 0.0
    amplitude: float = 1.0
    bc: str = "D"
    master_seed: int = 0
    base: Potential | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown single-site shape {self.shape!r}; choose from {sorted(SHAPES)}")
        if self.nodes_per_unit < 2:
            raise ValueError("need at least two nodes per unit cell")

    @property
    def site_shape(self):
        return SHAPES[self.shape](self.delta, floor=self.floor, amplitude=self.amplitude)

    def grid(self, L: int) -> Grid:
        return build_grid(Domain.box([float(L)] * self.d, self.bc), [int(L) * self.nodes_per_unit] * self.d)

    def parts(self, L: int) -> tuple[Grid, "object", np.ndarray, np.ndarray]:
        """Grid, Laplacian, base potential values and single-site matrix for size ``L``."""
        if L not in self._cache:
            if L < 1 or int(L) != L:
                raise ValueError(f"L must be a positive integer, got {L}")
            grid = self.grid(L)
            lap = assemble_laplacian(grid)
            v0 = np.zeros(grid.size) if self.base is None else sample_on_grid(self.base, grid)
            U = single_site_matrix(grid, self.site_shape)
            check_embedded_ball(grid, U, self.delta)
            self._cache[L] = (grid, lap, v0, U)
        return self._cache[L]

    def cells(self, L: int) -> int:
        return int(L) ** self.d

    def couplings(self, L: int, sample_index: int) -> np.ndarray:
        if sample_index < 0:
            raise ValueError("sample index must be nonnegative")
        key = (int(self.master_seed) << 64) | (int(L) << 40) | int(sample_index)
        rng = np.random.Generator(np.random.Philox(key=key))
        return rng.uniform(size=self.cells(L))

    def W(self, L: int) -> np.ndarray:
        """``sum_j u_j`` on the grid."""
        return self.parts(L)[3].sum(axis=1)


def check_embedded_ball(grid: Grid, U: np.ndarray, delta: float) -> None:
    """Every cell must contain a node within ``delta`` of its centre where ``u >= 1``."""
    flat, offset, ncell = cell_index(grid)
    r = np.linalg.norm(offset, axis=1)
    vals = U[np.arange(grid.size), flat]
    good = np.zeros(int(np.prod(ncell)), dtype=bool)
    inside = (r <= delta) & (vals >= 1.0)
    good[flat[inside]] = True
    if not np.all(good):
        j = int(np.flatnonzero(~good)[0])
        raise ValueError(f"cell {j} has no grid node in its radius-{delta} ball with u >= 1; refine the grid")


def draw_operator(ens: RandomEnsemble, L: int, sample_index: int, couplings=None) -> DiscretizedHamiltonian:
    """``H_0 + V_omega`` for one sample; ``couplings`` overrides the drawn values."""
    grid, lap, v0, U = ens.parts(L)
    omega = ens.couplings(L, sample_index) if couplings is None else np.broadcast_to(
        np.asarray(couplings, dtype=float), (ens.cells(L),))
    if np.any(omega < 0) or np.any(omega > 1):
        raise ValueError("couplings must lie in [0, 1]")
    return assemble_hamiltonian(grid, v0 + U @ omega, laplacian=lap)


def spectrum(H: DiscretizedHamiltonian) -> np.ndarray:
    """All eigenvalues, ascending; tridiagonal solver for 1D Dirichlet/Neumann."""
    g = H.grid
    if g.dim == 1 and g.domain.bc[0] != "P":
        A = H.sparse
        return scipy.linalg.eigvalsh_tridiagonal(A.diagonal(0), A.diagonal(1))
    return scipy.linalg.eigvalsh(H.matrix)


def _sample_spectrum(ens: RandomEnsemble, L: int, i: int, extra: np.ndarray | None = None) -> np.ndarray:
    H = draw_operator(ens, L, i)
    if extra is not None:
        H = H.with_potential(H.potential + extra)
    return spectrum(H)


# --- Wegner ---------------------------------------------------------------------


@dataclass
class WegnerRecord:
    E: float
    epsilons: list[float]
    Ls: list[int]
    M: int
    mean: np.ndarray
    stderr: np.ndarray
    tau_w: float
    tau_stderr: float
    C: float
    r2: float
    d: int

    @property
    def tau_interval(self) -> tuple[float, float]:
        return self.tau_w - 2 * self.tau_stderr, self.tau_w + 2 * self.tau_stderr

    @property
    def passed(self) -> bool:
        lo, hi = self.tau_interval
        return bool(hi > 0 and lo <= 1 and self.r2 >= 0.9)


def wegner_experiment(ens: RandomEnsemble, E: float, epsilons: Sequence[float], Ls: Sequence[int], M: int,
                      E0: float) -> WegnerRecord:
    """Mean eigenvalue count in ``[E - eps, E + eps]`` and a log-log fit against ``eps``.

    The same samples serve every ``eps``.  The fit pools ``mean / L^d`` over all
    ``L``; ``tau_w`` is its slope.
    """
    if M < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {M}")
    eps = np.asarray(sorted(float(e) for e in epsilons))
    if len(eps) < 2 or eps[0] <= 0:
        raise ValueError("need at least two positive epsilons")
    if E + 3 * eps[-1] > E0:
        raise ValueError(f"E + 3 max(eps) = {E + 3 * eps[-1]:.6g} exceeds E0 = {E0:.6g}")
    Ls = [int(L) for L in Ls]
    counts = np.zeros((len(Ls), len(eps), M))
    for a, L in enumerate(Ls):
        for i in range(M):
            ev = _sample_spectrum(ens, L, i)
            lo = np.searchsorted(ev, E - eps, side="left")
            hi = np.searchsorted(ev, E + eps, side="right")
            counts[a, :, i] = hi - lo
    mean = counts.mean(axis=2)
    stderr = counts.std(axis=2, ddof=1) / math.sqrt(M)
    dens = mean / np.asarray([L**ens.d for L in Ls], dtype=float)[:, None]
    x = np.tile(np.log(eps), len(Ls))
    y = dens.reshape(-1)
    ok = y > 0
    if ok.sum() < 3:
        raise ValueError("too few nonzero mean counts to fit an exponent; raise M or the epsilons")
    fit = stats.linregress(x[ok], np.log(y[ok]))
    return WegnerRecord(float(E), list(map(float, eps)), Ls, int(M), mean, stderr, float(fit.slope),
                        float(fit.stderr), float(math.exp(fit.intercept)), float(fit.rvalue**2), ens.d)


# --- lifting --------------------------------------------------------------------------


@dataclass
class LiftRow:
    k: int
    epsilon: float
    E_k: float
    lift: float
    rayleigh_K: float
    lower: float
    monotone: bool


@dataclass
class LiftTable:
    rows: list[LiftRow]
    exponents: dict[int, float]
    W_min: float

    @property
    def all_positive(self) -> bool:
        return all(r.lift > 0 for r in self.rows if r.epsilon > 0)

    @property
    def all_monotone(self) -> bool:
        return all(r.monotone for r in self.rows)

    @property
    def lower_bound_holds(self) -> bool:
        """``lift >= min(W) eps`` (rounding slack ``1e-10``)."""
        return all(r.lift >= r.lower - 1e-10 for r in self.rows)

    @property
    def upper_bound_holds(self) -> bool:
        """``lift <= K_k eps`` with ``K_k`` the Rayleigh bound over the first ``k`` eigenvectors."""
        return all(r.lift <= r.rayleigh_K * r.epsilon + 1e-10 for r in self.rows)


def lifting_check(ens: RandomEnsemble, L: int, sample_index: int, epsilons: Sequence[float], ks: Sequence[int],
                  E0: float) -> LiftTable:
    """Eigenvalue lift ``E_k(H + eps W) - E_k(H)`` for ``k`` (1-based) with ``E_k <= E0``."""
    H = draw_operator(ens, L, sample_index)
    W = ens.W(L)
    base = scipy.linalg.eigh(H.matrix)
    ev, vec = base
    eps = sorted(float(e) for e in epsilons)
    if any(e < 0 for e in eps):
        raise ValueError("epsilons must be nonnegative")
    for k in ks:
        if not 1 <= k <= len(ev):
            raise ValueError(f"k={k} outside 1..{len(ev)}")
    ks = [k for k in ks if ev[k - 1] <= E0]
    lifted = {e: spectrum(H.with_potential(H.potential + e * W)) for e in eps}
    W_min = float(np.min(W))
    rows = []
    exponents = {}
    for k in ks:
        Vk = vec[:, :k]
        K = float(np.linalg.eigvalsh(Vk.T @ (W[:, None] * Vk))[-1])
        prev = -math.inf
        pts = []
        for e in eps:
            lift = float(lifted[e][k - 1] - ev[k - 1])
            if e == 0:
                lift = 0.0
            rows.append(LiftRow(k, e, float(ev[k - 1]), lift, K, W_min * e, lift >= prev - 1e-12))
            prev = lift
            if e > 0 and lift > 0:
                pts.append((math.log(e), math.log(lift)))
        if len(pts) >= 2:
            x, y = np.array(pts).T
            exponents[k] = float(np.polyfit(x, y, 1)[0])
    return LiftTable(rows, exponents, W_min)


# --- initial length scale ---------------------------------------------------------


@dataclass
class IlsRow:
    L: int
    b: float
    width: float
    M: int
    p_hat: float
    stderr: float
    wilson: tuple[float, float]
    target: float
    passed: bool


@dataclass
class IlsRecord:
    rows: list[IlsRow]
    alpha: float
    q: float
    L0: int | None
    gap_checked: bool
    note: str

    @property
    def passed(self) -> bool:
        return self.L0 is not None


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    p = successes / n
    den = 1 + z**2 / n
    mid = (p + z**2 / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def gap_precheck(ens: RandomEnsemble, L: int, lo: float, hi: float) -> None:
    """Raise unless ``[lo, hi]`` avoids the spectrum of ``H_0 + t W`` for every check value of ``t``."""
    grid, lap, v0, U = ens.parts(L)
    for t in GAP_CHECK_T:
        ev = spectrum(draw_operator(ens, L, 0, couplings=t))
        inside = ev[(ev >= lo) & (ev <= hi)]
        if inside.size:
            raise ValueError(f"gap precheck failed at t={t}: eigenvalue {inside[0]:.6g} lies in [{lo:.6g}, {hi:.6g}]")


def ils_experiment(ens: RandomEnsemble, b: float | None, alpha: float, q: float, Ls: Sequence[int], M: int,
                   require_gap: bool = True, center_energy: float | None = None) -> IlsRecord:
    """Empirical ``P(sigma(H) avoids [b, b + L^-alpha))`` per ``L`` with Wilson intervals.

    With ``center_energy`` the interval is instead centred, per ``L``, on the
    eigenvalue of ``H_0 + W/2`` closest to that energy (negative control).
    ``L0`` is the smallest tested ``L`` from which every row passes.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if q <= 0:
        raise ValueError(f"q must be positive, got {q}")
    if M < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {M}")
    if (b is None) == (center_energy is None):
        raise ValueError("give exactly one of b or center_energy")
    Ls = sorted(int(L) for L in Ls)
    if require_gap:
        if b is None:
            raise ValueError("the gap precheck needs a fixed interval start b")
        gap_precheck(ens, Ls[0], b, b + Ls[0] ** (-alpha))
    rows = []
    for L in Ls:
        width = L ** (-alpha)
        if center_energy is not None:
            mid_ev = spectrum(draw_operator(ens, L, 0, couplings=0.5))
            c = float(mid_ev[np.argmin(np.abs(mid_ev - center_energy))])
            start = c - width / 2
        else:
            start = float(b)
        empty = 0
        for i in range(M):
            ev = _sample_spectrum(ens, L, i)
            hit = np.any((ev >= start) & (ev < start + width))
            empty += int(not hit)
        p = empty / M
        se = math.sqrt(p * (1 - p) / M)
        target = 1 - L ** (-q)
        rows.append(IlsRow(L, start, width, M, p, se, wilson_interval(empty, M), target, p >= target - 2 * se))
    L0 = None
    for r in reversed(rows):
        if not r.passed:
            break
        L0 = r.L
    note = "outside stated hypothesis (d < 3)" if ens.d < 3 else ""
    return IlsRecord(rows, float(alpha), float(q), L0, bool(require_gap), note)
