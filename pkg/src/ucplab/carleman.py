"""Carleman weights and empirical tests of the two weighted inequalities.

Radial weight on ``R^{d+1}``::

    w(y) = phi(|y| / rho),   phi(r) = r exp(-Phi(r)),   Phi(r) = int_0^r (1 - e^-t)/t dt

Half-space weight::

    u(x, t) = -t + t^2/2 - |x|^2/4

Baseline constants of the potential-free inequalities are not known in closed
form; they are calibrated on ``V = 0`` trials and then held fixed while the
thresholds ``alpha_0`` / ``beta_0`` absorb the potential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy import integrate

from .discretization import Domain, build_grid
from .potentials import AdmissibilityConstants, Potential, estimate_constants, sample_on_grid

PHI_RANGE = 1.2
LR_RHO_MAX = 2.0 - math.sqrt(2.0)
REFINEMENT_TOL = 0.05


def _Phi_integrand(t: float) -> float:
    if t < 1e-8:
        return 1.0 - t / 2
    return -math.expm1(-t) / t


def Phi_quad(r: float) -> float:
    """``int_0^r (1 - e^-t)/t dt`` by adaptive quadrature."""
    if r == 0:
        return 0.0
    val, _ = integrate.quad(_Phi_integrand, 0.0, r, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


def phi_eval(r: float) -> float:
    if not 0.0 <= r <= PHI_RANGE:
        raise ValueError(f"r={r} outside the tabulated range [0, {PHI_RANGE}]")
    return r * math.exp(-Phi_quad(r))


@lru_cache(maxsize=1)
def _Phi_table(deg: int = 40) -> np.ndarray:
    """Chebyshev coefficients of ``Phi`` on ``[0, PHI_RANGE]`` from quadrature at Chebyshev nodes."""
    k = np.arange(deg + 1)
    nodes = np.cos(np.pi * (k + 0.5) / (deg + 1))
    r = (nodes + 1) * PHI_RANGE / 2
    vals = np.array([Phi_quad(float(x)) for x in r])
    return cheb.chebfit(nodes, vals, deg)


def Phi_table(r) -> np.ndarray:
    """Vectorised ``Phi`` from the Chebyshev table (valid on ``[0, 1.2]``)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > PHI_RANGE * (1 + 1e-12)):
        raise ValueError(f"r outside the tabulated range [0, {PHI_RANGE}]")
    return cheb.chebval(2 * r / PHI_RANGE - 1, _Phi_table())


def phi_vec(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return r * np.exp(-Phi_table(r))


def _check_weight_chain(norm_y, w, grad_norm, rho) -> None:
    tol = 1e-12
    lower = norm_y / (rho * math.e)
    upper = norm_y / rho
    if np.any(w < lower * (1 - tol)) or np.any(w > upper * (1 + tol)):
        raise RuntimeError("weight violates |y|/(rho e) <= w <= |y|/rho")
    ratio2 = (w / norm_y) ** 2
    if np.any(grad_norm**2 > ratio2 * (1 + tol)) or np.any(ratio2 > (1 + tol) / rho**2):
        raise RuntimeError("weight violates |grad w|^2 <= w^2/|y|^2 <= 1/rho^2")


def nrt_weight(points, rho: float, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``w`` and ``grad w`` at an ``(k, d+1)`` array of points with ``0 < |y| <= 1.2 rho``.

    The two-sided bounds and the gradient chain are checked at every point with
    ``|y| <= rho`` (they are only claimed there).
    """
    y = np.atleast_2d(np.asarray(points, dtype=float))
    norm_y = np.linalg.norm(y, axis=1)
    if np.any(norm_y == 0):
        raise ValueError("the weight is not differentiable at y = 0")
    r = norm_y / rho
    Phi = Phi_table(r)
    w = r * np.exp(-Phi)
    dphi = np.exp(-Phi - r)
    grad = (dphi / (rho * norm_y))[:, None] * y
    if check:
        inside = r <= 1 + 1e-12
        _check_weight_chain(norm_y[inside], w[inside], dphi[inside] / rho, rho)
    return w, grad


def nrt_weight_eval(y, rho: float) -> tuple[float, np.ndarray]:
    y = np.asarray(y, dtype=float)
    n = float(np.linalg.norm(y))
    if n == 0:
        raise ValueError("y = 0 is excluded")
    if n > rho * (1 + 1e-12):
        raise ValueError(f"|y|={n} exceeds rho={rho}")
    w, g = nrt_weight(y[None, :], rho)
    return float(w[0]), g[0]


def nrt_alpha0(lambda1, lambda2, rho, alpha0_tilde, C0_tilde) -> float:
    """``max(alpha0~, 8 C0~ l1 rho^2 + (4 C0~ l2 rho^4)^(1/3))``."""
    for name, v in (("lambda1", lambda1), ("lambda2", lambda2), ("alpha0_tilde", alpha0_tilde), ("C0_tilde", C0_tilde)):
        if v < 0:
            raise ValueError(f"{name} must be nonnegative, got {v}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return max(alpha0_tilde, 8 * C0_tilde * lambda1 * rho**2 + np.cbrt(4 * C0_tilde * lambda2 * rho**4))


def lr_beta0(lambda1, lambda2, rho, beta0_tilde, C1_tilde) -> float:
    """``max(beta0~, 2 C1~ l1 rho^2 + (4 C1~ l2)^(1/3))`` for ``rho`` in ``(0, 2 - sqrt 2)``."""
    if not 0 < rho < LR_RHO_MAX:
        raise ValueError(f"rho={rho} outside (0, 2 - sqrt(2)) = (0, {LR_RHO_MAX:.6f}) required by the half-space estimate")
    for name, v in (("lambda1", lambda1), ("lambda2", lambda2), ("beta0_tilde", beta0_tilde), ("C1_tilde", C1_tilde)):
        if v < 0:
            raise ValueError(f"{name} must be nonnegative, got {v}")
    return max(beta0_tilde, 2 * C1_tilde * lambda1 * rho**2 + np.cbrt(4 * C1_tilde * lambda2))


def lr_weight(points) -> np.ndarray:
    """``u`` at an array of points ``(..., d+1)`` whose last coordinate is ``t``."""
    y = np.asarray(points, dtype=float)
    t = y[..., -1]
    return -t + t**2 / 2 - np.sum(y[..., :-1] ** 2, axis=-1) / 4


@dataclass
class PseudoconvexityVerdict:
    rho: float
    d: int
    samples: int
    min_dt_u: float
    min_margin: float
    condition_i: bool
    condition_ii: bool
    worst_point: np.ndarray
    worst_xi: np.ndarray

    @property
    def ok(self) -> bool:
        return self.condition_i and self.condition_ii


def lr_pseudoconvexity_check(rho: float, samples: int = 10_000, d: int = 2, seed: int = 0) -> PseudoconvexityVerdict:
    """Sample both nondegeneracy conditions of ``u`` on the half ball ``B_rho^+`` in ``R^{d+1}``.

    Condition (i): ``d_t u != 0``.  Condition (ii): for ``xi`` with
    ``|xi| = |grad u|`` and ``<xi, grad u> = 0``,
    ``sum_jk u_jk (xi_j xi_k + u_j u_k) > 0``.  Points are uniform in the half
    ball; ``xi`` is a Gaussian vector projected onto ``grad u``'s complement and
    rescaled.  For ``d = 1`` the complement is a line and (ii) holds for every
    ``rho < 1``; violations for large ``rho`` need ``d >= 2``.
    """
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    D = d + 1
    g = rng.standard_normal((samples, D))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radius = rho * rng.uniform(size=samples) ** (1.0 / D)
    pts = g * radius[:, None]
    pts[:, -1] = np.abs(pts[:, -1])
    x, t = pts[:, :-1], pts[:, -1]
    grad = np.concatenate([-x / 2, (t - 1)[:, None]], axis=1)
    xi = rng.standard_normal((samples, D))
    gn2 = np.sum(grad**2, axis=1)
    xi -= (np.sum(xi * grad, axis=1) / gn2)[:, None] * grad
    xi *= (np.sqrt(gn2) / np.linalg.norm(xi, axis=1))[:, None]
    orth = np.abs(np.sum(xi * grad, axis=1))
    if np.max(orth) > 1e-10:
        raise RuntimeError("projection failed to produce orthogonal directions")
    hess = np.concatenate([np.full(d, -0.5), [1.0]])
    q = np.sum(hess * (xi**2 + grad**2), axis=1)
    k = int(np.argmin(q))
    dtu = np.abs(t - 1)
    return PseudoconvexityVerdict(
        rho=rho, d=d, samples=samples,
        min_dt_u=float(np.min(dtu)), min_margin=float(q[k]),
        condition_i=bool(np.all(dtu > 0)), condition_ii=bool(np.all(q > 0)),
        worst_point=pts[k], worst_xi=xi[k],
    )


# --- test functions -------------------------------------------------------------


def _bump(s: np.ndarray) -> np.ndarray:
    """``(1 - s^2)^4`` on ``|s| < 1``, zero outside (C^3)."""
    out = np.zeros_like(s)
    m = np.abs(s) < 1
    out[m] = (1 - s[m] ** 2) ** 4
    return out


@dataclass
class AnnulusBump:
    """Radial bump in ``|y|`` times a smooth angular factor, supported in ``c - l <= |y| <= c + l``."""

    center: float
    width: float
    amplitude: float
    direction: np.ndarray
    power: int

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(Y, axis=-1)
        radial = _bump((r - self.center) / self.width)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosang = np.where(r > 0, (Y @ self.direction) / np.where(r > 0, r, 1), 0.0)
        return radial * (1 + self.amplitude * cosang**self.power)


@dataclass
class HalfBallBump:
    """``t * bump(|y - c| / r)``; vanishes on ``t = 0`` and is smooth across it."""

    center: np.ndarray
    radius: float

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        s = np.linalg.norm(Y - self.center, axis=-1) / self.radius
        return Y[..., -1] * _bump(s)


def nrt_test_function(rho: float, seed: int, dim: int, sigma: float = 0.1) -> AnnulusBump:
    rng = np.random.default_rng([seed, 1])
    span = (1 - sigma) * rho
    width = 0.35 * span / 2
    lo, hi = sigma * rho + width, rho - width
    center = rng.uniform(lo + 0.5 * (hi - lo), hi)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return AnnulusBump(center, width, float(rng.uniform(0, 0.5)), direction, int(rng.integers(1, 4)))


def lr_test_function(rho: float, seed: int, dim: int) -> HalfBallBump:
    rng = np.random.default_rng([seed, 2])
    radius = rho * rng.uniform(0.3, 0.6)
    reach = 0.97 * rho - radius
    while True:
        c = rng.uniform(-reach, reach, size=dim)
        # keep the ball inside B_rho and reaching into t > 0
        if np.linalg.norm(c) <= reach and c[-1] > -0.5 * radius:
            return HalfBallBump(c, radius)


# --- integrals ----------------------------------------------------------------------


def _laplacian_fd(F: np.ndarray, h: float) -> np.ndarray:
    P = np.pad(F, 1)
    out = np.zeros_like(F)
    core = tuple(slice(1, -1) for _ in range(F.ndim))
    for ax in range(F.ndim):
        plus = list(core)
        minus = list(core)
        plus[ax] = slice(2, None)
        minus[ax] = slice(None, -2)
        out += P[tuple(plus)] + P[tuple(minus)] - 2 * F
    return out / h**2


def _gradient_sq(F: np.ndarray, h: float) -> np.ndarray:
    P = np.pad(F, 1)
    core = tuple(slice(1, -1) for _ in range(F.ndim))
    out = np.zeros_like(F)
    for ax in range(F.ndim):
        plus = list(core)
        minus = list(core)
        plus[ax] = slice(2, None)
        minus[ax] = slice(None, -2)
        out += ((P[tuple(plus)] - P[tuple(minus)]) / (2 * h)) ** 2
    return out


def _slice_potential(potential: Potential | None, x_axis: np.ndarray, d: int) -> np.ndarray:
    """Potential on the tensor grid of the ``d`` space axes (constant in ``t``)."""
    n = len(x_axis)
    if potential is None:
        return np.zeros((n,) * d)
    h = x_axis[1] - x_axis[0]
    a = x_axis[0] - h / 2
    grid = build_grid(Domain(((a, a + n * h),) * d, ("N",) * d), [n] * d)
    return sample_on_grid(potential, grid).reshape((n,) * d)


@dataclass
class RatioSample:
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs


def nrt_ratio(func: AnnulusBump, rho: float, alpha: float, d: int, n: int,
              potential: Potential | None = None, sigma: float = 0.1, scale: float = 1.0) -> RatioSample:
    """``LHS / int w^(2-2 alpha) |(-Delta + V) Psi|^2`` on an ``n^(d+1)`` grid over ``[-rho, rho]^(d+1)``.

    Both sides are multiplied by the same power of ``min w`` to stay in range.
    """
    D = d + 1
    axis = np.linspace(-rho, rho, n)
    h = axis[1] - axis[0]
    Y = np.stack(np.meshgrid(*([axis] * D), indexing="ij"), axis=-1)
    Psi = scale * func(Y)
    r = np.linalg.norm(Y, axis=-1)
    total = float(np.sum(Psi**2))
    if total == 0:
        raise ValueError("test function vanishes on the grid")
    outside = float(np.sum(Psi[(r < sigma * rho) | (r > rho)] ** 2))
    if outside > 1e-12 * total:
        raise ValueError("test function has mass outside the annulus sigma*rho <= |y| <= rho")
    V = _slice_potential(potential, axis, d)[..., None] * np.ones(n)
    LPsi = -_laplacian_fd(Psi, h) + V * Psi
    G2 = _gradient_sq(Psi, h)
    active = (np.abs(Psi) + G2 + np.abs(LPsi)) > 0
    w, _ = nrt_weight(Y[active], rho)
    lw = np.log(w)
    ref = lw.min()
    # w^(p - 2 alpha) / (min w)^(-2 alpha) = exp(p lw - 2 alpha (lw - ref))
    base = -2 * alpha * (lw - ref)
    lhs = np.sum(alpha * rho**2 * np.exp(lw + base) * G2[active] + alpha**3 * np.exp(-lw + base) * Psi[active] ** 2)
    rhs = np.sum(np.exp(2 * lw + base) * LPsi[active] ** 2)
    vol = h**D
    return RatioSample(float(lhs * vol), float(rhs * vol))


def lr_ratio(func: HalfBallBump, rho: float, beta: float, d: int, n: int,
             potential: Potential | None = None, scale: float = 1.0) -> RatioSample:
    """``LHS / (interior + boundary)`` of the half-space inequality on ``[-rho, rho]^d x [0, rho]``.

    ``n`` points per space axis; the ``t`` axis shares the spacing and carries
    one ghost row below ``t = 0`` for the central differences there.
    """
    D = d + 1
    xs = np.linspace(-rho, rho, n)
    h = xs[1] - xs[0]
    nt = int(round(rho / h)) + 1
    ts = h * np.arange(-1, nt)
    Y = np.stack(np.meshgrid(*([xs] * d), ts, indexing="ij"), axis=-1)
    Psi = scale * func(Y)
    if np.sum(Psi**2) == 0:
        raise ValueError("test function vanishes on the grid")
    V = _slice_potential(potential, xs, d)[..., None] * np.ones(len(ts))
    LPsi = -_laplacian_fd(Psi, h) + V * Psi
    G2 = _gradient_sq(Psi, h)
    ew = np.exp(2 * beta * lr_weight(Y))
    # trapezoid in t over [0, rho] (row 1 is t = 0); the last row is inside the zero region
    wt = np.ones(len(ts))
    wt[0] = 0.0
    wt[1] = 0.5
    wt[-1] = 0.5
    sl = tuple(slice(1, -1) for _ in range(d))
    lhs = np.sum((ew * (beta * G2 + beta**3 * Psi**2) * wt)[sl]) * h**D
    interior = np.sum((ew * LPsi**2 * wt)[sl]) * h**D
    dt_psi0 = (Psi[..., 2] - Psi[..., 0]) / (2 * h)
    boundary = beta * np.sum((ew[..., 1] * dt_psi0**2)[sl]) * h**d
    return RatioSample(float(lhs), float(interior + boundary))


# --- trials -----------------------------------------------------------------------


@dataclass
class CarlemanRow:
    kind: str
    d: int
    rho: float
    param: float
    seed: int
    lhs: float
    rhs: float
    ratio: float
    ratio_refined: float
    flagged: bool


@dataclass
class CarlemanTrial:
    """One weight/geometry/potential combination with its baseline constants.

    ``baseline`` is ``(alpha0~, C0~)`` for ``kind="nrt"`` and ``(beta0~, C1~)``
    for ``kind="lr"``.
    """

    kind: str
    d: int = 1
    rho: float = 0.3
    potential: Potential | None = None
    constants: AdmissibilityConstants | None = None
    baseline: tuple[float, float] = (1.0, 1.0)
    sigma: float = 0.1
    n: int = 64
    name: str = "zero"

    def __post_init__(self):
        if self.kind not in ("nrt", "lr"):
            raise ValueError(f"kind must be 'nrt' or 'lr', got {self.kind!r}")
        if self.n < 64:
            raise ValueError(f"need at least 64 points per axis, got {self.n}")
        if self.kind == "lr" and not 0 < self.rho < LR_RHO_MAX:
            raise ValueError(f"rho={self.rho} outside (0, 2 - sqrt(2))")
        if self.potential is not None and self.constants is None:
            self.constants = potential_constants(self.potential, self.rho, self.d, self.n)

    @property
    def threshold(self) -> float:
        """``alpha_0`` or ``beta_0`` for this trial's potential and baseline."""
        l1, l2 = (0.0, 0.0) if self.constants is None else (float(self.constants.lambda1), float(self.constants.lambda2))
        if self.kind == "nrt":
            return nrt_alpha0(l1, l2, self.rho, *self.baseline)
        return lr_beta0(l1, l2, self.rho, *self.baseline)

    def test_function(self, seed: int):
        if self.kind == "nrt":
            return nrt_test_function(self.rho, seed, self.d + 1, self.sigma)
        return lr_test_function(self.rho, seed, self.d + 1)

    def ratio(self, param: float, seed: int, n: int | None = None, scale: float = 1.0) -> RatioSample:
        f = self.test_function(seed)
        n = self.n if n is None else n
        if self.kind == "nrt":
            return nrt_ratio(f, self.rho, param, self.d, n, self.potential, self.sigma, scale)
        return lr_ratio(f, self.rho, param, self.d, n, self.potential, scale)

    def fitted_constant(self, ratio: float) -> float:
        """``C0^ = ratio / rho^4`` (radial weight) or ``C1^ = ratio`` (half-space weight)."""
        return ratio / self.rho**4 if self.kind == "nrt" else ratio


def potential_constants(potential: Potential, rho: float, d: int, n: int) -> AdmissibilityConstants:
    """Relative-bound constants of ``potential`` on the space slice of the trial grid."""
    xs = np.linspace(-rho, rho, n)
    h = xs[1] - xs[0]
    a = -rho - h / 2
    m = min(n, 96) if d == 1 else min(n, 24)
    grid = build_grid(Domain(((a, a + n * h),) * d, ("N",) * d), [m] * d)
    return estimate_constants(potential, grid)


@dataclass
class CarlemanTable:
    trial: CarlemanTrial
    rows: list[CarlemanRow] = field(default_factory=list)

    def above_threshold(self) -> list[CarlemanRow]:
        thr = self.trial.threshold
        return [r for r in self.rows if r.param >= thr * (1 - 1e-12)]

    @property
    def max_ratio(self) -> float:
        rows = self.above_threshold()
        return max(r.ratio for r in rows) if rows else float("nan")

    @property
    def fitted_constant(self) -> float:
        return self.trial.fitted_constant(self.max_ratio)

    @property
    def flagged_rate(self) -> float:
        return sum(r.flagged for r in self.rows) / len(self.rows) if self.rows else 0.0


def empirical_carleman(trial: CarlemanTrial, params: Sequence[float], seeds: Sequence[int],
                       refine: bool = True) -> CarlemanTable:
    """Ratio table over ``(alpha or beta, seed)``, with a refinement check per entry."""
    table = CarlemanTable(trial)
    for p in params:
        for s in seeds:
            base = trial.ratio(p, s)
            if refine:
                fine = trial.ratio(p, s, n=2 * trial.n - 1)
                rr = fine.ratio
                flagged = abs(rr - base.ratio) >= REFINEMENT_TOL * abs(base.ratio)
            else:
                rr, flagged = float("nan"), False
            table.rows.append(CarlemanRow(trial.kind, trial.d, trial.rho, float(p), int(s),
                                          base.lhs, base.rhs, base.ratio, rr, bool(flagged)))
    return table


def calibrate_baseline(kind: str, params: Sequence[float], seeds: Sequence[int], rho: float, d: int = 1,
                       n: int = 64, sigma: float = 0.1, param0: float | None = None) -> tuple[float, float, CarlemanTable]:
    """Baseline ``(param0~, C~)`` from potential-free trials.

    ``param0~`` defaults to ``max(1, min(params))``; ``C~`` is the largest
    fitted constant over ``params >= param0~`` and all seeds.  Potential-bearing
    trials should use the same parameter list, since the supremum over larger
    parameters is not sampled.
    """
    p0 = max(1.0, min(params)) if param0 is None else float(param0)
    trial = CarlemanTrial(kind, d=d, rho=rho, baseline=(p0, 1.0), sigma=sigma, n=n)
    table = empirical_carleman(trial, [p for p in params if p >= p0], seeds)
    C = trial.fitted_constant(max(r.ratio for r in table.rows))
    trial.baseline = (p0, C)
    return p0, C, table
