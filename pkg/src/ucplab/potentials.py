"""Admissible potentials and the constants of their relative bound.

A potential ``V`` is admissible when

    ||V psi||^2 <= lambda1 ||grad psi||^2 + lambda2 ||psi||^2

for every ``psi`` in ``H^1``.  On a grid this becomes the matrix inequality
``diag(V^2) <= lambda1 K + lambda2 I`` with ``K`` the Neumann stiffness; the
Neumann form is the smallest of the three boundary forms, so a pair that works
for it works for Dirichlet and periodic operators as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .discretization import Domain, Grid, build_grid, neumann_stiffness

DEFAULT_CAP = 1e6
QUADRATURE_POINTS = 5
SINGULAR_DEPTH = 8
LANCZOS_MIN = 600

Number = float | Fraction | int


@dataclass(frozen=True)
class AdmissibilityConstants:
    lambda1: Number
    lambda2: Number
    provenance: str = "analytic"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"relative-bound constants must be nonnegative, got ({self.lambda1}, {self.lambda2})")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2)


@dataclass(frozen=True)
class SubclassScaling:
    """Constants ``a, b`` of a potential whose square is admissible."""

    a: float
    b: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError(f"scaling constants must be nonnegative, got a={self.a}, b={self.b}")


def _cell_offsets(grid: Grid, m: int = QUADRATURE_POINTS) -> np.ndarray:
    """Midpoint sub-cell offsets, ``m^d`` rows, relative to each node."""
    base = (np.arange(m) + 0.5) / m - 0.5
    per_axis = [base * h for h in grid.spacing]
    mesh = np.meshgrid(*per_axis, indexing="ij")
    return np.stack([x.ravel() for x in mesh], axis=1)


class Potential:
    """Base class; subclasses implement :meth:`sample`."""

    name = "potential"

    def sample(self, grid: Grid) -> np.ndarray:
        raise NotImplementedError

    def analytic_constants(self, grid: Grid | None = None) -> AdmissibilityConstants | None:
        """A valid pair known in closed form, when one exists."""
        return None

    def __add__(self, other: "Potential") -> "Sum":
        return Sum([self, other])


@dataclass
class Bounded(Potential):
    """Bounded potential given by a vectorised function of node coordinates."""

    func: Callable[[np.ndarray], np.ndarray]
    sup: float | None = None
    name: str = "bounded"

    def sample(self, grid: Grid) -> np.ndarray:
        values = np.asarray(self.func(grid.coords), dtype=float)
        values = np.broadcast_to(values, (grid.size,)).copy()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.name}: bounded potential produced non-finite values")
        return values

    def analytic_constants(self, grid: Grid | None = None) -> AdmissibilityConstants | None:
        if self.sup is not None:
            return AdmissibilityConstants(0.0, float(self.sup) ** 2, "analytic")
        if grid is not None:
            return AdmissibilityConstants(0.0, float(np.max(np.abs(self.sample(grid)))) ** 2, "analytic")
        return None


def constant(c: float) -> Bounded:
    c = float(c)
    return Bounded(lambda x: np.full(len(x), c), sup=abs(c), name=f"const({c:g})")


def zero() -> Bounded:
    return Bounded(lambda x: np.zeros(len(x)), sup=0.0, name="zero")


def cosine(amplitude: float, wavenumbers: Sequence[float], offset: float = 0.0) -> Bounded:
    """``offset + amplitude * prod_j cos(k_j x_j)``."""
    k = np.asarray(wavenumbers, dtype=float)

    def f(x):
        return offset + amplitude * np.prod(np.cos(x * k[: x.shape[1]]), axis=1)

    return Bounded(f, sup=abs(offset) + abs(amplitude), name=f"cos({amplitude:g})")


def lp_exponent(gamma: float, d: int) -> float | None:
    """An ``L^p`` class for ``|x|^-gamma`` meeting the admissibility threshold, or None.

    Thresholds: ``p = 2`` for d = 1, ``p > 2`` for d = 2, ``p >= d`` for d >= 3;
    local integrability of ``|x|^(-gamma p)`` needs ``gamma p < d``.
    """
    if d == 1:
        return 2.0 if 2 * gamma < 1 else None
    if d == 2:
        # any p in (2, 2/gamma) works; take the midpoint
        return 0.5 * (2.0 + 2.0 / gamma) if gamma < 1 else None
    p = float(d)
    return p if gamma * p < d else None


@dataclass
class PowerSingularity(Potential):
    """``amplitude * |x - center|^-gamma``, cell-averaged and capped."""

    center: Sequence[float]
    gamma: float
    cap: float | None = DEFAULT_CAP
    amplitude: float = 1.0
    name: str = "power"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"exponent gamma must be positive, got {self.gamma}")
        self.center = tuple(float(c) for c in self.center)

    def lp_class(self, d: int) -> float:
        p = lp_exponent(self.gamma, d)
        if p is None:
            raise ValueError(
                f"|x|^-{self.gamma} in d={d} has no L^p class meeting the admissibility threshold"
            )
        return p

    def point_values(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(points - np.asarray(self.center), axis=1)
        with np.errstate(divide="ignore"):
            v = self.amplitude * np.power(r, -self.gamma)
        if self.cap is None:
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{self.name}: singular value at a quadrature point and no cap declared")
            return v
        return np.minimum(v, self.cap)

    def sample(self, grid: Grid) -> np.ndarray:
        d = grid.dim
        if len(self.center) != d:
            raise ValueError(f"center has {len(self.center)} coordinates, grid is {d}-dimensional")
        self.lp_class(d)
        for j, ((a, b), c) in enumerate(zip(grid.domain.intervals, self.center)):
            if not a <= c <= b:
                raise ValueError(f"singularity center {self.center} outside the closed domain on axis {j}")
        offsets = _cell_offsets(grid)
        out = np.empty(grid.size)
        chunk = max(1, 200_000 // len(offsets))
        coords = grid.coords
        for s in range(0, grid.size, chunk):
            pts = coords[s:s + chunk, None, :] + offsets[None, :, :]
            vals = self.point_values(pts.reshape(-1, d)).reshape(len(pts), len(offsets))
            out[s:s + chunk] = vals.mean(axis=1)
        # cells touching the singularity: recursive 5^d subdivision around it
        c = np.asarray(self.center)
        h = np.asarray(grid.spacing)
        near = np.flatnonzero(np.all(np.abs(coords - c) <= h / 2 * (1 + 1e-12), axis=1))
        for k in near:
            out[k] = self._singular_cell_average(coords[k], h)
        return out

    def _singular_cell_average(self, mid: np.ndarray, h: np.ndarray, depth: int = SINGULAR_DEPTH) -> float:
        """Mean over the cell at ``mid`` containing the centre: ``5^d`` sub-cells, Gauss-Legendre
        on those away from the centre, recursion into the one(s) touching it."""
        d = len(mid)
        m = QUADRATURE_POINTS
        base = (np.arange(m) + 0.5) / m - 0.5
        subs = np.stack(np.meshgrid(*[base * hj for hj in h], indexing="ij"), axis=-1).reshape(-1, d) + mid
        c = np.asarray(self.center)
        hs = h / m
        hit = np.all(np.abs(subs - c) <= hs / 2 * (1 + 1e-12), axis=1)
        rest = self._gauss_average(subs[~hit], hs)
        if depth == 0:
            # the innermost sub-cell carries O(hs^(d - gamma)) of the mass; its midpoint
            # would sit on the singularity and return the cap, so use its neighbours' mean
            return float((np.sum(rest) + np.sum(hit) * np.mean(rest)) / len(subs))
        total = float(np.sum(rest))
        for p in subs[hit]:
            total += self._singular_cell_average(p, hs, depth - 1)
        return total / len(subs)

    def _gauss_average(self, mids: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Per-cell means over boxes of side ``h`` centred at ``mids`` (tensor Gauss-Legendre)."""
        x, w = np.polynomial.legendre.leggauss(QUADRATURE_POINTS)
        d = mids.shape[1]
        offs = np.stack(np.meshgrid(*[x * hj / 2 for hj in h], indexing="ij"), axis=-1).reshape(-1, d)
        wts = np.prod(np.stack(np.meshgrid(*[w / 2] * d, indexing="ij"), axis=-1).reshape(-1, d), axis=1)
        vals = self.point_values((mids[:, None, :] + offs[None]).reshape(-1, d)).reshape(len(mids), -1)
        return vals @ wts


@dataclass
class Sampled(Potential):
    """Nodal values fixed for one particular grid."""

    values: np.ndarray
    grid_shape: tuple[int, ...]
    name: str = "sampled"

    def sample(self, grid: Grid) -> np.ndarray:
        if tuple(grid.shape) != tuple(self.grid_shape):
            raise ValueError(f"{self.name}: values are for grid shape {self.grid_shape}, got {grid.shape}")
        return np.asarray(self.values, dtype=float).reshape(-1).copy()

    def analytic_constants(self, grid: Grid | None = None) -> AdmissibilityConstants:
        return AdmissibilityConstants(0.0, float(np.max(np.abs(self.values))) ** 2, "analytic")


@dataclass
class RandomSample(Potential):
    """``sum_j omega_j u_j`` over the unit cells of the domain.

    ``shape`` maps coordinates relative to a cell centre (in ``[-1/2, 1/2]^d``)
    to the nonnegative single-site value; ``u_j`` vanishes outside its cell.
    """

    couplings: np.ndarray
    shape: Callable[[np.ndarray], np.ndarray]
    cell_size: float = 1.0
    name: str = "random"

    def __post_init__(self):
        self.couplings = np.asarray(self.couplings, dtype=float)
        if np.any(self.couplings < 0) or np.any(self.couplings > 1):
            raise ValueError("couplings must lie in [0, 1]")

    def sample(self, grid: Grid) -> np.ndarray:
        return single_site_matrix(grid, self.shape, self.cell_size) @ self.couplings.reshape(-1)


def cell_index(grid: Grid, cell_size: float = 1.0) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Unit-cell index of each node and the node's offset from its cell centre."""
    lo = np.array([a for a, _ in grid.domain.intervals])
    ncell = tuple(int(math.floor(L / cell_size + 1e-9)) for L in grid.domain.lengths)
    rel = (grid.coords - lo) / cell_size
    idx = np.floor(rel).astype(int)
    for j, n in enumerate(ncell):
        idx[:, j] = np.clip(idx[:, j], 0, n - 1)
    offset = rel - idx - 0.5
    flat = np.ravel_multi_index(tuple(idx.T), ncell)
    return flat, offset, ncell


def single_site_matrix(grid: Grid, shape: Callable[[np.ndarray], np.ndarray], cell_size: float = 1.0) -> np.ndarray:
    """Dense ``(nodes, cells)`` matrix whose column ``j`` is ``u_j`` on the grid."""
    flat, offset, ncell = cell_index(grid, cell_size)
    vals = np.asarray(shape(offset), dtype=float)
    if np.any(vals < 0):
        raise ValueError("single-site shape must be nonnegative")
    U = np.zeros((grid.size, int(np.prod(ncell))))
    U[np.arange(grid.size), flat] = vals
    return U


@dataclass
class Sum(Potential):
    terms: list = field(default_factory=list)
    name: str = "sum"

    def sample(self, grid: Grid) -> np.ndarray:
        if not self.terms:
            return np.zeros(grid.size)
        return np.sum([t.sample(grid) for t in self.terms], axis=0)

    def analytic_constants(self, grid: Grid | None = None) -> AdmissibilityConstants | None:
        sups = []
        for t in self.terms:
            c = t.analytic_constants(grid)
            if c is None or c.lambda1 != 0:
                return None
            sups.append(math.sqrt(c.lambda2))
        return AdmissibilityConstants(0.0, sum(sups) ** 2, "analytic")


CATALOG_NAMES = ("zero", "constant", "cosine", "power", "cosine+power")


def catalog(domain: Domain, gamma: float = 0.4) -> dict[str, Potential]:
    """Reference potentials on ``domain``: bounded and singular, plus a sum.

    The singularity sits at the domain centre; ``gamma`` must admit an
    ``L^p`` class in the domain's dimension.
    """
    d = domain.dim
    if lp_exponent(gamma, d) is None:
        raise ValueError(f"gamma={gamma} has no admissible L^p class in d={d}")
    centre = tuple((a + b) / 2 for a, b in domain.intervals)
    cos = cosine(3.0, [7.0] * d, offset=3.0)
    power = PowerSingularity(centre, gamma)
    return {
        "zero": zero(),
        "constant": constant(5.0),
        "cosine": cos,
        "power": power,
        "cosine+power": Sum([cos, power], name="cosine+power"),
    }


def sample_on_grid(potential: Potential, grid: Grid) -> np.ndarray:
    """Nodal values of ``potential``; singular kinds use capped cell averages."""
    values = potential.sample(grid)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{potential.name}: sampled values are not finite")
    return values


# --- relative-bound constants -------------------------------------------------


def check_relative_bound(values: np.ndarray, grid: Grid, constants: AdmissibilityConstants,
                         n_vectors: int = 100, seed: int = 0, rtol: float = 1e-10) -> int:
    """Number of seeded Gaussian vectors violating ``|V psi|^2 <= l1 psi^T K psi + l2 |psi|^2``."""
    K = neumann_stiffness(grid)
    V2 = np.asarray(values, dtype=float).reshape(-1) ** 2
    rng = np.random.default_rng(seed)
    psi = rng.standard_normal((grid.size, n_vectors))
    lhs = np.einsum("i,ij->j", V2, psi**2)
    grad = np.einsum("ij,ij->j", psi, K @ psi)
    rhs = float(constants.lambda1) * grad + float(constants.lambda2) * np.sum(psi**2, axis=0)
    return int(np.sum(lhs > rhs * (1 + rtol) + 1e-300))


@dataclass
class _Deflated:
    """Neumann stiffness diagonalised on the complement of the constant vector."""

    mean_v2: float
    inv_sqrt: np.ndarray
    block: np.ndarray
    coupling: np.ndarray


def _deflate(V2: np.ndarray, K: np.ndarray) -> _Deflated:
    n = len(V2)
    kvals, U = scipy.linalg.eigh(K)
    scale = max(1.0, float(kvals[-1]))
    keep = kvals > 1e-10 * scale
    if np.count_nonzero(~keep) != 1:
        raise ValueError("Neumann stiffness must have a one-dimensional kernel (connected grid)")
    Up = U[:, keep]
    e = np.full(n, 1.0 / math.sqrt(n))
    # re-orthogonalise against the exact constant vector
    Up = Up - np.outer(e, e @ Up)
    Up, _ = np.linalg.qr(Up)
    Kp = Up.T @ K @ Up
    kp, W = scipy.linalg.eigh(Kp)
    Up = Up @ W
    inv_sqrt = 1.0 / np.sqrt(kp)
    block = Up.T @ (V2[:, None] * Up)
    coupling = Up.T @ (V2 * e)
    return _Deflated(float(np.mean(V2)), inv_sqrt, block, coupling)


def _lambda1_for(defl: _Deflated, lambda2: float) -> float | None:
    """Smallest ``lambda1`` making ``diag(V^2) - lambda2 I - lambda1 K`` negative semidefinite.

    Writing ``psi = c e + phi`` with ``phi`` orthogonal to constants and
    maximising over ``c`` leaves the Schur complement on the complement, which
    is then compared against ``K`` there.  Returns None when ``lambda2`` is
    infeasible (the constant vector alone violates the bound).
    """
    a = defl.mean_v2 - lambda2
    gnorm = float(np.linalg.norm(defl.coupling))
    tol = 1e-12 * max(1.0, defl.mean_v2, lambda2)
    S = defl.block - lambda2 * np.eye(len(defl.block))
    if a > tol:
        return None
    if a > -tol:
        if gnorm > 1e-9 * max(1.0, defl.mean_v2):
            return None
    else:
        S = S + np.outer(defl.coupling, defl.coupling) / (-a)
    M = defl.inv_sqrt[:, None] * S * defl.inv_sqrt[None, :]
    return max(0.0, _top_eigenvalue(M))


def _top_eigenvalue(M: np.ndarray) -> float:
    """Largest eigenvalue of symmetric ``M``; Lanczos from a fixed start vector above ``LANCZOS_MIN``."""
    n = len(M)
    if n < LANCZOS_MIN:
        return float(scipy.linalg.eigh(M, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0])
    v0 = np.cos(np.arange(n) + 0.5)
    return float(scipy.sparse.linalg.eigsh(M, k=1, which="LA", v0=v0, tol=0, return_eigenvectors=False)[0])


def default_lambda2_grid(values: np.ndarray, n: int = 101) -> list[float]:
    """``n`` candidates from ``mean(V^2)`` to ``max(V^2)``, log-spaced."""
    V2 = np.asarray(values) ** 2
    lo, hi = float(np.mean(V2)), float(np.max(V2))
    if hi <= 0:
        return [0.0]
    lo = max(lo, hi * 1e-6)
    return list(np.geomspace(lo, hi, n))


def estimate_constants(potential: Potential | np.ndarray, grid: Grid, lambda2_grid: Sequence[float] | None = None,
                       weight: float = 1.0, n_check: int = 100, seed: int = 0) -> AdmissibilityConstants:
    """Best ``(lambda1, lambda2)`` on ``grid`` for the objective ``lambda1 + weight * lambda2^(1/3)``.

    ``potential`` may be a :class:`Potential` or nodal values.  The selected pair
    is re-checked on ``n_check`` seeded random vectors before it is returned.
    """
    values = potential if isinstance(potential, np.ndarray) else sample_on_grid(potential, grid)
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != grid.size:
        raise ValueError(f"{values.size} potential values for a grid of {grid.size} nodes")
    if lambda2_grid is None:
        lambda2_grid = default_lambda2_grid(values)
    candidates = sorted(float(x) for x in lambda2_grid)
    if not candidates:
        raise ValueError("lambda2 grid is empty")
    if any(c < 0 for c in candidates):
        raise ValueError("lambda2 candidates must be nonnegative")

    K = neumann_stiffness(grid).toarray()
    V2 = values**2
    defl = _deflate(V2, K)

    best = None
    for lam2 in candidates:
        if best is not None and weight * lam2 ** (1 / 3) >= best[0]:
            break
        lam1 = _lambda1_for(defl, lam2)
        if lam1 is None:
            continue
        # slack against rounding in the eigenvalue
        lam1 = lam1 * (1 + 1e-9) + 1e-14 * max(1.0, float(np.max(V2)))
        if lam1 < 1e-13 * max(1.0, float(np.max(V2))):
            lam1 = 0.0
        obj = lam1 + weight * lam2 ** (1 / 3)
        if best is None or obj < best[0]:
            best = (obj, lam1, lam2)
        if lam1 == 0.0:
            break
    if best is None:
        raise ValueError(
            f"no feasible lambda2 in the grid; need lambda2 >= mean(V^2) = {defl.mean_v2:.6g}"
        )
    result = AdmissibilityConstants(best[1], best[2], f"estimated:{grid.key()}")
    bad = check_relative_bound(values, grid, result, n_vectors=n_check, seed=seed)
    if bad:
        raise RuntimeError(f"estimated constants {result.as_tuple()} fail the post-hoc check on {bad} vectors")
    return result


# --- extension and restriction -----------------------------------------------


@dataclass
class ReflectionExtension:
    """Potential values on the tripled box, with the actual sample coordinates per axis."""

    values: np.ndarray
    domain: Domain
    axes: tuple[np.ndarray, ...]
    source_shape: tuple[int, ...]

    def restrict(self) -> np.ndarray:
        """Middle block, i.e. the values on the original box."""
        sl = tuple(slice(n, 2 * n) for n in self.source_shape)
        return self.values[sl]

    @property
    def grid(self) -> Grid:
        """Uniform grid on the tripled box (reflected axes get the Neumann layout)."""
        bc = tuple("P" if b == "P" else "N" for b in self.domain.bc)
        return build_grid(Domain(self.domain.intervals, bc), self.values.shape)


def extend_by_reflection(values, grid: Grid) -> ReflectionExtension:
    """Extend nodal values from ``Lambda`` to the box three times as long per axis.

    Dirichlet and Neumann axes are mirrored at both faces, periodic axes are
    copied; mixed conditions are handled axis by axis.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size != grid.size:
        raise ValueError(f"resolution mismatch: {arr.size} values for a grid of {grid.size} nodes")
    arr = arr.reshape(grid.shape)
    axes = []
    intervals = []
    for j, ((a, b), bc, x) in enumerate(zip(grid.domain.intervals, grid.domain.bc, grid.axes)):
        L = b - a
        if bc == "P":
            arr = np.concatenate([arr, arr, arr], axis=j)
            axes.append(np.concatenate([x - L, x, x + L]))
        else:
            flipped = np.flip(arr, axis=j)
            arr = np.concatenate([flipped, arr, flipped], axis=j)
            axes.append(np.concatenate([2 * a - x[::-1], x, 2 * b - x[::-1]]))
        intervals.append((a - L, b + L))
    return ReflectionExtension(arr, Domain(tuple(intervals), grid.domain.bc), tuple(axes), tuple(grid.shape))


def restriction_constants(lambda1, lambda2, L0, d: int) -> AdmissibilityConstants:
    """Constants on a box containing a cube of side ``L0`` from those on the whole space.

    Returns ``(2 3^d lambda1, 3^d (8 lambda1 / L0^2 + lambda2))``; exact for
    integer or :class:`~fractions.Fraction` inputs.
    """
    if L0 <= 0:
        raise ValueError(f"L0 must be positive, got {L0}")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("constants must be nonnegative")
    if isinstance(L0, int) and isinstance(lambda1, int):
        L0 = Fraction(L0)
    f = 3**d
    lam1 = 2 * f * lambda1
    lam2 = f * (8 * lambda1 / L0**2 + lambda2)
    if isinstance(lam2, Fraction) and lam2.denominator == 1:
        lam2 = int(lam2)
    return AdmissibilityConstants(lam1, lam2, "restriction")


def subclass_constants(scaling: SubclassScaling, epsilon: float) -> AdmissibilityConstants:
    """``(a eps, a / eps + b)``; ``eps = 1/G`` gives the scale-adapted pair ``(a/G, G a + b)``."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return AdmissibilityConstants(scaling.a * epsilon, scaling.a / epsilon + scaling.b, "subclass")
