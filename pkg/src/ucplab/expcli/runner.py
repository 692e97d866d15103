"""Sweep execution and result persistence (CSV plus a JSON mirror).

Rows are produced by per-kind task lists and written in sweep order.  When a
run carries its own calibration (no ``[calibration]`` table) the calibrated
columns need every row first, so output is buffered; otherwise each task's
rows are flushed as soon as they are ready.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import __version__
from ..carleman import CarlemanTrial, calibrate_baseline, potential_constants
from ..control import ControlProblem, CostBoundParams, calibrate_K, cost_bound, synthesize_control
from ..discretization import Domain, assemble_hamiltonian, build_grid
from ..ghost import build_extension, check_pde_identity, h1_norm_sandwich, h2_decomposition, minimal_c, minimal_c_tilde
from ..potentials import (AdmissibilityConstants, catalog, check_relative_bound, default_lambda2_grid,
                          estimate_constants, sample_on_grid)
from ..randomops import RandomEnsemble, ils_experiment, lifting_check, wegner_experiment
from ..ucp import UcpBoundParams, build_set, calibrate_N, observed_ratio, predicted_bound, sample_subspace
from .config import ExperimentConfig

PASS, FAIL = "PASS", "FAIL"


class RunError(RuntimeError):
    """A module error tagged with the sweep coordinates that raised it."""


@dataclass
class Plan:
    columns: list[tuple[str, str]]
    tasks: list[tuple[dict, Callable[[], list[dict]]]]
    finalize: Callable[[list[dict]], dict] | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class ResultRecord:
    kind: str
    name: str
    digest: str
    version: str
    columns: list[tuple[str, str]]
    rows: list[dict]
    wall_time: float
    meta: dict
    csv_path: str | None = None
    json_path: str | None = None

    @property
    def n_pass(self) -> int:
        return sum(r.get("verdict") == PASS for r in self.rows)

    @property
    def n_fail(self) -> int:
        return sum(r.get("verdict") == FAIL for r in self.rows)

    @property
    def ok(self) -> bool:
        return self.n_fail == 0

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1


# --- formatting ---------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def header(columns) -> list[str]:
    return [f"{n}[{u}]" if u else n for n, u in columns]


def _jsonable(v):
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def _verdict(ok: bool) -> str:
    return PASS if ok else FAIL


# --- shared helpers ---------------------------------------------------------------


def _hamiltonian(cfg: ExperimentConfig, potential):
    domain = cfg.build_domain()
    grid = build_grid(domain, cfg.points())
    values = sample_on_grid(potential, grid)
    return domain, grid, assemble_hamiltonian(grid, values), values


def _constants(potential, values: np.ndarray, grid, weight: float = 1.0) -> AdmissibilityConstants:
    """Analytic constants when the potential provides them, otherwise a grid estimate."""
    if not np.any(values):
        return AdmissibilityConstants(0.0, 0.0, "analytic")
    ana = potential.analytic_constants(grid)
    if ana is not None:
        return ana
    return estimate_constants(values, grid, weight=weight)


def _bc_label(domain: Domain) -> str:
    return "x".join(domain.bc)


# --- ucp ------------------------------------------------------------------------------


UCP_COLUMNS = [
    ("d", ""), ("bc", ""), ("potential", ""), ("G", "length"), ("delta", "length"), ("delta_over_G", "1"),
    ("E", "energy"), ("lambda1", "1"), ("lambda2", "energy^2"), ("seed", ""), ("subspace_dim", "count"),
    ("observed", "1"), ("predicted", "1"), ("N_used", "1"), ("status", ""), ("verdict", ""),
]


def _plan_ucp(cfg: ExperimentConfig) -> Plan:
    p, sw = cfg.params, cfg.sweep
    G = p["G"]
    N_given = cfg.calibration.get("N")

    def task(pid, pot):
        def run():
            domain, grid, H, values = _hamiltonian(cfg, pot)
            c = _constants(pot, values, grid, p["weight"])
            rows = []
            for E in sw["E"]:
                for r in sw["delta_over_G"]:
                    sset = build_set(domain, grid, G, r * G, placement=p["placement"], seed=cfg.seed)
                    for s in sw["seeds"]:
                        row = dict(d=domain.dim, bc=_bc_label(domain), potential=pid, G=G, delta=r * G,
                                   delta_over_G=r, E=E, lambda1=c.lambda1, lambda2=c.lambda2, seed=s)
                        if H.eig.below(E).size == 0:
                            row.update(subspace_dim=0, status="empty subspace", verdict="")
                            rows.append(row)
                            continue
                        psi = sample_subspace(H, E, seed=cfg.seed + s, mode=p["mode"], k=p["k"])
                        row.update(subspace_dim=psi.dimension, observed=observed_ratio(psi, sset, grid), status="ok")
                        rows.append(row)
            if N_given is not None:
                for row in rows:
                    _ucp_finish(row, N_given)
            return rows
        return run

    tasks = [({"potential": pid}, task(pid, pot)) for pid, pot in cfg.potentials(cfg.build_domain())]

    def finalize(rows):
        exps = [(_ucp_params(r, 1.0), r["observed"]) for r in rows if r["status"] == "ok"]
        N = calibrate_N(exps)
        for r in rows:
            _ucp_finish(r, N)
        return {"N_calibrated": N}

    return Plan(UCP_COLUMNS, tasks, None if N_given is not None else finalize, {"N_given": N_given})


def _ucp_params(row, N) -> UcpBoundParams:
    return UcpBoundParams(N, row["G"], row["delta"], row["lambda1"], row["lambda2"], row["E"])


def _ucp_finish(row, N) -> None:
    row["N_used"] = N
    if row["status"] != "ok":
        return
    row["predicted"] = predicted_bound(_ucp_params(row, N))
    row["verdict"] = _verdict(row["observed"] >= row["predicted"])


# --- ghost -------------------------------------------------------------------------------


GHOST_COLUMNS = [
    ("bc", ""), ("potential", ""), ("E", "energy"), ("tau", "length"), ("seed", ""), ("subspace_dim", "count"),
    ("omega", "energy^2"), ("pde_residual_rel", "1"), ("h1_lower", "length"), ("h1_norm", "length"),
    ("h1_upper", "length"), ("sandwich_ok", ""), ("c", "energy"), ("c_tilde", "energy^2"),
    ("mixed_margin", "1"), ("spatial_margin", "1"), ("h2_ok", ""), ("status", ""), ("verdict", ""),
]


def _plan_ghost(cfg: ExperimentConfig) -> Plan:
    p, sw = cfg.params, cfg.sweep
    tol = cfg.tolerances["pde_residual"]

    def task(pid, pot):
        def run():
            domain, grid, H, values = _hamiltonian(cfg, pot)
            consts = _constants(pot, values, grid)
            c, ct = minimal_c(H), minimal_c_tilde(H)
            rows = []
            for E in sw["E"]:
                for tau in sw["tau"]:
                    for s in sw["seeds"]:
                        row = dict(bc=_bc_label(domain), potential=pid, E=E, tau=tau, seed=s)
                        if H.eig.below(E).size == 0:
                            row.update(subspace_dim=0, status="empty subspace", verdict="")
                            rows.append(row)
                            continue
                        psi = sample_subspace(H, E, seed=cfg.seed + s, mode=p["mode"])
                        ext = build_extension(psi, tau, p["n_t"], consts)
                        res = check_pde_identity(ext, H)
                        rel = res.spectral / max(res.psi_norm, 1e-300)
                        h2 = h2_decomposition(ext, H, c, ct, n_probe=p["n_probe"], seed=cfg.seed + s)
                        row.update(subspace_dim=psi.dimension, omega=ext.omega, pde_residual_rel=rel, c=c,
                                   c_tilde=ct, mixed_margin=h2.mixed_margin, spatial_margin=h2.spatial_margin,
                                   h2_ok=h2.ok)
                        ok = rel <= tol and h2.ok
                        if E >= 0:
                            sw_ = h1_norm_sandwich(ext, grid)
                            row.update(h1_lower=sw_.lower, h1_norm=sw_.norm, h1_upper=sw_.upper, sandwich_ok=sw_.ok)
                            ok = ok and sw_.ok
                            row["status"] = "ok"
                        else:
                            row["status"] = "E < 0: norm comparison not applicable"
                        row["verdict"] = _verdict(ok)
                        rows.append(row)
            return rows
        return run

    tasks = [({"potential": pid}, task(pid, pot)) for pid, pot in cfg.potentials(cfg.build_domain())]
    return Plan(GHOST_COLUMNS, tasks)


# --- carleman --------------------------------------------------------------------------


def _carleman_columns(param: str) -> list[tuple[str, str]]:
    return [
        ("weight", ""), ("d", ""), ("rho", "length"), ("potential", ""), (param, "1"), ("seed", ""),
        ("lhs", "norm^2"), ("rhs", "norm^2"), ("ratio", "1"), ("ratio_refined", "1"), ("flagged", ""),
        ("lambda1", "1"), ("lambda2", "energy^2"), ("threshold", "1"), ("above_threshold", ""),
        ("fitted_constant", "1"), ("baseline_constant", "1"), ("verdict", ""),
    ]


def _plan_carleman(cfg: ExperimentConfig) -> Plan:
    kind = "nrt" if cfg.kind == "carleman-nrt" else "lr"
    pname, p0key, ckey = ("alpha", "alpha0_tilde", "C0_tilde") if kind == "nrt" else ("beta", "beta0_tilde", "C1_tilde")
    p, sw, tol = cfg.params, cfg.sweep, cfg.tolerances
    rho, d, n = p["rho"], p["d"], p["n"]
    sigma = p.get("sigma", 0.1)
    params = sorted(sw[pname])
    seeds = [cfg.seed + s for s in sw["seeds"]]
    meta = {}
    if cfg.calibration.get(p0key) is not None:
        baseline = (cfg.calibration[p0key], cfg.calibration[ckey])
        meta["baseline_source"] = "config"
    else:
        p0, C, _ = calibrate_baseline(kind, params, seeds, rho, d=d, n=n, sigma=sigma)
        baseline = (p0, C)
        meta["baseline_source"] = "calibrated on V = 0 with this sweep"
    meta[p0key], meta[ckey] = baseline
    slice_domain = Domain(((-rho, rho),) * d, ("N",) * d)
    pots = cfg.potentials(slice_domain)

    def task(pid, pot, param):
        def run():
            V = None if pid == "zero" else pot
            trial = CarlemanTrial(kind, d=d, rho=rho, potential=V, baseline=baseline, sigma=sigma, n=n, name=pid)
            thr = trial.threshold
            l1, l2 = (0.0, 0.0) if trial.constants is None else trial.constants.as_tuple()
            rows = []
            for s in seeds:
                base = trial.ratio(param, s)
                fine = trial.ratio(param, s, n=2 * n - 1)
                flagged = abs(fine.ratio - base.ratio) >= tol["refinement"] * abs(base.ratio)
                above = param >= thr * (1 - 1e-12)
                fitted = trial.fitted_constant(base.ratio)
                if flagged:
                    verdict = FAIL
                elif above:
                    verdict = _verdict(fitted <= tol["factor"] * baseline[1])
                else:
                    verdict = ""
                rows.append({"weight": kind, "d": d, "rho": rho, "potential": pid, pname: param, "seed": s,
                             "lhs": base.lhs, "rhs": base.rhs, "ratio": base.ratio, "ratio_refined": fine.ratio,
                             "flagged": flagged, "lambda1": l1, "lambda2": l2, "threshold": thr,
                             "above_threshold": above, "fitted_constant": fitted, "baseline_constant": baseline[1],
                             "verdict": verdict})
            return rows
        return run

    tasks = [({"potential": pid, pname: a}, task(pid, pot, a)) for pid, pot in pots for a in params]
    return Plan(_carleman_columns(pname), tasks, None, meta)


# --- control ---------------------------------------------------------------------------


CONTROL_COLUMNS = [
    ("potential", ""), ("G", "length"), ("delta", "length"), ("delta_over_G", "1"), ("T", "time"), ("m", "count"),
    ("kappa_minus", "energy"), ("cost", "L2"), ("worst_case_cost", "1"), ("bound", "1"), ("residual", "1"),
    ("K_used", "1"), ("regularized", ""), ("verdict", ""),
]


def _plan_control(cfg: ExperimentConfig) -> Plan:
    p, sw = cfg.params, cfg.sweep
    G, m = p["G"], p["m"]
    K_given = cfg.calibration.get("K")
    tol = cfg.tolerances["residual"]

    def task(pid, pot):
        def run():
            domain, grid, H, values = _hamiltonian(cfg, pot)
            c = _constants(pot, values, grid)
            coef = np.random.default_rng(cfg.seed + p["u0_seed"]).standard_normal(min(m, grid.size))
            u0 = H.eig.vectors[:, : len(coef)] @ coef
            rows = []
            for r in sw["delta_over_G"]:
                sset = build_set(domain, grid, G, r * G)
                for T in sw["T"]:
                    prob = ControlProblem(H, sset, T, u0, m=m)
                    res = synthesize_control(prob, p["n_time"])
                    row = dict(potential=pid, G=G, delta=r * G, delta_over_G=r, T=T, m=prob.modes,
                               kappa_minus=prob.kappa_minus, cost=res.cost, worst_case_cost=res.worst_case_cost,
                               residual=res.terminal_residual, regularized=res.regularized,
                               _lambda=(c.lambda1, c.lambda2))
                    if K_given is not None:
                        _control_finish(row, K_given, tol)
                    rows.append(row)
            return rows
        return run

    tasks = [({"potential": pid}, task(pid, pot)) for pid, pot in cfg.potentials(cfg.build_domain())]

    def finalize(rows):
        K = calibrate_K([(_control_params(r, 1.0), r["worst_case_cost"]) for r in rows])
        for r in rows:
            _control_finish(r, K, tol)
        return {"K_calibrated": K}

    return Plan(CONTROL_COLUMNS, tasks, None if K_given is not None else finalize, {"K_given": K_given})


def _control_params(row, K) -> CostBoundParams:
    l1, l2 = row["_lambda"]
    return CostBoundParams(K, row["G"], row["delta"], row["T"], l1, l2, row["kappa_minus"])


def _control_finish(row, K, tol) -> None:
    row["K_used"] = K
    row["bound"] = cost_bound(_control_params(row, K))
    row["verdict"] = _verdict(row["worst_case_cost"] <= row["bound"] and row["residual"] <= tol)


# --- random operators -------------------------------------------------------------------


RANDOM_COLUMNS = [
    ("experiment", ""), ("L", "length"), ("epsilon_or_b", "energy"), ("width", "energy"), ("M", "count"),
    ("statistic", ""), ("value", ""), ("stderr", ""), ("verdict", ""),
]


def _ensemble(cfg: ExperimentConfig) -> RandomEnsemble:
    e = cfg.ensemble
    return RandomEnsemble(d=e["d"], nodes_per_unit=e["nodes_per_unit"], delta=e["delta"], shape=e["shape"],
                          floor=e["floor"], amplitude=e["amplitude"], bc=e["bc"], master_seed=cfg.seed)


def _plan_wegner(cfg: ExperimentConfig) -> Plan:
    p, sw = cfg.params, cfg.sweep
    meta = {}

    def run():
        rec = wegner_experiment(_ensemble(cfg), p["E"], sw["epsilon"], sw["L"], p["M"], p["E0"])
        rows = []
        for a, L in enumerate(rec.Ls):
            for b, eps in enumerate(rec.epsilons):
                rows.append(dict(experiment="wegner", L=L, epsilon_or_b=eps, width=2 * eps, M=rec.M,
                                 statistic="mean_count", value=rec.mean[a, b], stderr=rec.stderr[a, b], verdict=""))
        ok = rec.passed and rec.r2 >= cfg.tolerances["r2"]
        rows.append(dict(experiment="wegner", M=rec.M, statistic="tau_w", value=rec.tau_w, stderr=rec.tau_stderr,
                         verdict=_verdict(ok)))
        rows.append(dict(experiment="wegner", M=rec.M, statistic="r2", value=rec.r2, verdict=""))
        rows.append(dict(experiment="wegner", M=rec.M, statistic="C", value=rec.C, verdict=""))
        meta.update(tau_w=rec.tau_w, tau_stderr=rec.tau_stderr, r2=rec.r2, C=rec.C, d=rec.d)
        return rows

    return Plan(RANDOM_COLUMNS, [({"experiment": "wegner"}, run)], None, meta)


def _plan_ils(cfg: ExperimentConfig) -> Plan:
    p, sw = cfg.params, cfg.sweep
    meta = {}

    def run():
        rec = ils_experiment(_ensemble(cfg), p.get("b"), p["alpha"], p["q"], sw["L"], p["M"],
                             require_gap=p["require_gap"], center_energy=p.get("center_energy"))
        rows = []
        for r in rec.rows:
            if rec.L0 is None:
                verdict = FAIL
            else:
                verdict = _verdict(r.passed) if r.L >= rec.L0 else ""
            rows.append(dict(experiment="ils", L=r.L, epsilon_or_b=r.b, width=r.width, M=r.M, statistic="p_empty",
                             value=r.p_hat, stderr=r.stderr, verdict=verdict))
        rows.append(dict(experiment="ils", L=rec.L0, M=p["M"], statistic="L0", value=rec.L0,
                         verdict=_verdict(rec.passed)))
        meta.update(L0=rec.L0, note=rec.note, gap_checked=rec.gap_checked,
                    wilson={str(r.L): list(r.wilson) for r in rec.rows},
                    target={str(r.L): r.target for r in rec.rows})
        return rows

    return Plan(RANDOM_COLUMNS, [({"experiment": "ils"}, run)], None, meta)


LIFT_COLUMNS = [
    ("k", ""), ("epsilon", "1"), ("E_k", "energy"), ("lift", "energy"), ("lower_bound", "energy"),
    ("upper_bound", "energy"), ("monotone", ""), ("verdict", ""),
]


def _plan_lifting(cfg: ExperimentConfig) -> Plan:
    p, sw = cfg.params, cfg.sweep
    meta = {}

    def run():
        tab = lifting_check(_ensemble(cfg), p["L"], p["sample"], sw["epsilon"], sw["k"], p["E0"])
        rows = []
        for r in tab.rows:
            upper = r.rayleigh_K * r.epsilon
            ok = r.monotone and r.lift >= r.lower - 1e-10 and r.lift <= upper + 1e-10
            if r.epsilon > 0:
                ok = ok and r.lift > 0
            rows.append(dict(k=r.k, epsilon=r.epsilon, E_k=r.E_k, lift=r.lift, lower_bound=r.lower,
                             upper_bound=upper, monotone=r.monotone, verdict=_verdict(ok)))
        meta.update(W_min=tab.W_min, exponents={str(k): v for k, v in tab.exponents.items()})
        return rows

    return Plan(LIFT_COLUMNS, [({"experiment": "lifting"}, run)], None, meta)


# --- constants -----------------------------------------------------------------------------


CONST_COLUMNS = [
    ("potential", ""), ("d", ""), ("bc", ""), ("lambda1", "1"), ("lambda2", "energy^2"), ("provenance", ""),
    ("analytic_lambda2", "energy^2"), ("violations", "count"), ("verdict", ""),
]


def _plan_constants(cfg: ExperimentConfig) -> Plan:
    p = cfg.params
    domain = cfg.build_domain()
    cat = catalog(domain)

    def task(name):
        def run():
            grid = build_grid(domain, cfg.points())
            pot = cat[name]
            values = sample_on_grid(pot, grid)
            c = estimate_constants(values, grid, default_lambda2_grid(values, p["lambda2_points"]),
                                   weight=p["weight"], n_check=p["n_check"], seed=cfg.seed)
            bad = check_relative_bound(values, grid, c, n_vectors=p["n_check"], seed=cfg.seed + 1)
            ana = pot.analytic_constants(grid)
            return [dict(potential=name, d=domain.dim, bc=_bc_label(domain), lambda1=c.lambda1, lambda2=c.lambda2,
                         provenance=c.provenance, analytic_lambda2=None if ana is None else ana.lambda2,
                         violations=bad, verdict=_verdict(bad == 0))]
        return run

    return Plan(CONST_COLUMNS, [({"potential": n}, task(n)) for n in cfg.sweep["potentials"]])


PLANNERS = {
    "ucp": _plan_ucp,
    "ghost": _plan_ghost,
    "carleman-nrt": _plan_carleman,
    "carleman-lr": _plan_carleman,
    "control": _plan_control,
    "wegner": _plan_wegner,
    "ils": _plan_ils,
    "lifting": _plan_lifting,
    "constants": _plan_constants,
}


# --- driver ---------------------------------------------------------------------------------


def _execute(coords: dict, fn: Callable[[], list[dict]], kind: str) -> list[dict]:
    try:
        return fn()
    except Exception as exc:
        where = ", ".join(f"{k}={v}" for k, v in coords.items())
        raise RunError(f"{kind} failed at {where}: {exc}") from exc


def run(cfg: ExperimentConfig, out_dir: str | None = None, jobs: int = 1) -> ResultRecord:
    """Execute the sweep and write ``<out>/<name>.csv`` and ``<name>.json``."""
    t0 = time.perf_counter()
    plan = PLANNERS[cfg.kind](cfg)
    if not plan.tasks:
        raise RunError("empty sweep: nothing to run")
    out_dir = out_dir or cfg.output
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{cfg.name}.csv")
    json_path = os.path.join(out_dir, f"{cfg.name}.json")
    names = [n for n, _ in plan.columns]
    rows: list[dict] = []

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool, open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header(plan.columns) + ["config_digest"])
        fh.flush()

        def emit(batch):
            for r in batch:
                writer.writerow([fmt(r.get(n)) for n in names] + [cfg.digest])
            fh.flush()

        results = pool.map(lambda t: _execute(t[0], t[1], cfg.kind), plan.tasks)
        for batch in results:
            rows.extend(batch)
            if plan.finalize is None:
                emit(batch)
        if plan.finalize is not None:
            plan.meta.update(plan.finalize(rows))
            emit(rows)

    record = ResultRecord(cfg.kind, cfg.name, cfg.digest, __version__, plan.columns, rows,
                          time.perf_counter() - t0, plan.meta, csv_path, json_path)
    with open(json_path, "w") as fh:
        json.dump(record_to_json(record), fh, indent=1, sort_keys=False)
        fh.write("\n")
    return record


def record_to_json(record: ResultRecord) -> dict:
    names = [n for n, _ in record.columns]
    return {
        "kind": record.kind,
        "name": record.name,
        "config_digest": record.digest,
        "tool_version": record.version,
        "wall_time_s": record.wall_time,
        "columns": [{"name": n, "unit": u} for n, u in record.columns],
        "rows": [{n: _jsonable(r.get(n)) for n in names} for r in record.rows],
        "verdicts": {"pass": record.n_pass, "fail": record.n_fail},
        "meta": {k: _jsonable(v) for k, v in record.meta.items()},
    }


def load_record(path: str) -> ResultRecord:
    """Read a JSON mirror back into a :class:`ResultRecord`."""
    with open(path) as fh:
        data = json.load(fh)
    cols = [(c["name"], c["unit"]) for c in data["columns"]]
    return ResultRecord(data["kind"], data["name"], data["config_digest"], data["tool_version"], cols,
                        data["rows"], data["wall_time_s"], data["meta"], json_path=path)
