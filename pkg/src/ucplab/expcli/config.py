"""Experiment configuration: TOML text to a validated :class:`ExperimentConfig`.

Validation collects every problem before failing, so a config with three
typos reports all three.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..discretization import Domain
from ..potentials import (CATALOG_NAMES, Potential, PowerSingularity, Sum, catalog, constant, cosine, lp_exponent,
                          zero)

KINDS = ("ucp", "ghost", "carleman-nrt", "carleman-lr", "control", "wegner", "ils", "lifting", "constants")
SECTIONS = ("domain", "potential", "ensemble", "params", "sweep", "tolerances", "calibration")


class ConfigError(ValueError):
    """Raised with every validation message collected."""

    def __init__(self, errors: list[str], warnings: list[str] | None = None):
        self.errors = list(errors)
        self.warnings = list(warnings or [])
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


# --- field checkers ----------------------------------------------------------------


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _float(x):
    if not _is_num(x):
        raise TypeError("expected a finite number")
    return float(x)


def _pos(x):
    x = _float(x)
    if x <= 0:
        raise ValueError("must be positive")
    return x


def _nonneg(x):
    x = _float(x)
    if x < 0:
        raise ValueError("must be nonnegative")
    return x


def _int(x):
    if not isinstance(x, int) or isinstance(x, bool):
        raise TypeError("expected an integer")
    return int(x)


def _posint(x):
    x = _int(x)
    if x <= 0:
        raise ValueError("must be a positive integer")
    return x


def _str(x):
    if not isinstance(x, str):
        raise TypeError("expected a string")
    return x


def _bool(x):
    if not isinstance(x, bool):
        raise TypeError("expected true or false")
    return x


def _list(item: Callable) -> Callable:
    def check(x):
        if not isinstance(x, list):
            raise TypeError("expected a list")
        if not x:
            raise ValueError("list must not be empty")
        return [item(v) for v in x]
    return check


def _one_of(*choices) -> Callable:
    def check(x):
        if x not in choices:
            raise ValueError(f"must be one of {', '.join(map(repr, choices))}")
        return x
    return check


def _bc(x):
    if isinstance(x, str):
        return x
    return _list(_str)(x)


def _int_or_list(x):
    return [_posint(x)] if isinstance(x, int) and not isinstance(x, bool) else _list(_posint)(x)


REQ = object()


@dataclass(frozen=True)
class Key:
    check: Callable
    default: Any = None
    doc: str = ""


DOMAIN_KEYS = {
    "lengths": Key(_list(_pos), None, "box side lengths, one per axis (alternative to intervals)"),
    "intervals": Key(_list(_list(_float)), None, "per-axis [a, b] pairs"),
    "bc": Key(_bc, REQ, "D, N or P, one tag or one per axis"),
    "points": Key(_int_or_list, REQ, "grid points per axis"),
}

ENSEMBLE_KEYS = {
    "d": Key(_posint, 1),
    "nodes_per_unit": Key(_posint, 8),
    "delta": Key(_pos, 0.25),
    "shape": Key(_one_of("plateau", "singular"), "plateau"),
    "floor": Key(_nonneg, 0.0),
    "amplitude": Key(_pos, 1.0),
    "bc": Key(_one_of("D", "N", "P"), "D"),
}

SWEEP_POTENTIALS = Key(_list(_one_of(*CATALOG_NAMES)), None, "catalog potential names, one run per name")

# per-kind schema: section -> key -> Key
SCHEMAS: dict[str, dict[str, dict[str, Key]]] = {
    "ucp": {
        "domain": DOMAIN_KEYS,
        "params": {
            "G": Key(_pos, 1.0),
            "placement": Key(_one_of("center", "seeded-random"), "center"),
            "mode": Key(_one_of("random-mix", "single"), "random-mix"),
            "k": Key(_posint, 1),
            "weight": Key(_pos, 1.0),
        },
        "sweep": {
            "delta_over_G": Key(_list(_pos), REQ),
            "E": Key(_list(_float), REQ),
            "seeds": Key(_list(_int), [0]),
            "potentials": SWEEP_POTENTIALS,
        },
        "calibration": {"N": Key(_pos, None)},
    },
    "ghost": {
        "domain": DOMAIN_KEYS,
        "params": {
            "n_t": Key(_posint, 33),
            "n_probe": Key(_posint, 100),
            "mode": Key(_one_of("random-mix", "single"), "random-mix"),
        },
        "sweep": {
            "E": Key(_list(_float), REQ),
            "tau": Key(_list(_pos), REQ),
            "seeds": Key(_list(_int), [0]),
            "potentials": SWEEP_POTENTIALS,
        },
        "tolerances": {"pde_residual": Key(_pos, 1e-8)},
    },
    "carleman-nrt": {
        "params": {
            "rho": Key(_pos, 0.3),
            "d": Key(_one_of(1, 2), 1),
            "n": Key(_posint, 128),
            "sigma": Key(_pos, 0.1),
        },
        "sweep": {
            "alpha": Key(_list(_pos), REQ),
            "seeds": Key(_list(_int), list(range(10))),
            "potentials": SWEEP_POTENTIALS,
        },
        "calibration": {"alpha0_tilde": Key(_pos, None), "C0_tilde": Key(_pos, None)},
        "tolerances": {"factor": Key(_pos, 2.0), "refinement": Key(_pos, 0.05)},
    },
    "carleman-lr": {
        "params": {
            "rho": Key(_pos, 0.5),
            "d": Key(_one_of(1, 2), 1),
            "n": Key(_posint, 128),
        },
        "sweep": {
            "beta": Key(_list(_pos), REQ),
            "seeds": Key(_list(_int), list(range(10))),
            "potentials": SWEEP_POTENTIALS,
        },
        "calibration": {"beta0_tilde": Key(_pos, None), "C1_tilde": Key(_pos, None)},
        "tolerances": {"factor": Key(_pos, 2.0), "refinement": Key(_pos, 0.05)},
    },
    "control": {
        "domain": DOMAIN_KEYS,
        "params": {
            "G": Key(_pos, 1.0),
            "m": Key(_posint, 12),
            "n_time": Key(_posint, 256),
            "u0_seed": Key(_int, 0),
        },
        "sweep": {
            "delta_over_G": Key(_list(_pos), REQ),
            "T": Key(_list(_pos), REQ),
            "potentials": SWEEP_POTENTIALS,
        },
        "calibration": {"K": Key(_pos, None)},
        "tolerances": {"residual": Key(_pos, 1e-6)},
    },
    "wegner": {
        "ensemble": ENSEMBLE_KEYS,
        "params": {"E": Key(_float, REQ), "E0": Key(_float, REQ), "M": Key(_posint, 400)},
        "sweep": {"epsilon": Key(_list(_pos), REQ), "L": Key(_list(_posint), REQ)},
        "tolerances": {"r2": Key(_pos, 0.9)},
    },
    "ils": {
        "ensemble": ENSEMBLE_KEYS,
        "params": {
            "b": Key(_float, None),
            "center_energy": Key(_float, None),
            "alpha": Key(_pos, 0.5),
            "q": Key(_pos, 1.0),
            "M": Key(_posint, 200),
            "require_gap": Key(_bool, True),
        },
        "sweep": {"L": Key(_list(_posint), REQ)},
    },
    "lifting": {
        "ensemble": ENSEMBLE_KEYS,
        "params": {"L": Key(_posint, 16), "sample": Key(_int, 0), "E0": Key(_float, REQ)},
        "sweep": {"epsilon": Key(_list(_nonneg), REQ), "k": Key(_list(_posint), REQ)},
    },
    "constants": {
        "domain": DOMAIN_KEYS,
        "params": {
            "lambda2_points": Key(_posint, 101),
            "weight": Key(_pos, 1.0),
            "n_check": Key(_posint, 100),
        },
        "sweep": {"potentials": Key(_list(_one_of(*CATALOG_NAMES)), list(CATALOG_NAMES))},
    },
}

TOP_KEYS = {
    "kind": Key(_one_of(*KINDS), REQ),
    "name": Key(_str, None),
    "seed": Key(_int, 0),
    "output": Key(_str, "results"),
}

POTENTIAL_KINDS = ("zero", "constant", "cosine", "power", "sum", "catalog")
POTENTIAL_KEYS = {
    "zero": set(),
    "constant": {"value"},
    "cosine": {"amplitude", "wavenumbers", "offset"},
    "power": {"center", "gamma", "cap", "amplitude"},
    "sum": {"terms"},
    "catalog": {"name", "gamma"},
}


@dataclass
class ExperimentConfig:
    kind: str
    name: str
    seed: int
    output: str
    digest: str
    domain: dict = field(default_factory=dict)
    potential: dict | None = None
    ensemble: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def build_domain(self) -> Domain:
        return domain_from_spec(self.domain)

    def points(self) -> list[int]:
        pts = self.domain["points"]
        dim = self.build_domain().dim
        return pts * dim if len(pts) == 1 else pts

    def potentials(self, domain: Domain) -> list[tuple[str, Potential]]:
        """``(id, potential)`` pairs: the sweep's catalog names, else the single declared potential."""
        names = self.sweep.get("potentials")
        if names:
            cat = catalog(domain)
            return [(n, cat[n]) for n in names]
        spec = self.potential or {"kind": "zero"}
        return [(potential_id(spec), potential_from_spec(spec, domain))]


def domain_from_spec(spec: dict) -> Domain:
    bc = spec["bc"]
    if spec.get("intervals") is not None:
        intervals = [tuple(iv) for iv in spec["intervals"]]
        return Domain(tuple(intervals), tuple([bc] * len(intervals)) if isinstance(bc, str) else tuple(bc))
    return Domain.box(spec["lengths"], bc)


def potential_id(spec: dict) -> str:
    kind = spec.get("kind", "zero")
    if kind == "catalog":
        return spec["name"]
    if kind == "constant":
        return f"constant({spec.get('value', 0.0):g})"
    if kind == "sum":
        return "+".join(potential_id(t) for t in spec.get("terms", []))
    return kind


def potential_from_spec(spec: dict, domain: Domain) -> Potential:
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return zero()
    if kind == "constant":
        return constant(spec.get("value", 0.0))
    if kind == "cosine":
        return cosine(spec.get("amplitude", 1.0), spec.get("wavenumbers", [1.0] * domain.dim), spec.get("offset", 0.0))
    if kind == "power":
        centre = spec.get("center", [(a + b) / 2 for a, b in domain.intervals])
        cap = spec.get("cap", 1e6)
        return PowerSingularity(centre, spec["gamma"], cap=cap, amplitude=spec.get("amplitude", 1.0))
    if kind == "sum":
        return Sum([potential_from_spec(t, domain) for t in spec["terms"]])
    if kind == "catalog":
        return catalog(domain, spec.get("gamma", 0.4))[spec["name"]]
    raise ValueError(f"unknown potential kind {kind!r}")


def _check_potential(spec, path: str, errors: list[str], dim: int | None) -> None:
    if not isinstance(spec, dict):
        errors.append(f"{path}: expected a table")
        return
    kind = spec.get("kind")
    if kind not in POTENTIAL_KINDS:
        errors.append(f"{path}.kind: must be one of {', '.join(POTENTIAL_KINDS)} (got {kind!r})")
        return
    for k in spec:
        if k != "kind" and k not in POTENTIAL_KEYS[kind]:
            errors.append(f"{path}.{k}: unknown key for potential kind {kind!r}")
    for k in ("value", "amplitude", "offset", "gamma", "cap"):
        if k in spec and not _is_num(spec[k]):
            errors.append(f"{path}.{k}: expected a finite number")
    if kind == "power":
        if "gamma" not in spec:
            errors.append(f"{path}.gamma: required for a power singularity")
        elif _is_num(spec["gamma"]) and dim is not None and lp_exponent(spec["gamma"], dim) is None:
            errors.append(f"{path}.gamma: |x|^-{spec['gamma']} is not admissible in dimension {dim}")
    if kind == "catalog":
        if spec.get("name") not in CATALOG_NAMES:
            errors.append(f"{path}.name: must be one of {', '.join(CATALOG_NAMES)}")
    if kind == "sum":
        terms = spec.get("terms")
        if not isinstance(terms, list) or not terms:
            errors.append(f"{path}.terms: expected a non-empty array of potential tables")
        else:
            for i, t in enumerate(terms):
                _check_potential(t, f"{path}.terms[{i}]", errors, dim)


def _validate_section(raw: dict, schema: dict[str, Key], path: str, errors: list[str], unknown: list[str]) -> dict:
    out = {}
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected a table")
        return out
    for k in raw:
        if k not in schema:
            unknown.append(f"{path}.{k}: unknown key (allowed: {', '.join(sorted(schema)) or 'none'})")
    for k, spec in schema.items():
        if k in raw:
            try:
                out[k] = spec.check(raw[k])
            except (TypeError, ValueError) as exc:
                errors.append(f"{path}.{k}: {exc}")
        elif spec.default is REQ:
            errors.append(f"{path}.{k}: required key is missing")
        else:
            out[k] = spec.default
    return out


def config_digest(data: bytes, seed_override: int | None = None) -> str:
    h = hashlib.sha256(data)
    if seed_override is not None:
        h.update(f"\nseed-override={seed_override}".encode())
    return h.hexdigest()


def parse_config(text: str | bytes, strict: bool = True, seed_override: int | None = None) -> ExperimentConfig:
    """Parse and validate; raise :class:`ConfigError` listing every problem.

    With ``strict=False`` unknown keys become warnings instead of errors.
    """
    data = text.encode() if isinstance(text, str) else bytes(text)
    try:
        raw = tomllib.loads(data.decode())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from None
    errors: list[str] = []
    unknown: list[str] = []

    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    head = _validate_section(top, TOP_KEYS, "config", errors, unknown)
    kind = head.get("kind")
    if kind is None:
        raise ConfigError(errors + (unknown if strict else []), [] if strict else unknown)
    schema = SCHEMAS[kind]

    sections = {}
    for sec in SECTIONS:
        if sec == "potential":
            continue
        if sec in schema:
            sections[sec] = _validate_section(raw.get(sec, {}), schema[sec], sec, errors, unknown)
        elif sec in raw:
            unknown.append(f"{sec}: section not used by kind {kind!r}")

    dim = None
    if "domain" in schema and not any(e.startswith("domain.") for e in errors):
        dom = sections["domain"]
        if (dom.get("lengths") is None) == (dom.get("intervals") is None):
            errors.append("domain: give exactly one of lengths or intervals")
        else:
            try:
                d = domain_from_spec(dom)
                dim = d.dim
                if len(dom["points"]) not in (1, dim):
                    errors.append(f"domain.points: expected 1 or {dim} entries, got {len(dom['points'])}")
                if any(p < 3 for p in dom["points"]):
                    errors.append("domain.points: at least 3 points per axis")
            except ValueError as exc:
                errors.append(f"domain: {exc}")
    if kind.startswith("carleman"):
        dim = sections["params"].get("d")

    potential = raw.get("potential")
    if potential is not None:
        if kind in ("wegner", "ils", "lifting", "constants"):
            unknown.append(f"potential: section not used by kind {kind!r}")
            potential = None
        else:
            _check_potential(potential, "potential", errors, dim)
            if sections.get("sweep", {}).get("potentials"):
                errors.append("potential: give either a [potential] table or sweep.potentials, not both")

    _kind_checks(kind, sections, errors)

    if strict:
        errors.extend(unknown)
    if errors:
        raise ConfigError(errors, [] if strict else unknown)
    return ExperimentConfig(
        kind=kind, name=head.get("name") or kind, seed=head["seed"] if seed_override is None else int(seed_override),
        output=head["output"], digest=config_digest(data, seed_override), potential=potential,
        warnings=[] if strict else unknown, **sections,
    )


def _kind_checks(kind: str, s: dict, errors: list[str]) -> None:
    p, sw, cal = s.get("params", {}), s.get("sweep", {}), s.get("calibration", {})
    if "delta_over_G" in sw and sw["delta_over_G"]:
        bad = [r for r in sw["delta_over_G"] if not 0 < r < 0.5]
        if bad:
            errors.append(f"sweep.delta_over_G: values {bad} violate delta < G/2 "
                          "(each ball must fit inside its lattice cell)")
    if kind == "carleman-lr" and p.get("rho") is not None and not 0 < p["rho"] < 2 - math.sqrt(2):
        errors.append(f"params.rho: {p['rho']} outside (0, 2 - sqrt(2)) required by the half-space weight")
    if kind.startswith("carleman") and p.get("n") is not None and p["n"] < 64:
        errors.append("params.n: at least 64 points per axis")
    if kind.startswith("carleman") and sum(v is not None for v in cal.values()) == 1:
        errors.append("calibration: give both baseline constants or neither")
    if kind == "ils":
        if (p.get("b") is None) == (p.get("center_energy") is None):
            errors.append("params: give exactly one of b or center_energy")
        if p.get("alpha") is not None and not 0 < p["alpha"] < 1:
            errors.append("params.alpha: must lie in (0, 1)")
    if kind in ("wegner", "ils") and p.get("M") is not None and p["M"] < 50:
        errors.append("params.M: at least 50 samples")
    if kind == "wegner" and all(p.get(k) is not None for k in ("E", "E0")) and sw.get("epsilon"):
        if p["E"] + 3 * max(sw["epsilon"]) > p["E0"]:
            errors.append("params: E + 3 max(epsilon) must not exceed E0")
    if kind == "ghost" and p.get("n_t") is not None and (p["n_t"] < 9 or p["n_t"] % 2 == 0):
        errors.append("params.n_t: must be odd and at least 9")


def load_config(path, strict: bool = True, seed_override: int | None = None) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read(), strict=strict, seed_override=seed_override)
