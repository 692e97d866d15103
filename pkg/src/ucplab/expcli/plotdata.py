"""Tab-separated long-format series extracted from result records.

One observation per line, ready for gnuplot or a spreadsheet.  Every input
record must be of the same kind.
"""

from __future__ import annotations

from typing import Iterable, TextIO

from .runner import ResultRecord, fmt

SERIES: dict[str, list[str]] = {
    "ucp": ["potential", "E", "seed", "delta_over_G", "observed", "predicted"],
    "ghost": ["potential", "E", "tau", "seed", "h1_lower", "h1_norm", "h1_upper"],
    "carleman-nrt": ["potential", "seed", "alpha", "ratio", "fitted_constant", "threshold"],
    "carleman-lr": ["potential", "seed", "beta", "ratio", "fitted_constant", "threshold"],
    "control": ["potential", "delta_over_G", "T", "worst_case_cost", "bound"],
    "wegner": ["epsilon", "L", "mean", "stderr", "fit"],
    "ils": ["L", "p_empty", "stderr", "target"],
    "lifting": ["k", "epsilon", "lift", "lower_bound", "upper_bound"],
    "constants": ["potential", "lambda1", "lambda2", "analytic_lambda2"],
}


def _rows(record: ResultRecord) -> Iterable[dict]:
    if record.kind == "wegner":
        C, tau, d = (record.meta.get(k) for k in ("C", "tau_w", "d"))
        for r in record.rows:
            if r.get("statistic") != "mean_count":
                continue
            eps, L = r["epsilon_or_b"], r["L"]
            fit = None if C is None else C * eps**tau * L**d
            yield {"epsilon": eps, "L": L, "mean": r["value"], "stderr": r["stderr"], "fit": fit}
    elif record.kind == "ils":
        target = record.meta.get("target", {})
        for r in record.rows:
            if r.get("statistic") == "p_empty":
                yield {"L": r["L"], "p_empty": r["value"], "stderr": r["stderr"], "target": target.get(str(r["L"]))}
    elif record.kind in ("ucp", "ghost"):
        yield from (r for r in record.rows if r.get("status") != "empty subspace")
    else:
        yield from record.rows


def emit_plotdata(records: list[ResultRecord], out: TextIO) -> int:
    """Write the series of ``records`` to ``out``; returns the number of data lines."""
    if not records:
        raise ValueError("no result records given")
    kinds = {r.kind for r in records}
    if len(kinds) > 1:
        raise ValueError(f"records mix kinds {sorted(kinds)}; pass one kind at a time")
    cols = SERIES[records[0].kind]
    multi = len(records) > 1
    out.write("\t".join((["run"] if multi else []) + cols) + "\n")
    n = 0
    for rec in records:
        for row in _rows(rec):
            out.write("\t".join(([rec.name] if multi else []) + [fmt(row.get(c)) for c in cols]) + "\n")
            n += 1
    return n
