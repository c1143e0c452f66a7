"""Volt/VAR quality metrics and result-table rendering.

Voltage metrics stay in per-unit; reactive and active power metrics are
reported in MVAr / MW (per-unit times the system MVA base).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .network import Network, OperatingState

COLUMNS = (
    "case",
    "lambda_p",
    "tap_range",
    "cb_range",
    "mae_v",
    "mae_q",
    "t_relax_s",
    "t_fixed_s",
    "delta_pg_mw",
    "pct_delta_cost",
    "losses_mw",
    "status",
)


class ZeroReferenceCostError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    mae_v: float
    mae_q: float
    delta_pg: float
    pct_delta_cost: float
    losses: float
    t_relax: float | None = None
    t_fixed: float | None = None

    def __post_init__(self):
        for name in ("mae_v", "mae_q", "delta_pg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict[str, float | None]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsReport":
        return cls(**data)


def mae_v(state: OperatingState) -> float:
    """Mean absolute deviation of bus voltage magnitudes from 1 p.u."""
    return float(np.mean(np.abs(np.asarray(state.vm) - 1.0)))


def mae_q(state: OperatingState, network: Network) -> float:
    """Mean absolute reactive generation in MVAr."""
    qg = np.asarray(state.qg)
    if qg.size == 0:
        return 0.0
    return float(np.mean(np.abs(qg)) * network.base_mva)


def delta_pg(state: OperatingState, network: Network) -> float:
    """Mean absolute deviation from the reference active dispatch in MW."""
    pg = np.asarray(state.pg)
    if pg.size == 0:
        return 0.0
    return float(np.mean(np.abs(pg - network.arrays.p_ref)) * network.base_mva)


def generation_cost(pg, network: Network) -> float:
    c = network.arrays.cost
    pg = np.asarray(pg, dtype=float)
    return float(np.sum(c[:, 0] * pg**2 + c[:, 1] * pg + c[:, 2]))


def pct_delta_cost(state: OperatingState, network: Network) -> float:
    """Relative generation-cost change against the reference dispatch, in percent.

    Raises:
        ZeroReferenceCostError: the reference dispatch costs nothing.
    """
    ref = generation_cost(network.arrays.p_ref, network)
    if ref == 0.0:
        raise ZeroReferenceCostError("reference generation cost is zero")
    return 100.0 * (generation_cost(state.pg, network) - ref) / ref


def losses(state: OperatingState, network: Network) -> float:
    """Total branch losses in MW, from flows recomputed at the state's voltages."""
    from .acpf import flows

    Sf, St = flows(network, state.vm, state.va, state.tap)
    return float(np.sum(Sf.real + St.real) * network.base_mva)


def compute_metrics(
    state: OperatingState,
    network: Network,
    t_relax: float | None = None,
    t_fixed: float | None = None,
) -> MetricsReport:
    return MetricsReport(
        mae_v=mae_v(state),
        mae_q=mae_q(state, network),
        delta_pg=delta_pg(state, network),
        pct_delta_cost=pct_delta_cost(state, network),
        losses=losses(state, network),
        t_relax=t_relax,
        t_fixed=t_fixed,
    )


# -- tables ------------------------------------------------------------------


@dataclass(frozen=True)
class TableRow:
    """One scenario cell: labels plus metrics, or the stage at which it failed."""

    case: str
    lambda_p: str
    tap_range: str
    cb_range: str
    metrics: MetricsReport | None
    status: str = "success"
    failed_stage: str | None = None
    t_relax: float | None = None
    is_baseline: bool = False

    def values(self) -> dict[str, Any]:
        m = self.metrics
        ok = m is not None and self.status == "success"
        t_relax = m.t_relax if m is not None else self.t_relax
        return {
            "case": self.case,
            "lambda_p": self.lambda_p,
            "tap_range": self.tap_range,
            "cb_range": self.cb_range,
            "mae_v": m.mae_v if ok else None,
            "mae_q": m.mae_q if ok else None,
            "t_relax_s": t_relax,
            "t_fixed_s": m.t_fixed if ok else None,
            "delta_pg_mw": m.delta_pg if ok else None,
            "pct_delta_cost": m.pct_delta_cost if ok else None,
            "losses_mw": m.losses if ok else None,
            "status": self.status if self.failed_stage is None else f"{self.status}@{self.failed_stage}",
        }


_DIGITS = {
    "mae_v": 3,
    "mae_q": 2,
    "t_relax_s": 2,
    "t_fixed_s": 2,
    "delta_pg_mw": 2,
    "pct_delta_cost": 2,
    "losses_mw": 2,
}


def _fmt(key: str, value: Any, text: bool) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    if isinstance(value, float):
        return f"{value:.{_DIGITS.get(key, 6)}f}" if text else repr(value)
    return str(value)


def _ordered(rows: Iterable[TableRow]) -> list[TableRow]:
    rows = list(rows)
    return [r for r in rows if r.is_baseline] + [r for r in rows if not r.is_baseline]


def render_table(rows: Sequence[TableRow], fmt: str = "text", include_timings: bool = True) -> str:
    """Render scenario rows as ``text``, ``csv`` or ``json``; the baseline row comes first.

    With ``include_timings=False`` the timing columns are blanked so reports
    of identical runs compare byte-for-byte.
    """
    ordered = _ordered(rows)
    records = [r.values() for r in ordered]
    if not include_timings:
        for rec in records:
            rec["t_relax_s"] = rec["t_fixed_s"] = None
    if fmt == "json":
        return json.dumps({"columns": list(COLUMNS), "rows": records}, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            writer.writerow([_fmt(k, rec[k], text=False) for k in COLUMNS])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown table format {fmt!r}")
    cells = [list(COLUMNS)] + [[_fmt(k, rec[k], text=True) for k in COLUMNS] for rec in records]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    notes = [
        f"* {r.case} lambda_p={r.lambda_p} taps {r.tap_range} cbs {r.cb_range}: failed at {r.failed_stage} stage"
        for r in ordered
        if r.failed_stage is not None
    ]
    return "\n".join(lines + notes) + "\n"
