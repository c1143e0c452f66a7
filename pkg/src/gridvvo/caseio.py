"""MATPOWER case reading and conversion to a :class:`~gridvvo.network.Network`.

The parser understands the subset of MATLAB syntax used by MATPOWER/PGLib
case files: scalar and matrix assignments to ``mpc.<field>``, ``%``
comments, and ``;``/newline row separators. Cell arrays and other unknown
fields are skipped with a warning.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Branch, Bus, Generator, Network, ShuntDevice, module_levels

log = logging.getLogger(__name__)

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VA, BASE_KV, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 7, 8, 9, 11, 12
GEN_BUS, PG, QG, QMAX, QMIN, GEN_STATUS, PMAX, PMIN = 0, 1, 2, 3, 4, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A = range(6)
TAP, SHIFT, BR_STATUS, ANGMIN, ANGMAX = 8, 9, 10, 11, 12

REF = 3
ISOLATED = 4


class CaseError(ValueError):
    """Malformed or unsupported case data."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnsupportedCostError(CaseError):
    pass


class DisconnectedNetworkError(CaseError):
    pass


class SlackBusError(CaseError):
    pass


@dataclass
class RawCase:
    """Numeric tables of a MATPOWER case, read verbatim."""

    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: np.ndarray
    name: str = ""
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class DeviceConfig:
    cb_module_step: float = 0.1
    cb_module_count: int = 3
    cb_ref_modules: int = 1
    tap_step: float = 0.00625
    tap_positions: int = 16
    tap_neutral: float = 1.0

    def __post_init__(self):
        if self.tap_step <= 0 or self.cb_module_step <= 0:
            raise ValueError("tap_step and cb_module_step must be positive")
        if not 0 <= self.cb_ref_modules <= self.cb_module_count:
            raise ValueError("cb_ref_modules must lie in [0, cb_module_count]")

    @property
    def tap_grid(self) -> tuple[float, ...]:
        """All admissible tap ratios, ordered from position -N to +N."""
        n = self.tap_positions
        return tuple(
            round(self.tap_neutral * (1.0 + k * self.tap_step), 12) for k in range(-n, n + 1)
        )


_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_MANDATORY = ("bus", "gen", "branch", "gencost")


def _strip_comment(line: str) -> str:
    quote = False
    for i, ch in enumerate(line):
        if ch == "'":
            quote = not quote
        elif ch == "%" and not quote:
            return line[:i]
    return line


def _parse_rows(body: list[tuple[int, str]], name: str) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    for lineno, text in body:
        for chunk in text.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                row = [float(tok) for tok in tokens]
            except ValueError:
                bad = next(t for t in tokens if not _is_number(t))
                raise CaseSyntaxError(f"non-numeric cell {bad!r} in mpc.{name}", lineno) from None
            if width is not None and len(row) != width:
                raise CaseSyntaxError(
                    f"row of length {len(row)} in mpc.{name}, expected {width}", lineno
                )
            width = len(row)
            rows.append(row)
    return np.array(rows, dtype=float).reshape(len(rows), width or 0)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_matpower(text: str, name: str = "") -> RawCase:
    """Parse MATPOWER case text.

    Raises:
        CaseSyntaxError: malformed assignment or non-numeric matrix cell.
        CaseError: a mandatory table is missing.
        UnsupportedCostError: piecewise-linear generator costs.
    """
    lines = text.splitlines()
    tables: dict[str, np.ndarray] = {}
    base_mva = None
    warnings: list[str] = []
    i = 0
    while i < len(lines):
        lineno = i + 1
        line = _strip_comment(lines[i]).strip()
        i += 1
        m = _ASSIGN.match(line)
        if not m:
            continue
        key, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("[") or rhs.startswith("{"):
            close = "]" if rhs[0] == "[" else "}"
            body = [(lineno, rhs[1:])]
            while close not in body[-1][1]:
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated mpc.{key}", lineno)
                body.append((i + 1, _strip_comment(lines[i])))
                i += 1
            last_no, last = body[-1]
            body[-1] = (last_no, last[: last.index(close)])
            if close == "}" or key not in ("bus", "gen", "branch", "gencost"):
                warnings.append(f"ignored field mpc.{key}")
                continue
            tables[key] = _parse_rows(body, key)
        elif key == "baseMVA":
            try:
                base_mva = float(rhs.rstrip(";").strip())
            except ValueError:
                raise CaseSyntaxError(f"bad baseMVA value {rhs!r}", lineno) from None
        elif key != "version":
            warnings.append(f"ignored field mpc.{key}")

    if base_mva is None:
        raise CaseError("missing mpc.baseMVA")
    for key in _MANDATORY:
        if key not in tables:
            raise CaseError(f"missing mandatory table mpc.{key}")

    gencost = tables["gencost"]
    if gencost.size and np.any(gencost[:, 0] == 1):
        raise UnsupportedCostError("piecewise-linear generator costs (MATPOWER cost model 1) are not supported")
    n_gen = len(tables["gen"])
    if len(gencost) not in (n_gen, 2 * n_gen):
        raise CaseError(f"gencost has {len(gencost)} rows for {n_gen} generators")
    if len(gencost) == 2 * n_gen:
        warnings.append("ignored reactive-power rows of mpc.gencost")
        gencost = gencost[:n_gen]

    known = set(tables["bus"][:, BUS_I].astype(int))
    for key, cols in (("gen", [GEN_BUS]), ("branch", [F_BUS, T_BUS])):
        for c in cols:
            missing = set(tables[key][:, c].astype(int)) - known
            if missing:
                raise CaseError(f"mpc.{key} references unknown buses {sorted(missing)[:5]}")

    for w in warnings:
        log.warning("%s: %s", name or "case", w)
    return RawCase(base_mva, tables["bus"], tables["gen"], tables["branch"], gencost, name, warnings)


def read_case(path: str | Path) -> RawCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def snap_tap(ratio: float, config: DeviceConfig = DeviceConfig()) -> tuple[int, float]:
    """Nearest admissible tap position and ratio; ties go toward position 0."""
    if ratio <= 0:
        raise ValueError("tap ratio must be positive")
    n = config.tap_positions
    x = (ratio / config.tap_neutral - 1.0) / config.tap_step
    lo = math.floor(x)
    best = None
    for k in (lo, lo + 1):
        k = min(max(k, -n), n)
        grid = config.tap_neutral * (1.0 + k * config.tap_step)
        key = (abs(grid - ratio), abs(k))
        if best is None or key < best[0]:
            best = (key, k)
    k = best[1]
    return k, config.tap_grid[k + n]


def _cost_triplet(row: np.ndarray, base_mva: float, gen_no: int) -> tuple[float, float, float]:
    ncost = int(row[3])
    coeffs = list(row[4 : 4 + ncost])
    while len(coeffs) > 3 and coeffs[0] == 0.0:
        coeffs.pop(0)
    if len(coeffs) > 3:
        raise UnsupportedCostError(f"generator {gen_no}: cost polynomial of degree > 2")
    coeffs = [0.0] * (3 - len(coeffs)) + coeffs
    c2, c1, c0 = coeffs
    if c2 < 0:
        raise UnsupportedCostError(f"generator {gen_no}: negative quadratic cost")
    return (c2 * base_mva**2, c1 * base_mva, c0)


def _angle_bound(deg: float, sign: int) -> float:
    if deg == 0 or abs(deg) >= 360:
        return sign * math.inf
    return math.radians(deg)


def build_network(case: RawCase, config: DeviceConfig = DeviceConfig()) -> Network:
    """Pre-process a raw case and attach the discrete device model.

    Out-of-service branches and generators and isolated (type 4) buses are
    dropped, buses are renumbered densely, generator costs are rescaled to a
    per-unit argument, transformers get the full tap grid and every bus with
    a nonzero shunt susceptance gets a capacitor bank with one module active
    at the reference point.

    Raises:
        SlackBusError: zero or several type-3 buses.
        DisconnectedNetworkError: the in-service branch graph is not connected.
    """
    base = case.base_mva
    bus_tab = case.bus[case.bus[:, BUS_TYPE] != ISOLATED]
    index = {int(b): k for k, b in enumerate(bus_tab[:, BUS_I])}

    slack_rows = np.flatnonzero(bus_tab[:, BUS_TYPE] == REF)
    if len(slack_rows) != 1:
        raise SlackBusError(f"expected one slack bus, found {len(slack_rows)}")

    buses = tuple(
        Bus(
            id=k,
            base_kv=float(row[BASE_KV]),
            vmin=float(row[VMIN]),
            vmax=float(row[VMAX]),
            pd=float(row[PD]) / base,
            qd=float(row[QD]) / base,
            is_slack=bool(row[BUS_TYPE] == REF),
            vm0=float(row[VM]) if row[VM] > 0 else 1.0,
            va0=math.radians(float(row[VA] - bus_tab[slack_rows[0], VA])),
        )
        for k, row in enumerate(bus_tab)
    )

    gens = []
    for g, (row, cost_row) in enumerate(zip(case.gen, case.gencost)):
        if row[GEN_STATUS] <= 0 or int(row[GEN_BUS]) not in index:
            continue
        gens.append(
            Generator(
                bus=index[int(row[GEN_BUS])],
                pmin=float(row[PMIN]) / base,
                pmax=float(row[PMAX]) / base,
                qmin=float(row[QMIN]) / base,
                qmax=float(row[QMAX]) / base,
                cost=_cost_triplet(cost_row, base, g),
                p_ref=float(row[PG]) / base,
                q_ref=float(row[QG]) / base,
            )
        )

    grid = config.tap_grid
    kv = {int(r[BUS_I]): float(r[BASE_KV]) for r in bus_tab}
    branches = []
    for row in case.branch:
        f, t = int(row[F_BUS]), int(row[T_BUS])
        if row[BR_STATUS] <= 0 or f not in index or t not in index:
            continue
        ratio, shift = float(row[TAP]), float(row[SHIFT])
        is_tsfm = ratio not in (0.0, 1.0) or shift != 0.0 or kv[f] != kv[t]
        ys = 1.0 / complex(row[BR_R], row[BR_X])
        ych = 0.5j * float(row[BR_B])
        rot = complex(math.cos(math.radians(shift)), math.sin(math.radians(shift)))
        if is_tsfm:
            _, tap_ref = snap_tap(ratio if ratio != 0.0 else 1.0, config)
            tap_set = grid
        else:
            tap_ref, tap_set = 1.0, (1.0,)
        branches.append(
            Branch(
                from_bus=index[f],
                to_bus=index[t],
                yff=ys + ych,
                yft=-ys * rot,
                ytf=-ys / rot,
                ytt=ys + ych,
                tap_ref=tap_ref,
                tap_set=tap_set,
                s_max=float(row[RATE_A]) / base,
                angle_min=_angle_bound(float(row[ANGMIN]), -1),
                angle_max=_angle_bound(float(row[ANGMAX]), +1),
                is_transformer=is_tsfm,
            )
        )

    levels = module_levels(config.cb_module_step, config.cb_module_count)
    b_ref = levels[config.cb_ref_modules]
    shunts = []
    for k, row in enumerate(bus_tab):
        gs, bs = float(row[GS]) / base, float(row[BS]) / base
        if bs != 0.0:
            shunts.append(
                ShuntDevice(
                    bus=k,
                    gs=gs,
                    bs0=bs - b_ref,
                    module_step=config.cb_module_step,
                    module_count=config.cb_module_count,
                    b_ref=b_ref,
                    cb_set=levels,
                )
            )
        elif gs != 0.0:
            shunts.append(ShuntDevice(bus=k, gs=gs, bs0=0.0))

    net = Network(buses, tuple(gens), tuple(branches), tuple(shunts), base, name=case.name)
    if not branches or not net.is_connected():
        raise DisconnectedNetworkError("in-service branches do not connect all buses")
    return net


def load_network(path: str | Path, config: DeviceConfig = DeviceConfig()) -> Network:
    """Read a MATPOWER file and build the network in one call."""
    return build_network(read_case(path), config)


def case_statistics(net: Network) -> dict[str, int]:
    """Counts in the layout of the benchmark case-statistics table."""
    return {
        "buses": net.n_bus,
        "gen": net.n_gen,
        "cbs": sum(1 for s in net.shunts if s.has_cb),
        "lines": net.n_branch,
        "tsfm": sum(1 for b in net.branches if b.is_transformer),
    }
