"""Volt/VAR optimisation model and the relax-round-resolve pipeline.

The model uses polar voltages, generator injections and (when relaxed)
continuous tap ratios and capacitor-bank susceptances as variables; branch
flows are eliminated and written directly into the bus power balance.
Variable order is ``[va, vm, pg, qg, tap, cb]`` where the last two blocks
exist only for relaxed devices.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .acpf import branch_terms, flows, kcl_residual
from .metrics import MetricsReport, compute_metrics
from .network import Network, OperatingState
from .nlp import NlpOptions, NlpProblem, NlpSolution, solve_nlp

log = logging.getLogger(__name__)

INF = math.inf
FEAS_TOL = 1e-6

RELAXED = "relaxed"
FIXED = "fixed"
SUCCESS = "success"
NO_SOLUTION = "no-solution-found"


class VvoError(RuntimeError):
    pass


class ReferenceInfeasibleError(VvoError):
    """The reference ACOPF solve did not reach a locally optimal point."""

    def __init__(self, solution: NlpSolution):
        super().__init__(f"reference ACOPF failed with status {solution.status.value}")
        self.solution = solution


class EnumerationLimitError(VvoError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights of the volt/VAR objective; ``lambda_p=INF`` pins non-slack dispatch."""

    lambda_v: float = 1.0
    lambda_q: float = 1.0
    lambda_p: float = 1.0
    lambda_c: float = 1.0
    v_ref: float | tuple[float, ...] = 1.0
    q_ref: float | tuple[float, ...] = 0.0

    def __post_init__(self):
        for name in ("lambda_v", "lambda_q", "lambda_p", "lambda_c"):
            w = getattr(self, name)
            if math.isnan(w) or w < 0:
                raise ValueError(f"{name} must be non-negative")
            if name != "lambda_p" and math.isinf(w):
                raise ValueError(f"{name} must be finite")

    @property
    def pins_dispatch(self) -> bool:
        return math.isinf(self.lambda_p)


@dataclass(frozen=True)
class ScenarioConfig:
    objective: ObjectiveConfig = ObjectiveConfig()
    tap_dev_steps: int = 16
    cb_max_modules: int = 3

    def __post_init__(self):
        if not 0 <= self.tap_dev_steps <= 16:
            raise ValueError("tap_dev_steps must lie in [0, 16]")
        if self.cb_max_modules < 0:
            raise ValueError("cb_max_modules must be non-negative")

    @property
    def label(self) -> dict[str, str]:
        lp = self.objective.lambda_p
        return {
            "lambda_p": "inf" if math.isinf(lp) else f"{lp:g}",
            "tap_range": f"+-{self.tap_dev_steps}",
            "cb_range": f"0-{self.cb_max_modules}",
        }

    def to_dict(self) -> dict[str, Any]:
        obj = self.objective
        return {
            "lambda_v": obj.lambda_v,
            "lambda_q": obj.lambda_q,
            "lambda_p": "inf" if obj.pins_dispatch else obj.lambda_p,
            "lambda_c": obj.lambda_c,
            "tap_dev_steps": self.tap_dev_steps,
            "cb_max_modules": self.cb_max_modules,
        }


@dataclass(frozen=True)
class DeviceSets:
    """Restricted discrete sets: one tuple per transformer and per CB shunt."""

    tap: tuple[tuple[float, ...], ...]
    cb: tuple[tuple[float, ...], ...]

    def combinations(self) -> int:
        return math.prod(len(s) for s in self.tap) * math.prod(len(s) for s in self.cb)

    def contains(self, tap, cb) -> bool:
        return all(float(t) in s for t, s in zip(tap, self.tap)) and all(
            float(b) in s for b, s in zip(cb, self.cb)
        )


@dataclass(frozen=True)
class DeviceTreatment:
    """Relaxed devices, or fixed values per transformer and per CB shunt."""

    mode: str = RELAXED
    tap: tuple[float, ...] = ()
    cb: tuple[float, ...] = ()

    @classmethod
    def relaxed(cls) -> "DeviceTreatment":
        return cls(RELAXED)

    @classmethod
    def fixed(cls, tap, cb) -> "DeviceTreatment":
        return cls(FIXED, tuple(float(t) for t in tap), tuple(float(b) for b in cb))

    @classmethod
    def reference(cls, network: Network) -> "DeviceTreatment":
        a = network.arrays
        return cls.fixed(a.tap_ref[a.transformers], a.b_ref[a.cb_shunts])


def scenario_sets(network: Network, scenario: ScenarioConfig) -> DeviceSets:
    """Device sets restricted to the scenario's tap deviation and CB module range."""
    taps = []
    for k in network.arrays.transformers:
        br = network.branches[k]
        grid = sorted(br.tap_set)
        ref = grid.index(br.tap_ref)
        lo, hi = max(0, ref - scenario.tap_dev_steps), ref + scenario.tap_dev_steps
        taps.append(tuple(t for t in grid[lo : hi + 1] if 0.9 - 1e-12 <= t <= 1.1 + 1e-12))
    cbs = []
    for k in network.arrays.cb_shunts:
        sh = network.shunts[k]
        cbs.append(tuple(sorted(sh.cb_set))[: min(scenario.cb_max_modules, sh.module_count) + 1])
    return DeviceSets(tuple(taps), tuple(cbs))


# -- model -------------------------------------------------------------------


class VvoModel:
    """Index bookkeeping and callbacks for one volt/VAR NLP instance."""

    def __init__(
        self,
        network: Network,
        objective: ObjectiveConfig,
        sets: DeviceSets,
        treatment: DeviceTreatment,
    ):
        a = network.arrays
        self.net, self.obj, self.sets, self.treatment = network, objective, sets, treatment
        nb, ng, nl = network.n_bus, network.n_gen, network.n_branch
        n_t, n_c = len(a.transformers), len(a.cb_shunts)
        if len(sets.tap) != n_t or len(sets.cb) != n_c:
            raise ValueError("device sets do not match the network")
        self.relaxed = treatment.mode == RELAXED
        if not self.relaxed:
            if treatment.mode != FIXED:
                raise ValueError(f"unknown device mode {treatment.mode!r}")
            if len(treatment.tap) != n_t or len(treatment.cb) != n_c:
                raise ValueError("fixed device values do not match the network")
            if not sets.contains(treatment.tap, treatment.cb):
                raise ValueError("fixed device values lie outside the restricted sets")
        if objective.pins_dispatch or objective.lambda_p > 0:
            if np.any(~np.isfinite(a.p_ref)):
                raise VvoError("reference setpoints missing")

        # variable layout
        self.i_va = np.arange(nb)
        self.i_vm = nb + np.arange(nb)
        self.i_pg = 2 * nb + np.arange(ng)
        self.i_qg = 2 * nb + ng + np.arange(ng)
        off = 2 * nb + 2 * ng
        self.n_tap_vars = n_t if self.relaxed else 0
        self.n_cb_vars = n_c if self.relaxed else 0
        self.i_tap = off + np.arange(self.n_tap_vars)
        self.i_cb = off + self.n_tap_vars + np.arange(self.n_cb_vars)
        self.n = off + self.n_tap_vars + self.n_cb_vars

        # constants for fixed devices
        self.tap_const = a.tap_ref.copy() * 0 + 1.0
        self.cb_const = np.zeros(len(network.shunts))
        if self.relaxed:
            self.tap_const[a.transformers] = a.tap_ref[a.transformers]
            self.cb_const[a.cb_shunts] = a.b_ref[a.cb_shunts]
        else:
            self.tap_const[a.transformers] = treatment.tap
            self.cb_const[a.cb_shunts] = treatment.cb
        # per-branch tap variable (or -1) and per-shunt cb variable (or -1)
        self.tap_var = -np.ones(nl, dtype=int)
        self.cb_var = -np.ones(len(network.shunts), dtype=int)
        if self.relaxed:
            self.tap_var[a.transformers] = self.i_tap
            self.cb_var[a.cb_shunts] = self.i_cb

        self.slack_gen = np.isin(a.gen_bus, [network.slack])
        self.v_ref = np.broadcast_to(np.asarray(objective.v_ref, dtype=float), (nb,))
        self.q_ref = np.broadcast_to(np.asarray(objective.q_ref, dtype=float), (ng,))
        self._bounds()
        self._structure()

    # -- layout ------------------------------------------------------------

    def _bounds(self):
        a = self.net.arrays
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        lo[self.i_vm], hi[self.i_vm] = a.vmin, a.vmax
        lo[self.i_pg], hi[self.i_pg] = a.pmin, a.pmax
        lo[self.i_qg], hi[self.i_qg] = a.qmin, a.qmax
        if self.obj.pins_dispatch:
            pinned = ~self.slack_gen
            lo[self.i_pg[pinned]] = a.p_ref[pinned]
            hi[self.i_pg[pinned]] = a.p_ref[pinned]
        self.pinned_pg = self.obj.pins_dispatch & ~self.slack_gen
        if self.relaxed:
            lo[self.i_tap] = [min(s) for s in self.sets.tap]
            hi[self.i_tap] = [max(s) for s in self.sets.tap]
            lo[self.i_cb] = [min(s) for s in self.sets.cb]
            hi[self.i_cb] = [max(s) for s in self.sets.cb]
        self.lower, self.upper = lo, hi

    def _structure(self):
        a, net = self.net.arrays, self.net
        nb, nl = net.n_bus, net.n_branch
        f, t = a.f_bus, a.t_bus
        # local slot -> global variable, per branch (tap slot may be -1)
        self.slot_var = np.column_stack([
            self.i_vm[f], self.i_vm[t], self.i_va[f], self.i_va[t], self.tap_var,
        ])
        self.slot_ok = self.slot_var >= 0

        # equality rows: 0 slack angle, 1..nb P balance, nb+1..2nb Q balance
        self.row_p = 1 + np.arange(nb)
        self.row_q = 1 + nb + np.arange(nb)
        self.n_eq = 1 + 2 * nb
        rows, cols = [np.array([0])], [np.array([self.i_va[net.slack]])]
        # branch blocks: Sf at from-bus rows, St at to-bus rows (P and Q)
        ok = self.slot_ok
        br = np.repeat(np.arange(nl)[:, None], 5, axis=1)[ok]
        self._flow_cols = self.slot_var[ok]
        self._flow_mask = ok
        for bus in (f, t):
            for base in (self.row_p, self.row_q):
                rows.append(base[bus][br])
                cols.append(self._flow_cols)
        # shunts: vm (P and Q) and cb (Q only)
        sh = a.sh_bus
        rows += [self.row_p[sh], self.row_q[sh]]
        cols += [self.i_vm[sh], self.i_vm[sh]]
        cbv = self.cb_var >= 0
        rows.append(self.row_q[sh[cbv]])
        cols.append(self.cb_var[cbv])
        # generators
        rows += [self.row_p[a.gen_bus], self.row_q[a.gen_bus]]
        cols += [self.i_pg, self.i_qg]
        self.eq_rows = np.concatenate(rows)
        self.eq_cols = np.concatenate(cols)

        # inequality rows: angle differences, then thermal limits (from, to)
        self.angle_br = np.flatnonzero(np.isfinite(a.angle_min) | np.isfinite(a.angle_max))
        self.thermal_br = np.flatnonzero(a.s_max > 0)
        na, nt = len(self.angle_br), len(self.thermal_br)
        self.n_ineq = na + 2 * nt
        ir = [np.repeat(np.arange(na), 2)]
        ic = [np.column_stack([self.i_va[f[self.angle_br]], self.i_va[t[self.angle_br]]]).ravel()]
        okt = ok[self.thermal_br]
        brt = np.repeat(np.arange(nt)[:, None], 5, axis=1)[okt]
        colt = self.slot_var[self.thermal_br][okt]
        ir += [na + brt, na + nt + brt]
        ic += [colt, colt]
        self.in_rows = np.concatenate(ir).astype(int)
        self.in_cols = np.concatenate(ic).astype(int)
        self.in_lower = np.concatenate([
            a.angle_min[self.angle_br], np.full(2 * nt, -np.inf)
        ])
        self.in_upper = np.concatenate([
            a.angle_max[self.angle_br], np.tile(a.s_max[self.thermal_br] ** 2, 2)
        ])

        # Hessian lower triangle: 15 slot pairs per branch, then diagonals
        pa, pb = np.triu_indices(5)
        self._pair_a, self._pair_b = pa, pb
        ga, gb = self.slot_var[:, pa], self.slot_var[:, pb]
        pair_ok = (ga >= 0) & (gb >= 0)
        self._pair_ok = pair_ok
        hr = [np.maximum(ga, gb)[pair_ok]]
        hc = [np.minimum(ga, gb)[pair_ok]]
        diag = np.concatenate([self.i_vm, self.i_pg, self.i_qg])
        hr.append(diag)
        hc.append(diag)
        hr.append(self.cb_var[cbv])  # cb x vm cross term
        hc.append(self.i_vm[sh[cbv]])
        self.h_rows = np.concatenate(hr)
        self.h_cols = np.concatenate(hc)
        self._n_pairs = int(pair_ok.sum())

    # -- state <-> vector ----------------------------------------------------

    def devices(self, x):
        tap = self.tap_const.copy()
        cb = self.cb_const.copy()
        if self.relaxed:
            a = self.net.arrays
            tap[a.transformers] = x[self.i_tap]
            cb[a.cb_shunts] = x[self.i_cb]
        return tap, cb

    def pack(self, state: OperatingState) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.i_va] = state.va
        x[self.i_vm] = state.vm
        x[self.i_pg] = state.pg
        x[self.i_qg] = state.qg
        if self.relaxed:
            a = self.net.arrays
            x[self.i_tap] = np.asarray(state.tap)[a.transformers]
            x[self.i_cb] = np.asarray(state.cb)[a.cb_shunts]
        return x

    def unpack(self, x) -> OperatingState:
        tap, cb = self.devices(x)
        vm, va = x[self.i_vm], x[self.i_va]
        Sf, St = flows(self.net, vm, va, tap)
        return OperatingState(
            vm=vm, va=va, pg=x[self.i_pg], qg=x[self.i_qg], tap=tap, cb=cb,
            pf=Sf.real, qf=Sf.imag, pt=St.real, qt=St.imag,
        )

    # -- callbacks -----------------------------------------------------------

    def objective(self, x) -> float:
        o, a = self.obj, self.net.arrays
        pg = x[self.i_pg]
        val = o.lambda_v * np.sum((x[self.i_vm] - self.v_ref) ** 2)
        val += o.lambda_q * np.sum((x[self.i_qg] - self.q_ref) ** 2)
        if not o.pins_dispatch and o.lambda_p:
            val += o.lambda_p * np.sum((pg - a.p_ref) ** 2)
        if o.lambda_c:
            # cost change from the reference dispatch; the reference cost is
            # carried as a constant offset
            c, d = a.cost, pg - a.p_ref
            val += o.lambda_c * np.sum(d * (c[:, 0] * (pg + a.p_ref) + c[:, 1]))
        return float(val)

    @property
    def objective_offset(self) -> float:
        a = self.net.arrays
        c = a.cost
        return float(self.obj.lambda_c * np.sum(c[:, 0] * a.p_ref**2 + c[:, 1] * a.p_ref + c[:, 2]))

    def gradient(self, x) -> np.ndarray:
        o, a = self.obj, self.net.arrays
        g = np.zeros(self.n)
        pg = x[self.i_pg]
        g[self.i_vm] = 2 * o.lambda_v * (x[self.i_vm] - self.v_ref)
        g[self.i_qg] = 2 * o.lambda_q * (x[self.i_qg] - self.q_ref)
        gp = np.zeros_like(pg)
        if not o.pins_dispatch and o.lambda_p:
            gp += 2 * o.lambda_p * (pg - a.p_ref)
        if o.lambda_c:
            gp += o.lambda_c * (2 * a.cost[:, 0] * pg + a.cost[:, 1])
        g[self.i_pg] = gp
        return g

    def _terms(self, x, order):
        tap, cb = self.devices(x)
        return branch_terms(self.net, x[self.i_vm], x[self.i_va], tap, order=order), tap, cb

    def eq_values(self, x) -> np.ndarray:
        tap, cb = self.devices(x)
        state = OperatingState(
            vm=x[self.i_vm], va=x[self.i_va], pg=x[self.i_pg], qg=x[self.i_qg], tap=tap, cb=cb
        )
        res = kcl_residual(self.net, state)
        return np.concatenate([[x[self.i_va[self.net.slack]]], res.real, res.imag])

    def eq_jacobian(self, x) -> np.ndarray:
        a = self.net.arrays
        (_, _, dSf, dSt), tap, cb = self._terms(x, 1)
        m = self._flow_mask
        vf, vt = -dSf[m], -dSt[m]
        vm = x[self.i_vm][a.sh_bus]
        ys_b = a.bs0 + cb
        cbv = self.cb_var >= 0
        ng = self.net.n_gen
        return np.concatenate([
            [1.0],
            vf.real, vf.imag, vt.real, vt.imag,
            -2 * a.gs * vm, 2 * ys_b * vm,
            vm[cbv] ** 2,
            np.ones(ng), np.ones(ng),
        ])

    def ineq_values(self, x) -> np.ndarray:
        a = self.net.arrays
        va = x[self.i_va]
        ang = va[a.f_bus[self.angle_br]] - va[a.t_bus[self.angle_br]]
        tap, _ = self.devices(x)
        Sf, St = flows(self.net, x[self.i_vm], va, tap)
        k = self.thermal_br
        return np.concatenate([ang, np.abs(Sf[k]) ** 2, np.abs(St[k]) ** 2])

    def ineq_jacobian(self, x) -> np.ndarray:
        (Sf, St, dSf, dSt), _, _ = self._terms(x, 1)
        k = self.thermal_br
        ok = self.slot_ok[k]
        jf = 2 * (Sf[k].real[:, None] * dSf[k].real + Sf[k].imag[:, None] * dSf[k].imag)
        jt = 2 * (St[k].real[:, None] * dSt[k].real + St[k].imag[:, None] * dSt[k].imag)
        ones = np.tile([1.0, -1.0], len(self.angle_br))
        return np.concatenate([ones, jf[ok], jt[ok]])

    def hessian(self, x, obj_factor, y_eq, y_ineq) -> np.ndarray:
        a, o, net = self.net.arrays, self.obj, self.net
        (Sf, St, dSf, dSt, d2Sf, d2St), tap, cb = self._terms(x, 2)
        yp, yq = y_eq[self.row_p], y_eq[self.row_q]
        wf = (yp - 1j * yq)[a.f_bus]
        wt = (yp - 1j * yq)[a.t_bus]
        H = -(wf[:, None, None] * d2Sf).real - (wt[:, None, None] * d2St).real
        na, nt = len(self.angle_br), len(self.thermal_br)
        if nt:
            k = self.thermal_br
            mf, mt = y_ineq[na : na + nt], y_ineq[na + nt :]
            for mu, S, dS, d2S in ((mf, Sf[k], dSf[k], d2Sf[k]), (mt, St[k], dSt[k], d2St[k])):
                outer = dS.real[:, :, None] * dS.real[:, None, :] + dS.imag[:, :, None] * dS.imag[:, None, :]
                curv = (np.conj(S)[:, None, None] * d2S).real
                H[k] += 2 * mu[:, None, None] * (curv + outer)
        pairs = H[:, self._pair_a, self._pair_b][self._pair_ok]

        nb, ng = net.n_bus, net.n_gen
        dv = np.full(nb, 2 * obj_factor * o.lambda_v)
        ys_g, ys_b = a.gs, a.bs0 + cb
        np.add.at(dv, a.sh_bus, -2 * ys_g * yp[a.sh_bus] + 2 * ys_b * yq[a.sh_bus])
        dp = np.zeros(ng)
        if not o.pins_dispatch and o.lambda_p:
            dp += 2 * o.lambda_p
        if o.lambda_c:
            dp += 2 * o.lambda_c * a.cost[:, 0]
        dp *= obj_factor
        dq = np.full(ng, 2 * obj_factor * o.lambda_q)
        cbv = self.cb_var >= 0
        vm = x[self.i_vm][a.sh_bus[cbv]]
        cross = 2 * vm * yq[a.sh_bus[cbv]]
        return np.concatenate([pairs, dv, dp, dq, cross])

    def problem(self) -> NlpProblem:
        return NlpProblem(
            n=self.n,
            x_lower=self.lower,
            x_upper=self.upper,
            objective=self.objective,
            gradient=self.gradient,
            n_eq=self.n_eq,
            eq_values=self.eq_values,
            eq_jacobian=self.eq_jacobian,
            eq_structure=(self.eq_rows, self.eq_cols),
            n_ineq=self.n_ineq,
            ineq_values=self.ineq_values,
            ineq_jacobian=self.ineq_jacobian,
            ineq_structure=(self.in_rows, self.in_cols),
            ineq_lower=self.in_lower,
            ineq_upper=self.in_upper,
            hessian=self.hessian,
            hess_structure=(self.h_rows, self.h_cols),
            objective_offset=self.objective_offset,
        )


def build_vvo(
    network: Network,
    objective: ObjectiveConfig,
    sets: DeviceSets,
    treatment: DeviceTreatment,
) -> NlpProblem:
    """Volt/VAR NLP for the given weights, device sets and device treatment."""
    return VvoModel(network, objective, sets, treatment).problem()


# -- state checks ------------------------------------------------------------


def verify_state(
    network: Network,
    state: OperatingState,
    sets: DeviceSets | None = None,
    tol: float = FEAS_TOL,
) -> list[str]:
    """Independent feasibility check of an operating state.

    Reports power-balance mismatch, bound violations beyond ``tol`` and, when
    ``sets`` is given, devices that are not exact members of their sets.
    """
    a = network.arrays
    out = []
    res = np.abs(kcl_residual(network, state))
    if res.max(initial=0.0) > tol:
        k = int(np.argmax(res))
        out.append(f"bus {k}: power mismatch {res[k]:.3e} p.u.")
    vm, va = np.asarray(state.vm), np.asarray(state.va)
    for k in np.flatnonzero((vm > a.vmax + tol) | (vm < a.vmin - tol)):
        out.append(f"bus {k}: vm {vm[k]:.6f} outside [{a.vmin[k]:.4f}, {a.vmax[k]:.4f}]")
    for name, val, lo, hi in (("pg", state.pg, a.pmin, a.pmax), ("qg", state.qg, a.qmin, a.qmax)):
        val = np.asarray(val)
        for k in np.flatnonzero((val > hi + tol) | (val < lo - tol)):
            out.append(f"generator {k}: {name} {val[k]:.6f} outside [{lo[k]:.4f}, {hi[k]:.4f}]")
    dth = va[a.f_bus] - va[a.t_bus]
    for k in np.flatnonzero((dth > a.angle_max + tol) | (dth < a.angle_min - tol)):
        out.append(f"branch {k}: angle difference {dth[k]:.6f} outside bounds")
    Sf, St = flows(network, vm, va, state.tap)
    lim = a.s_max > 0
    over = lim & (np.maximum(np.abs(Sf) ** 2, np.abs(St) ** 2) > a.s_max**2 + tol)
    for k in np.flatnonzero(over):
        out.append(f"branch {k}: flow exceeds thermal limit {a.s_max[k]:.4f}")
    tap, cb = np.asarray(state.tap), np.asarray(state.cb)
    lines = np.setdiff1d(np.arange(network.n_branch), a.transformers)
    for k in lines[tap[lines] != 1.0]:
        out.append(f"branch {k}: line tap {tap[k]} is not 1")
    if sets is not None:
        for k, allowed in zip(a.transformers, sets.tap):
            if float(tap[k]) not in allowed:
                out.append(f"branch {k}: tap {tap[k]} not in its discrete set")
        for k, allowed in zip(a.cb_shunts, sets.cb):
            if float(cb[k]) not in allowed:
                out.append(f"shunt {k} (bus {network.shunts[k].bus}): cb {cb[k]} not in its discrete set")
    return out


# -- reference ACOPF ---------------------------------------------------------


def _initial_state(network: Network) -> OperatingState:
    """Case-file voltages and dispatch, projected into the bounds."""
    a = network.arrays

    def clip(v, lo, hi):
        return np.minimum(np.maximum(v, np.where(np.isfinite(lo), lo, -np.inf)), hi)

    return OperatingState(
        vm=clip(np.array([b.vm0 for b in network.buses]), a.vmin, a.vmax),
        va=np.array([b.va0 for b in network.buses]),
        pg=clip(a.p_ref, a.pmin, a.pmax),
        qg=clip(a.q_ref, a.qmin, a.qmax),
        tap=a.tap_ref,
        cb=a.b_ref,
    )


def _reference_sets(network: Network) -> DeviceSets:
    a = network.arrays
    return DeviceSets(
        tuple((float(t),) for t in a.tap_ref[a.transformers]),
        tuple((float(b),) for b in a.b_ref[a.cb_shunts]),
    )


ACOPF_OBJECTIVE = ObjectiveConfig(lambda_v=0.0, lambda_q=0.0, lambda_p=0.0, lambda_c=1.0)


@dataclass
class ReferenceResult:
    network: Network
    state: OperatingState
    solution: NlpSolution


def solve_reference_acopf(
    network: Network,
    options: NlpOptions | None = None,
    start: OperatingState | None = None,
) -> ReferenceResult:
    """Cost-minimal AC dispatch at the reference devices.

    Returns the network with ``p_ref``/``q_ref`` overwritten by the optimal
    dispatch, the optimal state and the solver record.

    Raises:
        ReferenceInfeasibleError: the solve did not reach local optimality.
    """
    model = VvoModel(network, ACOPF_OBJECTIVE, _reference_sets(network), DeviceTreatment.reference(network))
    x0 = model.pack(start if start is not None else _initial_state(network))
    sol = solve_nlp(model.problem(), x0, options)
    if not sol.success:
        raise ReferenceInfeasibleError(sol)
    state = model.unpack(sol.x)
    return ReferenceResult(network.with_references(state.pg, state.qg), state, sol)


# -- rounding ----------------------------------------------------------------


def _round_one(value: float, allowed: Sequence[float], ref: float) -> float:
    dist = [abs(value - s) for s in allowed]
    best = min(dist)
    ties = [s for s, d in zip(allowed, dist) if d - best <= 1e-12]
    if len(ties) == 1:
        return float(ties[0])
    rd = [abs(s - ref) for s in ties]
    closest = min(rd)
    return float(min(s for s, d in zip(ties, rd) if d - closest <= 1e-12))


def round_devices(tap, cb, sets: DeviceSets, tap_ref, cb_ref) -> tuple[np.ndarray, np.ndarray]:
    """Nearest set member per device; midpoints go toward the reference, then down."""
    t = np.array([_round_one(v, s, r) for v, s, r in zip(tap, sets.tap, tap_ref)])
    b = np.array([_round_one(v, s, r) for v, s, r in zip(cb, sets.cb, cb_ref)])
    return t, b


# -- pipeline ----------------------------------------------------------------


@dataclass
class PipelineResult:
    status: str
    scenario: ScenarioConfig
    stage: str | None = None
    reference: OperatingState | None = None
    fractional_tap: np.ndarray | None = None
    fractional_cb: np.ndarray | None = None
    rounded_tap: np.ndarray | None = None
    rounded_cb: np.ndarray | None = None
    state: OperatingState | None = None
    objective: float | None = None
    metrics: MetricsReport | None = None
    t_relax: float | None = None
    t_fixed: float | None = None
    solver_status: dict[str, str] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == SUCCESS

    def to_dict(self) -> dict[str, Any]:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()

        return {
            "scenario": self.scenario.to_dict(),
            "status": self.status,
            "failed_stage": self.stage,
            "fractional": {"tap": arr(self.fractional_tap), "cb": arr(self.fractional_cb)},
            "rounded": {"tap": arr(self.rounded_tap), "cb": arr(self.rounded_cb)},
            "objective": self.objective,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "timings": {"t_relax_s": self.t_relax, "t_fixed_s": self.t_fixed},
            "solver_status": self.solver_status,
            "violations": self.violations,
            "state": None if self.state is None else self.state.to_dict(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _warm_duals(sol: NlpSolution, keep: np.ndarray) -> NlpSolution:
    """Multipliers of ``sol`` restricted to the variables in ``keep``."""
    return replace(sol, z_lower=sol.z_lower[keep], z_upper=sol.z_upper[keep])


def run_pipeline(
    network: Network,
    scenario: ScenarioConfig,
    reference: OperatingState | None = None,
    options: NlpOptions | None = None,
) -> PipelineResult:
    """Relax, round and resolve for one scenario.

    ``network`` must carry the reference dispatch in ``p_ref``/``q_ref``;
    ``reference`` is the matching reference state used as the starting
    point (a reference ACOPF is solved when it is omitted).
    """
    opts = options or NlpOptions()
    if reference is None:
        ref = solve_reference_acopf(network, opts)
        network, reference = ref.network, ref.state
    a = network.arrays
    sets = scenario_sets(network, scenario)
    result = PipelineResult(status=NO_SOLUTION, scenario=scenario, reference=reference)

    # relax
    relaxed = VvoModel(network, scenario.objective, sets, DeviceTreatment.relaxed())
    start = reference.replace(
        tap=np.where(np.isin(np.arange(network.n_branch), a.transformers), reference.tap, 1.0),
    )
    x0 = relaxed.pack(start)
    x0 = np.clip(x0, relaxed.lower, relaxed.upper)
    sol_r = solve_nlp(relaxed.problem(), x0, opts)
    result.t_relax = sol_r.wall_time
    result.solver_status["relaxed"] = sol_r.status.value
    if not sol_r.success:
        result.stage = "relaxed"
        return result
    frac_tap = sol_r.x[relaxed.i_tap]
    frac_cb = sol_r.x[relaxed.i_cb]
    result.fractional_tap, result.fractional_cb = frac_tap, frac_cb

    # round
    tap, cb = round_devices(frac_tap, frac_cb, sets, a.tap_ref[a.transformers], a.b_ref[a.cb_shunts])
    result.rounded_tap, result.rounded_cb = tap, cb

    # resolve
    fixed = VvoModel(network, scenario.objective, sets, DeviceTreatment.fixed(tap, cb))
    keep = np.arange(fixed.n)
    x1 = np.clip(sol_r.x[keep], fixed.lower, fixed.upper)
    sol_f = solve_nlp(fixed.problem(), x1, opts, warm=_warm_duals(sol_r, keep))
    if not sol_f.success:
        log.debug("warm resolve ended with %s; retrying from primal point only", sol_f.status.value)
        retry = solve_nlp(fixed.problem(), x1, opts)
        retry.wall_time += sol_f.wall_time
        sol_f = retry
    result.t_fixed = sol_f.wall_time
    result.solver_status["fixed"] = sol_f.status.value
    if not sol_f.success:
        result.stage = "fixed"
        return result

    state = fixed.unpack(sol_f.x)
    violations = verify_state(network, state, sets)
    result.state, result.objective = state, sol_f.objective
    if violations:
        result.stage = "physics-check"
        result.violations = violations
        return result
    result.status = SUCCESS
    result.metrics = compute_metrics(state, network, result.t_relax, result.t_fixed)
    return result


# -- brute-force oracle --------------------------------------------------------


@dataclass
class EnumerationResult:
    best_tap: np.ndarray | None
    best_cb: np.ndarray | None
    best_objective: float | None
    records: list[dict[str, Any]]

    def objective_for(self, tap, cb) -> float | None:
        key = (tuple(float(t) for t in tap), tuple(float(b) for b in cb))
        for rec in self.records:
            if (tuple(rec["tap"]), tuple(rec["cb"])) == key:
                return rec["objective"]
        return None


def enumerate_oracle(
    network: Network,
    scenario: ScenarioConfig,
    limit: int = 1000,
    reference: OperatingState | None = None,
    options: NlpOptions | None = None,
) -> EnumerationResult:
    """Solve the fixed-device problem for every discrete combination.

    Raises:
        EnumerationLimitError: more than ``limit`` combinations.
    """
    sets = scenario_sets(network, scenario)
    count = sets.combinations()
    if count > limit:
        raise EnumerationLimitError(f"{count} combinations exceed the limit of {limit}")
    if reference is None:
        reference = network.reference_state()
    best = (None, None, None)
    records = []
    for combo in itertools.product(*sets.tap, *sets.cb):
        tap = np.array(combo[: len(sets.tap)])
        cb = np.array(combo[len(sets.tap) :])
        model = VvoModel(network, scenario.objective, sets, DeviceTreatment.fixed(tap, cb))
        x0 = np.clip(model.pack(reference), model.lower, model.upper)
        sol = solve_nlp(model.problem(), x0, options)
        obj = sol.objective if sol.success else None
        records.append({"tap": tap.tolist(), "cb": cb.tolist(), "status": sol.status.value, "objective": obj})
        if obj is not None and (best[2] is None or obj < best[2]):
            best = (tap, cb, obj)
    return EnumerationResult(best[0], best[1], best[2], records)
