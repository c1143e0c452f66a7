"""AC power-flow physics and a Newton-Raphson power-flow solver.

Branch flows are written as sums of monomials

    k * vi**p * vj**q * t**r * exp(1j*s*(ai - aj))

in the local variables ``u = (vi, vj, ai, aj, t)``. For such a monomial the
gradient is ``M*g`` with ``g = (p/vi, q/vj, 1j*s, -1j*s, r/t)`` and the
Hessian is ``M*(g g^T - diag(p/vi**2, q/vj**2, 0, 0, r/t**2))``, which gives
exact first and second derivatives of every flow without symbolic code.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import Branch, Network, OperatingState, ShuntDevice

log = logging.getLogger(__name__)

# local variable slots of a branch
VI, VJ, AI, AJ, TAP = range(5)


class PowerFlowError(RuntimeError):
    pass


class NonConvergenceError(PowerFlowError):
    pass


class SingularJacobianError(PowerFlowError):
    def __init__(self, iteration: int):
        super().__init__(f"singular Jacobian at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class BranchAdmittance:
    Yff: complex
    Yft: complex
    Ytf: complex
    Ytt: complex


@dataclass(frozen=True)
class PfOptions:
    tol: float = 1e-10
    max_iter: int = 50
    flat_start: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")


def branch_admittance(branch: Branch, tap: float) -> BranchAdmittance:
    if tap <= 0:
        raise ValueError("tap ratio must be positive")
    return BranchAdmittance(
        branch.yff / tap**2, branch.yft / tap, branch.ytf / tap, branch.ytt
    )


def shunt_admittance(shunt: ShuntDevice, cb: float) -> complex:
    return complex(shunt.gs, shunt.bs0 + cb)


def branch_flows(branch: Branch, tap: float, Vi: complex, Vj: complex) -> tuple[complex, complex]:
    """Complex power entering the branch at each end."""
    Y = branch_admittance(branch, tap)
    Sf = Vi * np.conj(Y.Yff * Vi + Y.Yft * Vj)
    St = Vj * np.conj(Y.Ytf * Vi + Y.Ytt * Vj)
    return complex(Sf), complex(St)


# -- vectorised branch terms -------------------------------------------------


def _monomials(net: Network):
    """Coefficient and exponents (p, q, r, s) of the four flow monomials."""
    a = net.arrays
    sf = [(np.conj(a.yff), 2, 0, -2, 0), (np.conj(a.yft), 1, 1, -1, 1)]
    st = [(np.conj(a.ytt), 0, 2, 0, 0), (np.conj(a.ytf), 1, 1, -1, -1)]
    return sf, st


def branch_terms(net: Network, vm, va, tap, order: int = 1):
    """Flows and their derivatives in the local branch variables.

    Returns ``(Sf, St, dSf, dSt)`` and, for ``order=2``, also
    ``(d2Sf, d2St)``. First derivatives have shape ``(n_branch, 5)`` and
    second derivatives ``(n_branch, 5, 5)`` in slot order
    ``(vi, vj, ai, aj, t)``.
    """
    a = net.arrays
    vi, vj = vm[a.f_bus], vm[a.t_bus]
    dth = va[a.f_bus] - va[a.t_bus]
    tap = np.asarray(tap, dtype=float)
    out = []
    for terms in _monomials(net):
        S = np.zeros(len(vi), dtype=complex)
        dS = np.zeros((len(vi), 5), dtype=complex)
        d2S = np.zeros((len(vi), 5, 5), dtype=complex) if order >= 2 else None
        for k, p, q, r, s in terms:
            M = k * vi**p * vj**q * tap**r * np.exp(1j * s * dth)
            g = np.stack(
                [p / vi, q / vj, np.full_like(vi, 1j * s, dtype=complex),
                 np.full_like(vi, -1j * s, dtype=complex), r / tap],
                axis=1,
            )
            S += M
            dS += M[:, None] * g
            if order >= 2:
                curv = g[:, :, None] * g[:, None, :]
                curv[:, VI, VI] -= p / vi**2
                curv[:, VJ, VJ] -= q / vj**2
                curv[:, TAP, TAP] -= r / tap**2
                d2S += M[:, None, None] * curv
        out.append((S, dS, d2S))
    (Sf, dSf, d2Sf), (St, dSt, d2St) = out
    if order >= 2:
        return Sf, St, dSf, dSt, d2Sf, d2St
    return Sf, St, dSf, dSt


def flows(net: Network, vm, va, tap) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised branch flows ``(Sf, St)`` for all branches."""
    a = net.arrays
    V = np.asarray(vm) * np.exp(1j * np.asarray(va))
    tap = np.asarray(tap, dtype=float)
    Vi, Vj = V[a.f_bus], V[a.t_bus]
    Sf = Vi * np.conj(a.yff / tap**2 * Vi + a.yft / tap * Vj)
    St = Vj * np.conj(a.ytf / tap * Vi + a.ytt * Vj)
    return Sf, St


def with_flows(net: Network, state: OperatingState) -> OperatingState:
    Sf, St = flows(net, state.vm, state.va, state.tap)
    return state.replace(pf=Sf.real, qf=Sf.imag, pt=St.real, qt=St.imag)


def shunt_injection(net: Network, vm, cb) -> np.ndarray:
    """Per-bus ``conj(ys) * |V|**2`` summed over the shunts at each bus."""
    a = net.arrays
    out = np.zeros(net.n_bus, dtype=complex)
    if len(a.sh_bus):
        ys = a.gs + 1j * (a.bs0 + np.asarray(cb, dtype=float))
        np.add.at(out, a.sh_bus, np.conj(ys) * np.asarray(vm)[a.sh_bus] ** 2)
    return out


def kcl_residual(net: Network, state: OperatingState) -> np.ndarray:
    """Complex power mismatch per bus; flows are recomputed, not read from state."""
    a = net.arrays
    vm = np.asarray(state.vm)
    if len(vm) != net.n_bus or len(state.pg) != net.n_gen or len(state.tap) != net.n_branch:
        raise ValueError("state dimensions do not match the network")
    Sf, St = flows(net, vm, state.va, state.tap)
    res = -(a.pd + 1j * a.qd) - shunt_injection(net, vm, state.cb)
    np.add.at(res, a.gen_bus, np.asarray(state.pg) + 1j * np.asarray(state.qg))
    np.subtract.at(res, a.f_bus, Sf)
    np.subtract.at(res, a.t_bus, St)
    return res


def residual_csv(residual: np.ndarray) -> str:
    lines = ["bus,re,im"]
    lines += [f"{k},{r.real:.12g},{r.imag:.12g}" for k, r in enumerate(residual)]
    return "\n".join(lines) + "\n"


# -- Newton-Raphson power flow ----------------------------------------------


def _balance_jacobian(net: Network, vm, va, tap, cb):
    """Sparse d(balance)/d(va) and d(balance)/d(vm), both complex (n_bus x n_bus)."""
    a = net.arrays
    n = net.n_bus
    _, _, dSf, dSt = branch_terms(net, vm, va, tap)
    rows, cols_v, dva, dvm = [], [], [], []
    for bus_side, dS in ((a.f_bus, dSf), (a.t_bus, dSt)):
        for slot_v, slot_a, other in ((VI, AI, a.f_bus), (VJ, AJ, a.t_bus)):
            rows.append(bus_side)
            cols_v.append(other)
            dvm.append(-dS[:, slot_v])
            dva.append(-dS[:, slot_a])
    r = np.concatenate(rows)
    c = np.concatenate(cols_v)
    Jva = sp.coo_matrix((np.concatenate(dva), (r, c)), shape=(n, n)).tocsr()
    Jvm = sp.coo_matrix((np.concatenate(dvm), (r, c)), shape=(n, n)).tocsr()
    if len(a.sh_bus):
        ys = a.gs + 1j * (a.bs0 + np.asarray(cb, dtype=float))
        d = np.zeros(n, dtype=complex)
        np.add.at(d, a.sh_bus, -2.0 * np.conj(ys) * np.asarray(vm)[a.sh_bus])
        Jvm = Jvm + sp.diags(d)
    return Jva, Jvm


def solve_power_flow(
    net: Network,
    tap,
    cb,
    pg,
    vm_set,
    options: PfOptions = PfOptions(),
    va0=None,
) -> OperatingState:
    """Solve the AC power flow for fixed devices and generator setpoints.

    Buses hosting a generator are PV (voltage from ``vm_set``); the slack bus
    balances active power. Reactive limits are not enforced. On success the
    returned state carries flows and satisfies ``max|kcl_residual| <= tol``.

    Raises:
        NonConvergenceError: mismatch above ``tol`` after ``max_iter`` steps.
        SingularJacobianError: the Newton system could not be factorised.
    """
    a = net.arrays
    n = net.n_bus
    slack = net.slack
    tap = np.asarray(tap, dtype=float)
    cb = np.asarray(cb, dtype=float)
    pg = np.asarray(pg, dtype=float)

    has_gen = np.zeros(n, dtype=bool)
    has_gen[a.gen_bus] = True
    pv = has_gen.copy()
    pv[slack] = False
    pq = ~has_gen
    pq[slack] = False
    non_slack = np.flatnonzero(np.arange(n) != slack)
    pq_idx = np.flatnonzero(pq)

    if options.flat_start:
        vm = np.ones(n)
        va = np.zeros(n)
    else:
        vm = np.ones(n) if vm_set is None else np.asarray(vm_set, dtype=float).copy()
        va = np.zeros(n) if va0 is None else np.asarray(va0, dtype=float).copy()
    if vm_set is not None:
        vset = np.asarray(vm_set, dtype=float)
        vm[has_gen] = vset[has_gen]

    sched = -(a.pd + 1j * a.qd)
    np.add.at(sched, a.gen_bus, pg + 0j)

    def mismatch(vm, va):
        Sf, St = flows(net, vm, va, tap)
        res = sched - shunt_injection(net, vm, cb)
        np.subtract.at(res, a.f_bus, Sf)
        np.subtract.at(res, a.t_bus, St)
        return res

    def reduced(res):
        return np.concatenate([res.real[non_slack], res.imag[pq_idx]])

    res = mismatch(vm, va)
    it = 0
    while True:
        F = reduced(res)
        err = np.max(np.abs(F)) if len(F) else 0.0
        log.debug("pf iter %d mismatch %.3e", it, err)
        if err <= options.tol:
            break
        if it >= options.max_iter or not np.isfinite(err):
            raise NonConvergenceError(
                f"power flow did not converge after {it} iterations (mismatch {err:.3e})"
            )
        it += 1
        Jva, Jvm = _balance_jacobian(net, vm, va, tap, cb)
        J = sp.vstack([
            sp.hstack([Jva.real[non_slack][:, non_slack], Jvm.real[non_slack][:, pq_idx]]),
            sp.hstack([Jva.imag[pq_idx][:, non_slack], Jvm.imag[pq_idx][:, pq_idx]]),
        ]).tocsc()
        try:
            dx = spla.splu(J).solve(-F)
        except RuntimeError:
            raise SingularJacobianError(it) from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError(it)
        va[non_slack] += dx[: len(non_slack)]
        vm[pq_idx] += dx[len(non_slack) :]
        res = mismatch(vm, va)

    # generator injections that close the balance
    pg_out = pg.copy()
    qg_out = np.zeros(net.n_gen)
    gens_at = net.adjacency["gens"]
    for bus in np.flatnonzero(has_gen):
        gens = gens_at[bus]
        q_extra = -res[bus].imag
        for g in gens:
            qg_out[g] = q_extra / len(gens)
        if bus == slack:
            p_extra = -res[bus].real
            for g in gens:
                pg_out[g] += p_extra / len(gens)
    state = OperatingState(vm=vm, va=va, pg=pg_out, qg=qg_out, tap=tap, cb=cb)
    return with_flows(net, state)
