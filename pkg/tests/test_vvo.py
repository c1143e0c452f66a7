from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from gridvvo import vvo
from gridvvo.acpf import kcl_residual
from gridvvo.caseio import DeviceConfig, load_network
from gridvvo.cases import matpower_data_dir
from gridvvo.nlp import Status, solve_nlp
from gridvvo.vvo import (
    ACOPF_OBJECTIVE,
    INF,
    DeviceSets,
    DeviceTreatment,
    EnumerationLimitError,
    ObjectiveConfig,
    ScenarioConfig,
    VvoModel,
    build_vvo,
    enumerate_oracle,
    round_devices,
    run_pipeline,
    scenario_sets,
    solve_reference_acopf,
    verify_state,
)

from conftest import two_bus


def _with_tap_position(net, pos):
    k = int(net.arrays.transformers[0])
    br = net.branches[k]
    grid = sorted(br.tap_set)
    branches = list(net.branches)
    branches[k] = dataclasses.replace(br, tap_ref=grid[16 + pos])
    return dataclasses.replace(net, branches=tuple(branches))


def test_tap_set_at_neutral_position(case4):
    sets = scenario_sets(case4, ScenarioConfig(tap_dev_steps=3))
    assert sets.tap[0] == pytest.approx((0.98125, 0.9875, 0.99375, 1.0, 1.00625, 1.0125, 1.01875))
    assert len(sets.tap[0]) == 7


def test_tap_set_clipped_at_grid_end(case4):
    sets = scenario_sets(_with_tap_position(case4, 15), ScenarioConfig(tap_dev_steps=3))
    assert len(sets.tap[0]) == 5
    assert max(sets.tap[0]) == pytest.approx(1.1)


def test_cb_set_restriction(case4):
    sets = scenario_sets(case4, ScenarioConfig(cb_max_modules=2))
    assert sets.cb[0] == (0.0, 0.1, 0.2)


def test_restriction_is_monotone(case118):
    prev = None
    for t in range(17):
        for c in range(4):
            sets = scenario_sets(case118, ScenarioConfig(tap_dev_steps=t, cb_max_modules=c))
            if c > 0:
                smaller = scenario_sets(case118, ScenarioConfig(tap_dev_steps=t, cb_max_modules=c - 1))
                assert all(set(a) <= set(b) for a, b in zip(smaller.cb, sets.cb))
            if prev is not None and c == 3:
                assert all(set(a) <= set(b) for a, b in zip(prev.tap, sets.tap))
        prev = scenario_sets(case118, ScenarioConfig(tap_dev_steps=t, cb_max_modules=3))


def test_round_devices_examples():
    sets = DeviceSets(((0.99375, 1.0, 1.00625),), ((0.0, 0.1, 0.2),))
    tap, cb = round_devices([1.00625], [0.149], sets, [1.0], [0.1])
    assert tap[0] == 1.00625 and cb[0] == 0.1
    _, cb = round_devices([1.0], [0.15], sets, [1.0], [0.1])
    assert cb[0] == 0.1
    _, cb = round_devices([1.0], [0.15], sets, [1.0], [0.2])
    assert cb[0] == 0.2
    tap, _ = round_devices([0.996875], [0.0], sets, [1.0], [0.0])
    assert tap[0] == 1.0


def test_objective_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(lambda_v=-1.0)
    with pytest.raises(ValueError):
        ObjectiveConfig(lambda_q=INF)
    assert ObjectiveConfig(lambda_p=INF).pins_dispatch
    with pytest.raises(ValueError):
        ScenarioConfig(tap_dev_steps=17)


def test_constraint_counts(case118):
    sets = scenario_sets(case118, ScenarioConfig())
    model = VvoModel(case118, ObjectiveConfig(), sets, DeviceTreatment.relaxed())
    a = case118.arrays
    n_angle = int(np.sum(np.isfinite(a.angle_min) | np.isfinite(a.angle_max)))
    n_thermal = int(np.sum(a.s_max > 0))
    assert model.n_eq == 2 * case118.n_bus + 1
    assert model.n_ineq == n_angle + 2 * n_thermal
    prob = model.problem()
    assert prob.n_eq == model.n_eq and prob.n_ineq == model.n_ineq


def test_pinned_dispatch_on_118(case118):
    sets = scenario_sets(case118, ScenarioConfig())
    model = VvoModel(case118, ObjectiveConfig(lambda_p=INF), sets, DeviceTreatment.relaxed())
    fixed = model.lower[model.i_pg] == model.upper[model.i_pg]
    assert int(fixed.sum()) == 53 and case118.n_gen == 54
    assert not fixed[model.slack_gen].any()


def test_fixed_devices_outside_sets_rejected(case4):
    sets = scenario_sets(case4, ScenarioConfig(tap_dev_steps=1))
    with pytest.raises(ValueError):
        VvoModel(case4, ObjectiveConfig(), sets, DeviceTreatment.fixed([1.05], [0.1]))


def test_model_derivatives_case4(case4):
    from gridvvo.nlp import check_derivatives

    ref = solve_reference_acopf(case4)
    sets = scenario_sets(ref.network, ScenarioConfig())
    for obj in (ObjectiveConfig(), ObjectiveConfig(lambda_p=INF), ObjectiveConfig(2.0, 0.5, 3.0, 0.1)):
        model = VvoModel(ref.network, obj, sets, DeviceTreatment.relaxed())
        x = model.pack(ref.state.replace(cb=ref.state.cb + 0.03))
        err, where = check_derivatives(model.problem(), x, hessian=True)
        assert err <= 1e-6, where


@pytest.mark.parametrize("name, published", [("case9", 5296.6862), ("case30", 576.8923), ("case118", 129660.6952)])
def test_reference_acopf_matches_published_optimum(name, published):
    """With continuous taps and no CB offset the model is plain ACOPF; compare with MATPOWER's optimum."""
    mp = matpower_data_dir()
    if mp is None:
        pytest.skip("MATPOWER case files not installed")
    exact = DeviceConfig(tap_step=1e-6, tap_positions=200000)
    ref = solve_reference_acopf(load_network(mp / f"{name}.m", exact))
    assert ref.solution.objective == pytest.approx(published, rel=1e-6)


def test_reduction_identity_from_different_start(case118, ref118):
    prob = build_vvo(case118, ACOPF_OBJECTIVE, vvo._reference_sets(case118), DeviceTreatment.reference(case118))
    model = VvoModel(case118, ACOPF_OBJECTIVE, vvo._reference_sets(case118), DeviceTreatment.reference(case118))
    x0 = model.pack(ref118.state.replace(vm=np.clip(np.asarray(ref118.state.vm) + 0.01, case118.arrays.vmin, case118.arrays.vmax)))
    sol = solve_nlp(prob, x0)
    assert sol.success
    assert sol.objective == pytest.approx(ref118.solution.objective, rel=1e-6)


def test_zero_load_reference_dispatch():
    ref = solve_reference_acopf(two_bus(pd=0.0))
    assert abs(ref.state.pg[0]) <= 1e-6


def test_verify_state_messages(case4):
    ref = solve_reference_acopf(case4)
    sets = scenario_sets(ref.network, ScenarioConfig())
    assert verify_state(ref.network, ref.state, sets) == []
    vm = np.array(ref.state.vm)
    vm[2] = 1.2
    assert any(m.startswith("bus 2: vm") for m in verify_state(ref.network, ref.state.replace(vm=vm)))
    tap = np.array(ref.state.tap)
    k = int(ref.network.arrays.transformers[0])
    tap[k] += 0.001
    msgs = verify_state(ref.network, ref.state.replace(tap=tap), sets)
    assert any(m.startswith(f"branch {k}: tap") for m in msgs)


@pytest.fixture(scope="module")
def pipeline118(case118, ref118):
    sc = ScenarioConfig(ObjectiveConfig(lambda_p=INF), 16, 3)
    return ref118, run_pipeline(ref118.network, sc, ref118.state)


def test_pipeline_result_invariants(pipeline118):
    ref, res = pipeline118
    net = ref.network
    assert res.success, res.solver_status
    sets = scenario_sets(net, res.scenario)
    a = net.arrays
    tap, cb = np.asarray(res.state.tap), np.asarray(res.state.cb)
    assert sets.contains(tap[a.transformers], cb[a.cb_shunts])
    assert np.max(np.abs(kcl_residual(net, res.state))) <= 1e-6
    assert verify_state(net, res.state, sets) == []
    non_slack = ~np.isin(a.gen_bus, [net.slack])
    assert np.all(np.asarray(res.state.pg)[non_slack] == a.p_ref[non_slack])


def test_pipeline_json_round_trip(pipeline118):
    import json

    _, res = pipeline118
    doc = json.loads(res.to_json())
    assert doc["status"] == "success" and doc["failed_stage"] is None
    assert doc["scenario"]["lambda_p"] == "inf"
    assert len(doc["state"]["vm"]) == 118


def _strip_cbs(net):
    shunts = tuple(
        dataclasses.replace(s, bs0=s.bs0 + s.b_ref, b_ref=0.0, cb_set=(0.0,), module_count=0) for s in net.shunts
    )
    return dataclasses.replace(net, shunts=shunts)


def test_no_freedom_scenario_reproduces_reference(case4):
    net = _strip_cbs(case4)
    ref = solve_reference_acopf(net)
    res = run_pipeline(ref.network, ScenarioConfig(ACOPF_OBJECTIVE, tap_dev_steps=0, cb_max_modules=0), ref.state)
    assert res.success
    assert res.objective == pytest.approx(ref.solution.objective, rel=1e-6)


@pytest.fixture(scope="module")
def enum4(case4):
    ref = solve_reference_acopf(case4)
    sc = ScenarioConfig(ObjectiveConfig(), tap_dev_steps=1, cb_max_modules=2)
    return ref, sc, run_pipeline(ref.network, sc, ref.state), enumerate_oracle(ref.network, sc, reference=ref.state)


def test_enumeration_counts_nine_combinations(enum4):
    *_, oracle = enum4
    assert len(oracle.records) == 9
    assert all(r["status"] == "locally-optimal" for r in oracle.records)


def test_pipeline_agrees_with_enumeration(enum4):
    _, _, res, oracle = enum4
    assert res.success
    same = oracle.objective_for(res.rounded_tap, res.rounded_cb)
    assert abs(res.objective - same) <= 1e-6 * abs(same)
    assert res.objective <= 1.05 * oracle.best_objective


def test_enumeration_limit(enum4):
    ref, sc, *_ = enum4
    with pytest.raises(EnumerationLimitError):
        enumerate_oracle(ref.network, sc, limit=8)


def _failing_solver(fail_on_call):
    calls = {"n": 0}

    def fake(problem, start, options=None, warm=None, **kw):
        calls["n"] += 1
        sol = solve_nlp(problem, start, options, warm, **kw)
        if calls["n"] in fail_on_call:
            return dataclasses.replace(sol, status=Status.INFEASIBLE)
        return sol

    return fake


def test_relaxed_stage_failure(monkeypatch, enum4):
    ref, sc, *_ = enum4
    monkeypatch.setattr(vvo, "solve_nlp", _failing_solver({1}))
    res = run_pipeline(ref.network, sc, ref.state)
    assert res.status == "no-solution-found" and res.stage == "relaxed"
    assert res.t_relax is not None and res.t_fixed is None


def test_fixed_stage_failure_keeps_relaxed_timing(monkeypatch, enum4):
    ref, sc, *_ = enum4
    monkeypatch.setattr(vvo, "solve_nlp", _failing_solver({2, 3}))
    res = run_pipeline(ref.network, sc, ref.state)
    assert res.status == "no-solution-found" and res.stage == "fixed"
    assert res.t_relax is not None and res.metrics is None


def test_fixed_stage_retries_without_duals(monkeypatch, enum4):
    ref, sc, *_ = enum4
    monkeypatch.setattr(vvo, "solve_nlp", _failing_solver({2}))
    assert run_pipeline(ref.network, sc, ref.state).success


def test_reference_failure_raises(monkeypatch, case4):
    monkeypatch.setattr(vvo, "solve_nlp", _failing_solver({1}))
    with pytest.raises(vvo.ReferenceInfeasibleError):
        solve_reference_acopf(case4)
