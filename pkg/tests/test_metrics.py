from __future__ import annotations

import json

import numpy as np
import pytest

from gridvvo.acpf import solve_power_flow
from gridvvo.metrics import (
    COLUMNS,
    MetricsReport,
    TableRow,
    ZeroReferenceCostError,
    compute_metrics,
    delta_pg,
    losses,
    mae_q,
    mae_v,
    pct_delta_cost,
    render_table,
)
from gridvvo.network import Generator, OperatingState

from conftest import two_bus


def _state(vm=(1.0, 1.0), pg=(1.0,), qg=(0.0,)):
    return OperatingState(vm=vm, va=[0.0] * len(vm), pg=pg, qg=qg, tap=[1.0], cb=[])


def _gens(net, n, p_ref=0.5, cost=(0.0, 10.0, 0.0)):
    gens = tuple(Generator(0, 0.0, 2.0, -1.0, 1.0, cost, p_ref=p_ref) for _ in range(n))
    import dataclasses

    return dataclasses.replace(net, generators=gens)


def test_mae_v_examples():
    assert mae_v(_state()) == 0.0
    assert mae_v(_state(vm=(0.98, 1.02))) == pytest.approx(0.02)


def test_mae_q_examples():
    net = _gens(two_bus(), 2)
    assert mae_q(_state(qg=(0.0, 0.0), pg=(0.5, 0.5)), net) == 0.0
    assert mae_q(_state(qg=(0.1, -0.3), pg=(0.5, 0.5)), net) == pytest.approx(20.0)


def test_delta_pg_examples():
    net = _gens(two_bus(), 54)
    pg = np.full(54, 0.5)
    assert delta_pg(_state(pg=pg, qg=np.zeros(54)), net) == 0.0
    pg[7] += 0.54
    assert delta_pg(_state(pg=pg, qg=np.zeros(54)), net) == pytest.approx(1.0)


def test_pct_delta_cost_examples():
    net = _gens(two_bus(), 2, p_ref=0.5)
    assert pct_delta_cost(_state(pg=(0.5, 0.5), qg=(0, 0)), net) == 0.0
    assert pct_delta_cost(_state(pg=(0.25, 0.25), qg=(0, 0)), net) == pytest.approx(-50.0)


def test_zero_reference_cost():
    net = _gens(two_bus(), 1, cost=(0.0, 0.0, 0.0))
    with pytest.raises(ZeroReferenceCostError):
        pct_delta_cost(_state(), net)


def test_reordering_invariance():
    rng = np.random.default_rng(1)
    net = _gens(two_bus(), 6)
    pg, qg = rng.uniform(0, 1, 6), rng.uniform(-1, 1, 6)
    perm = rng.permutation(6)
    s, sp = _state(pg=pg, qg=qg), _state(pg=pg[perm], qg=qg[perm])
    assert mae_q(s, net) == pytest.approx(mae_q(sp, net), rel=1e-15)
    assert delta_pg(s, net) == pytest.approx(delta_pg(sp, net), rel=1e-15)


def test_reference_state_has_zero_cost_change(ref118):
    assert pct_delta_cost(ref118.state, ref118.network) == 0.0


def test_lossless_network_has_no_losses():
    net = two_bus()
    state = solve_power_flow(net, [1.0], [], [0.0], [1.0, 1.0])
    assert abs(losses(state, net)) <= 1e-10


def test_losses_two_ways():
    net = two_bus(r=0.01)
    state = solve_power_flow(net, [1.0], [], [0.0], [1.0, 1.0])
    via_gen = (np.sum(state.pg) - net.arrays.pd.sum()) * net.base_mva
    assert losses(state, net) == pytest.approx(via_gen, abs=1e-8 * net.base_mva)
    # i^2 r on the single branch
    V1, V2 = state.vm[0], state.vm[1] * np.exp(1j * state.va[1])
    i = abs((V1 - V2) / complex(0.01, 0.1))
    assert losses(state, net) == pytest.approx(i**2 * 0.01 * net.base_mva, rel=1e-10)
    assert losses(state, net) > 0


def test_metrics_survive_serialisation(ref118):
    net, state = ref118.network, ref118.state
    before = compute_metrics(state, net)
    after = compute_metrics(OperatingState.from_dict(json.loads(json.dumps(state.to_dict()))), net)
    assert before == after
    assert MetricsReport.from_dict(json.loads(json.dumps(before.to_dict()))) == before


def test_report_rejects_negative_values():
    with pytest.raises(ValueError):
        MetricsReport(-0.1, 0.0, 0.0, 0.0, 0.0)


def _row(lp="1", failed=None, baseline=False):
    m = MetricsReport(0.0371, 33.26, 0.25, -0.06, 76.5, 1.2, 0.8)
    if failed:
        return TableRow("c", lp, "+-3", "0-2", None, "no-solution-found", failed, t_relax=10.7)
    return TableRow("c", lp, "+-0" if baseline else "+-3", "1-1" if baseline else "0-2", m, is_baseline=baseline)


def test_empty_table_is_header_only():
    for fmt in ("text", "csv"):
        assert render_table([], fmt).strip().splitlines()[0].split()[0].split(",")[0] == "case"
        assert len(render_table([], fmt).strip().splitlines()) == 1
    assert json.loads(render_table([], "json"))["rows"] == []


def test_failed_row_shows_na_and_relaxed_time():
    csv_lines = render_table([_row(failed="fixed")], "csv").splitlines()
    values = dict(zip(COLUMNS, csv_lines[1].split(",")))
    assert values["mae_v"] == values["mae_q"] == values["t_fixed_s"] == "NA"
    assert values["t_relax_s"] == "10.7"
    assert values["status"] == "no-solution-found@fixed"
    assert "failed at fixed stage" in render_table([_row(failed="fixed")], "text")


def test_full_grid_table_has_ten_rows_baseline_first():
    rows = [_row(lp) for lp in ("1", "5", "inf") for _ in range(3)] + [_row("--", baseline=True)]
    lines = render_table(rows, "csv").strip().splitlines()
    assert lines[0].split(",") == list(COLUMNS)
    assert len(lines) == 11
    assert lines[1].split(",")[1] == "--"


def test_timings_can_be_blanked():
    text = render_table([_row()], "csv", include_timings=False)
    values = dict(zip(COLUMNS, text.splitlines()[1].split(",")))
    assert values["t_relax_s"] == values["t_fixed_s"] == "NA"
