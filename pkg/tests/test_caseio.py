from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridvvo.caseio import (
    CaseError,
    CaseSyntaxError,
    DeviceConfig,
    DisconnectedNetworkError,
    SlackBusError,
    UnsupportedCostError,
    build_network,
    case_statistics,
    load_network,
    parse_matpower,
    snap_tap,
)
from gridvvo.cases import bundled_case

TWO_BUS = """function mpc = two
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	230	1	1.1	0.9;
	2	1	90	30	0	{bs}	1	1	-5	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	250	250	250	{ratio}	0	{status}	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.11	5	150;
];
"""


def two_bus_text(bs=0, ratio=0, status=1):
    return TWO_BUS.format(bs=bs, ratio=ratio, status=status)


def test_minimal_case_parses():
    raw = parse_matpower(two_bus_text())
    assert raw.bus.shape[0] == 2 and raw.branch.shape[0] == 1
    assert raw.base_mva == 100.0


def test_missing_gencost_is_error():
    text = two_bus_text().split("mpc.gencost")[0]
    with pytest.raises(CaseError, match="gencost"):
        parse_matpower(text)


def test_non_numeric_cell_reports_line():
    text = two_bus_text().replace("90\t30", "90\tabc")
    with pytest.raises(CaseSyntaxError) as info:
        parse_matpower(text)
    assert info.value.line == 6


def test_piecewise_linear_cost_rejected():
    text = two_bus_text().replace("2\t0\t0\t3\t0.11", "1\t0\t0\t2\t0.11")
    with pytest.raises(UnsupportedCostError):
        parse_matpower(text)


def test_unknown_field_warns(caplog):
    text = two_bus_text() + "mpc.bus_name = {\n 'a';\n 'b';\n};\n"
    with caplog.at_level(logging.WARNING):
        raw = parse_matpower(text, name="two")
    assert "ignored field mpc.bus_name" in raw.warnings
    assert "bus_name" in caplog.text


def test_costs_rescaled_to_per_unit():
    net = build_network(parse_matpower(two_bus_text()))
    c2, c1, c0 = net.generators[0].cost
    assert (c2, c1, c0) == pytest.approx((0.11 * 100**2, 5 * 100, 150))
    # cost at 50 MW agrees in both unit systems
    assert net.generators[0].cost_value(0.5) == pytest.approx(0.11 * 50**2 + 5 * 50 + 150)


@pytest.mark.parametrize(
    "ratio, expected",
    [(1.003, (0, 1.0)), (1.1, (16, 1.1)), (1.25, (16, 1.1)), (0.98437, (-3, 0.98125)), (0.5, (-16, 0.9))],
)
def test_snap_tap_examples(ratio, expected):
    k, t = snap_tap(ratio)
    assert k == expected[0]
    assert t == pytest.approx(expected[1], abs=1e-12)


def test_snap_tap_matches_exhaustive_nearest():
    grid = np.array(DeviceConfig().tap_grid)
    assert len(grid) == 33
    for ratio in np.linspace(0.85, 1.15, 301):
        k, t = snap_tap(float(ratio))
        assert abs(t - ratio) <= np.min(np.abs(grid - ratio)) + 1e-12


@given(st.floats(min_value=0.5, max_value=2.0))
def test_snap_tap_idempotent(ratio):
    first = snap_tap(ratio)
    assert snap_tap(first[1]) == first


def test_transformer_tap_snapped_into_grid():
    net = build_network(parse_matpower(two_bus_text(ratio=0.98437)))
    br = net.branches[0]
    assert br.is_transformer
    assert br.tap_ref == pytest.approx(0.98125) and br.tap_position == 13
    assert len(br.tap_set) == 33


def test_all_branches_out_of_service_is_disconnected():
    with pytest.raises(DisconnectedNetworkError):
        build_network(parse_matpower(two_bus_text(status=0)))


def test_slack_count_checked():
    text = two_bus_text().replace("2\t1\t90", "2\t3\t90")
    with pytest.raises(SlackBusError):
        build_network(parse_matpower(text))


def test_negative_shunt_hosts_capacitor_bank():
    net = build_network(parse_matpower(two_bus_text(bs=-20)))
    sh = net.shunts[0]
    assert sh.has_cb and sh.cb_set == (0.0, 0.1, 0.2, 0.3)
    assert sh.b_ref == 0.1
    assert sh.bs0 == pytest.approx(-0.3)
    # the reference point reproduces the case susceptance
    assert sh.bs0 + sh.b_ref == pytest.approx(-0.2)


def test_bundled_case_statistics(case4):
    assert case_statistics(case4) == {"buses": 4, "gen": 2, "cbs": 1, "lines": 4, "tsfm": 1}


def test_build_is_deterministic():
    path = bundled_case("case4_vvo")
    assert load_network(path).to_json() == load_network(path).to_json()


def test_case118_shunts_carry_full_module_set(case118):
    cbs = [s for s in case118.shunts if s.has_cb]
    assert all(s.cb_set == (0.0, 0.1, 0.2, 0.3) for s in cbs)
    assert case118.n_bus == 118 and case118.n_gen == 54
