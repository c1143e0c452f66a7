from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from gridvvo.network import Branch, Bus, OperatingState, ShuntDevice, module_levels, validate

from conftest import two_bus


def test_well_formed_networks_validate(case4, case118):
    assert validate(case4) == []
    assert validate(case118) == []


def test_two_slack_buses_reported():
    net = two_bus()
    buses = (net.buses[0], dataclasses.replace(net.buses[1], is_slack=True))
    msgs = validate(dataclasses.replace(net, buses=buses))
    assert len(msgs) == 1 and "multiple slack buses" in msgs[0]


def test_line_with_nonunit_tap_set_reported():
    net = two_bus()
    br = dataclasses.replace(net.branches[0], tap_ref=0.95, tap_set=(0.95,))
    msgs = validate(dataclasses.replace(net, branches=(br,)))
    assert msgs == ["branch 0: line tap_set must equal {1}"]


def test_shunt_invariants():
    bad = ShuntDevice(bus=1, gs=0.0, bs0=0.0, module_step=0.1, module_count=3, b_ref=0.05, cb_set=(0.0, 0.05))
    msgs = validate(two_bus(shunts=(bad,)))
    assert any("cb_set is not a subset" in m for m in msgs)
    assert not any("b_ref" in m for m in msgs)


def test_bus_bounds_and_disconnection():
    net = two_bus()
    buses = (net.buses[0], dataclasses.replace(net.buses[1], vmin=1.2))
    assert any("voltage bounds" in m for m in validate(dataclasses.replace(net, buses=buses)))
    isolated = dataclasses.replace(net, buses=net.buses + (Bus(2, 100.0, 0.9, 1.1, 0.0, 0.0),))
    assert "network: graph is not connected" in validate(isolated)


def test_module_levels():
    assert module_levels(0.1, 3) == (0.0, 0.1, 0.2, 0.3)


def test_json_round_trip(case4, case118):
    for net in (case4, case118):
        back = type(net).from_json(net.to_json())
        assert back.buses == net.buses
        assert back.generators == net.generators
        assert back.branches == net.branches
        assert back.shunts == net.shunts
        assert back.base_mva == net.base_mva


def test_adjacency_bijection(case118):
    adj = case118.adjacency
    out_total = sum(len(v) for v in adj["out"])
    in_total = sum(len(v) for v in adj["in"])
    assert out_total == in_total == case118.n_branch
    for k, br in enumerate(case118.branches):
        assert adj["out"][br.from_bus].count(k) == 1
        assert adj["in"][br.to_bus].count(k) == 1


def test_operating_state_is_read_only_and_round_trips():
    s = OperatingState(vm=[1.0, 0.99], va=[0.0, -0.1], pg=[1.0], qg=[0.0], tap=[1.0], cb=[])
    with pytest.raises(ValueError):
        s.vm[0] = 2.0
    back = OperatingState.from_dict(s.to_dict())
    for f in ("vm", "va", "pg", "qg", "tap", "cb"):
        np.testing.assert_array_equal(getattr(back, f), getattr(s, f))
    assert back.pf is None


def test_tap_position(case4):
    tsfm = [b for b in case4.branches if b.is_transformer]
    assert tsfm and tsfm[0].tap_set[tsfm[0].tap_position] == tsfm[0].tap_ref
    assert isinstance(Branch(0, 1, 1, 1, 1, 1).tap_position, int)
