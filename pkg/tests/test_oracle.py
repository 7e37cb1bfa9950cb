import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lindispatch.dispatch import dispatch, extract_commands, scenario
from lindispatch.oracle import (DerCommand, PowerFlowOptions, check_power_balance,
                                solve_power_flow)

from conftest import cap, random_feeder, two_bus


def _pq_commands(model, q=0.0):
    return [DerCommand(d.id, "PQ", q=q) for d in model.ders]


def test_zero_load_is_flat():
    m = two_bus(p=0.0, q=0.0, phases="abc")
    sol = solve_power_flow(m, [])
    assert sol.converged
    assert np.allclose(sol.vmag, 1.0, atol=1e-12)
    assert np.allclose(np.angle(sol.V), [0.0, -2 * math.pi / 3, 2 * math.pi / 3], atol=1e-12)


def test_two_bus_close_to_linear_estimate():
    sol = solve_power_flow(two_bus(), [])
    assert sol.converged
    # the linear model gives Y = 1 - 2(0.01*0.1 + 0.02*0.05) = 0.996
    assert sol.vmag[0] == pytest.approx(math.sqrt(0.996), abs=1e-4)


def test_two_bus_exact_quadratic():
    """Single-phase two-bus: |v|^4 + (2(rp + xq) - 1)|v|^2 + |z|^2|s|^2 = 0."""
    r, x, p, q = 0.03, 0.05, 0.4, 0.2
    sol = solve_power_flow(two_bus(r=r, x=x, p=p, q=q), [])
    b = 2 * (r * p + x * q) - 1
    c = (r * r + x * x) * (p * p + q * q)
    y = (-b + math.sqrt(b * b - 4 * c)) / 2
    assert sol.y[0] == pytest.approx(y, abs=1e-9)


def test_vv_saturates_at_capability():
    der = {"id": "v", "bus": "n1", "phase": "a", "p_g": 0.03, "s_rating": 0.05, "k_q": -50.0}
    m = two_bus(ders=[der])
    sol = solve_power_flow(m, [DerCommand("v", "VV", v_set=1.05)])
    assert sol.converged
    assert sol.q_der["v"] == cap(m.ders[0])


@pytest.mark.parametrize("name", ["pq", "pv", "vv", "mixed"])
def test_fixture13_power_balance(feeder13, name):
    cfg = scenario(name, feeder13)
    sol = dispatch(feeder13, cfg)
    scen = cfg.apply(feeder13)
    pf = solve_power_flow(scen, extract_commands(sol, scen), PowerFlowOptions(y0=float(sol.X[0])))
    assert pf.converged, pf.message
    assert check_power_balance(pf, scen) < 1e-7


def test_fixture123_power_balance(feeder123):
    pf = solve_power_flow(feeder123, _pq_commands(feeder123))
    assert pf.converged
    assert check_power_balance(pf, feeder123) < 1e-7


def test_perturbed_voltage_is_detected(feeder13):
    pf = solve_power_flow(feeder13, _pq_commands(feeder13))
    bad = dataclasses.replace(pf, V=pf.V.copy())
    bad.V[5] *= 1.01
    assert check_power_balance(bad, feeder13) > 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_random_feeders_balance(seed):
    m = random_feeder(seed, n_max=12, modes=("PQ",), load_scale=0.5)
    pf = solve_power_flow(m, _pq_commands(m))
    if pf.converged:
        assert check_power_balance(pf, m) < 1e-7


def test_more_leaf_injection_raises_voltage():
    der = {"id": "g", "bus": "n1", "phase": "a", "p_g": 0.0, "s_rating": 0.2}
    m = two_bus(ders=[der])
    prev = -np.inf
    for q in np.linspace(-0.2, 0.2, 9):
        v = solve_power_flow(m, [DerCommand("g", "PQ", q=float(q))]).vmag[0]
        assert v > prev
        prev = v


def test_steep_droop_behaves_like_pv():
    base = {"id": "g", "bus": "n1", "phase": "a", "p_g": 0.0, "s_rating": 0.2}
    vset = 1.0
    pv = solve_power_flow(two_bus(ders=[base]), [DerCommand("g", "PV", v_set=vset)])
    vv = solve_power_flow(two_bus(ders=[{**base, "k_q": -1e5}]),
                          [DerCommand("g", "VV", v_set=vset)])
    assert pv.converged and vv.converged
    assert pv.vmag[0] == pytest.approx(vset, abs=1e-8)
    assert vv.vmag[0] == pytest.approx(pv.vmag[0], abs=1e-4)
    assert vv.q_der["g"] == pytest.approx(pv.q_der["g"], abs=1e-3)


def test_pv_falls_back_at_limit():
    der = {"id": "g", "bus": "n1", "phase": "a", "p_g": 0.0, "s_rating": 0.01}
    pf = solve_power_flow(two_bus(ders=[der]), [DerCommand("g", "PV", v_set=1.0)])
    assert pf.converged
    assert pf.q_der["g"] == pytest.approx(0.01)
    assert pf.vmag[0] < 1.0


def test_missing_command_rejected():
    der = {"id": "g", "bus": "n1", "phase": "a", "p_g": 0.0, "s_rating": 0.1}
    with pytest.raises(ValueError):
        solve_power_flow(two_bus(ders=[der]), [])
    with pytest.raises(ValueError):
        solve_power_flow(two_bus(ders=[der]), [DerCommand("g", "VV")])
