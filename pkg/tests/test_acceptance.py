"""Acceptance suite: one PASS/FAIL line per criterion (shown with ``pytest -v``)."""

import itertools

import numpy as np
import pytest

from lindispatch.bench import L1_REACTIVE, L1_VOLTAGE, LP_SECONDS, MAX_VOLTAGE_ERROR, VPP_RELATIVE, run_bench
from lindispatch.dispatch import ScenarioConfig, constraint_residuals, dispatch, extract_commands, scenario
from lindispatch.lindist import LinearizationError, linearize
from lindispatch.oracle import DerCommand, PowerFlowOptions, check_power_balance, solve_power_flow

from conftest import cap, random_feeder, reference_lindistflow, two_bus
from test_dispatch import _independent_check, _tiny_pq
from test_lindist import _fd_sensitivities, _full_voltage_and_q, _random_X

SCENARIOS = ("pq", "pv", "vv", "mixed")


@pytest.fixture(scope="module")
def bench13(feeder13):
    return run_bench(feeder13)


@pytest.fixture(scope="module")
def bench123(feeder123):
    return run_bench(feeder123)


def _verdict(capsys, number, title, passed, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
    assert passed, detail


def test_criterion_1_max_voltage_error(capsys, bench13):
    vals = {r.scenario: r.max_voltage_error for r in bench13.reports}
    ok = set(vals) == set(SCENARIOS) and all(v <= MAX_VOLTAGE_ERROR for v in vals.values())
    detail = ", ".join(f"{k}={v:.4f} pu" for k, v in vals.items()) + f" (limit {MAX_VOLTAGE_ERROR})"
    _verdict(capsys, 1, "max voltage error", ok, detail)


def test_criterion_2_l1_voltage(capsys, bench13):
    vals = {r.scenario: r.l1_voltage for r in bench13.reports}
    ok = set(vals) == set(SCENARIOS) and all(v <= L1_VOLTAGE for v in vals.values())
    detail = ", ".join(f"{k}={v:.3f}%" for k, v in vals.items()) + f" (limit {L1_VOLTAGE}%)"
    _verdict(capsys, 2, "L1 voltage", ok, detail)


def test_criterion_3_pq_reactive_exact(capsys, bench13):
    v = bench13.report("pq").l1_reactive
    _verdict(capsys, 3, "PQ reactive exactness", v == 0.0, f"pq={v!r}%")


def test_criterion_4_reactive_l1(capsys, bench13, bench123):
    vals = {f"{b.feeder}/{s}": b.report(s).l1_reactive for b in (bench13, bench123) for s in ("pv", "vv")}
    ok = all(v <= L1_REACTIVE for v in vals.values())
    detail = ", ".join(f"{k}={v:.3f}%" for k, v in vals.items()) + f" (limit {L1_REACTIVE}%)"
    _verdict(capsys, 4, "reactive L1", ok, detail)


def test_criterion_5_runtime(capsys, feeder123):
    times = {}
    for name in SCENARIOS:
        sol = dispatch(feeder123, scenario(name, feeder123))
        assert sol.optimal
        times[name] = sol.solve_time
    ok = all(t < LP_SECONDS for t in times.values())
    n = sum(len(b.phases) for b in feeder123.buses if not b.is_substation)
    detail = f"{len(feeder123.buses)} buses/{n} phase-nodes: " + \
        ", ".join(f"{k}={t:.3f}s" for k, t in times.items()) + f" (limit {LP_SECONDS}s)"
    _verdict(capsys, 5, "LP runtime", ok, detail)


def _property_suite(feeder13):
    out = {}
    # elimination residual
    rng = np.random.default_rng(2024)
    worst = 0.0
    for seed in range(1000):
        sys = linearize(random_feeder(seed))
        X = _random_X(sys, rng)
        Y, q = _full_voltage_and_q(sys, X)
        b = sys.base
        rhs = b.Y0 * X[0] + b.R_eq @ (sys.p_g - sys.p_load) + b.X_eq @ (q - sys.q_load)
        worst = max(worst, float(np.max(np.abs(sys.K @ Y - rhs), initial=0.0)))
    out["elimination"] = (worst, 1e-9)

    # all-PQ reduction
    worst = 0.0
    for seed in range(200):
        m = random_feeder(seed, modes=("PQ",))
        sys = linearize(m)
        X = _random_X(sys, rng)
        order = sorted(m.ders, key=lambda d: sys.index.position(d.bus, d.phase))
        ref = reference_lindistflow(m, X[0], {(d.bus, d.phase): X[1 + k] for k, d in enumerate(order)})
        worst = max(worst, float(np.max(np.abs(sys.evaluate(X)["Y"] - ref))))
    out["pq-reduction"] = (worst, 1e-12)

    # weights vs finite differences; lossless uniformity (single-mode feeders)
    w_fd = w_uni = 0.0
    for seed in range(100):
        m = random_feeder(seed)
        try:
            sys = linearize(m)
        except LinearizationError:
            continue
        s_vv, s_pq, s_pv = _fd_sensitivities(sys, _random_X(sys, rng))
        d = s_vv.sum() + s_pq.sum() + s_pv.sum()
        if abs(d) > 1e-9:
            for W, s in ((sys.W1, s_vv), (sys.W2, s_pq), (sys.W3, s_pv)):
                w_fd = max(w_fd, float(np.max(np.abs(W - (1 - s / d)), initial=0.0)))
        for mode in ("PQ", "PV", "VV"):
            m1 = random_feeder(seed, modes=(mode,))
            try:
                sys1 = linearize(m1)
            except LinearizationError:
                continue
            n = len(m1.ders)
            if n:
                W = np.concatenate([sys1.W1, sys1.W2, sys1.W3])
                w_uni = max(w_uni, float(np.max(np.abs(W - (1 - 1 / n)))))
    out["weights-fd"] = (w_fd, 1e-8)
    out["weights-lossless"] = (w_uni, 1e-10)

    # LP constraint re-evaluation and dual certificates
    res = dual = 0.0
    for name in SCENARIOS:
        cfg = scenario(name, feeder13)
        sol = dispatch(feeder13, cfg)
        res = max(res, max(constraint_residuals(sol.problem, sol.X).values()),
                  max(_independent_check(sol, cfg.apply(feeder13), cfg).values()))
        p = sol.problem
        stat = p.c + p.A_ub.T @ sol.ineq_duals + p.A_eq.T @ sol.eq_duals - sol.lower_duals + sol.upper_duals
        dual = max(dual, float(np.max(np.abs(stat))),
                   float(np.max(np.abs(sol.ineq_duals * (p.A_ub @ sol.X - p.b_ub)), initial=0.0)))
    out["lp-constraints"] = (res, 1e-8)
    out["lp-duals"] = (dual, 1e-6)

    # grid search never beats the LP
    gap = -np.inf
    for n_der in (1, 2):
        m = _tiny_pq(n_der)
        sol = dispatch(m, ScenarioConfig(y_low=0.99, y_high=1.1, eps=0.03))
        p = sol.problem
        axis = np.arange(-cap(m.ders[0]), cap(m.ders[0]) + 1e-12, 1e-3)
        grid = np.array(list(itertools.product(axis, repeat=n_der)))
        X = np.hstack([np.full((len(grid), 1), p.y0), grid])
        ok = np.all(X @ p.A_ub.T <= p.b_ub + 1e-12, axis=1)
        gap = max(gap, sol.objective - float(np.min(X[ok] @ p.c)))
    out["grid-search"] = (max(gap, 0.0), 1e-12)

    # oracle conservation, VV clamp, steep droop vs PV
    cons = 0.0
    for name in SCENARIOS:
        cfg = scenario(name, feeder13)
        scen = cfg.apply(feeder13)
        sol = dispatch(feeder13, cfg)
        pf = solve_power_flow(scen, extract_commands(sol, scen), PowerFlowOptions(y0=float(sol.X[0])))
        cons = max(cons, check_power_balance(pf, scen) if pf.converged else np.inf)
    out["oracle-conservation"] = (cons, 1e-7)
    der = {"id": "v", "bus": "n1", "phase": "a", "p_g": 0.03, "s_rating": 0.05, "k_q": -50.0}
    m = two_bus(ders=[der])
    pf = solve_power_flow(m, [DerCommand("v", "VV", v_set=1.05)])
    out["vv-clamp"] = (abs(pf.q_der["v"] - cap(m.ders[0])), 0.0)
    base = {"id": "g", "bus": "n1", "phase": "a", "p_g": 0.0, "s_rating": 0.2}
    pv = solve_power_flow(two_bus(ders=[base]), [DerCommand("g", "PV", v_set=1.0)])
    vv = solve_power_flow(two_bus(ders=[{**base, "k_q": -1e5}]), [DerCommand("g", "VV", v_set=1.0)])
    out["steep-droop-pv"] = (abs(vv.vmag[0] - pv.vmag[0]) if vv.converged and pv.converged else np.inf, 1e-4)
    return out


def test_criterion_6_property_suite(capsys, feeder13):
    results = _property_suite(feeder13)
    failed = [k for k, (v, lim) in results.items() if not v <= lim]
    detail = ", ".join(f"{k}={v:.2e}<={lim:g}" for k, (v, lim) in results.items())
    if failed:
        detail = "failed " + ", ".join(failed) + "; " + detail
    _verdict(capsys, 6, "self-consistency properties", not failed, detail)


def test_criterion_7_vpp_tracking(capsys, bench13):
    parts, ok = [], True
    for s in ("vv", "mixed"):
        r = bench13.report(s)
        rel = r.vpp_error / abs(r.vpp_target)
        ok &= r.vpp_error <= VPP_RELATIVE * abs(r.vpp_target) + 1e-6
        parts.append(f"{s}: target={r.vpp_target:.4f} oracle={r.vpp_oracle:.4f} rel={100 * rel:.2f}%")
    _verdict(capsys, 7, "VPP curve tracking", ok, "; ".join(parts) + f" (limit {100 * VPP_RELATIVE:g}%)")
