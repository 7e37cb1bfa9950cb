"""Scenario runner: dispatch, validate against the nonlinear oracle, score.

Voltage errors compare magnitudes, ``|sqrt(Y_linear) - |v|_oracle|``. The L1
voltage metric is normalised by the phase-node count and the reactive one by
the oracle's total absolute DER output, both in percent.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .dispatch import (DispatchSolution, ScenarioConfig, ScenarioError, dispatch,
                       extract_commands, scenario)
from .feeder import FeederModel
from .oracle import PowerFlowOptions, PowerFlowSolution, solve_power_flow

SCENARIOS = ("pq", "pv", "vv", "mixed")

# acceptance bands
MAX_VOLTAGE_ERROR = 0.02
L1_VOLTAGE = 1.0
L1_REACTIVE = 12.0
LP_SECONDS = 0.5
VPP_RELATIVE = 0.10


class BenchError(RuntimeError):
    """A scenario could not be dispatched or validated."""

    def __init__(self, scenario: str, message: str):
        super().__init__(f"[{scenario}] {message}")
        self.scenario = scenario


@dataclass
class ErrorReport:
    scenario: str
    nodes: tuple[str, ...]
    voltage_error: np.ndarray
    max_voltage_error: float
    l1_voltage: float
    der_ids: tuple[str, ...]
    reactive_error: np.ndarray
    l1_reactive: float
    solve_time: float = 0.0
    vpp_target: float | None = None
    vpp_oracle: float | None = None
    oracle_iterations: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def vpp_error(self) -> float | None:
        if self.vpp_target is None or self.vpp_oracle is None:
            return None
        return abs(self.vpp_oracle - self.vpp_target)

    def to_dict(self, timing: bool = False) -> dict[str, Any]:
        out = {
            "scenario": self.scenario,
            "nodes": list(self.nodes),
            "voltage_error": self.voltage_error.tolist(),
            "max_voltage_error": self.max_voltage_error,
            "l1_voltage_pct": self.l1_voltage,
            "der_ids": list(self.der_ids),
            "reactive_error": self.reactive_error.tolist(),
            "l1_reactive_pct": self.l1_reactive,
            "vpp_target": self.vpp_target,
            "vpp_oracle": self.vpp_oracle,
            "oracle_iterations": self.oracle_iterations,
        }
        if timing:
            out["solve_time_s"] = self.solve_time
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ErrorReport":
        return cls(
            scenario=d["scenario"], nodes=tuple(d["nodes"]),
            voltage_error=np.asarray(d["voltage_error"], dtype=float),
            max_voltage_error=d["max_voltage_error"], l1_voltage=d["l1_voltage_pct"],
            der_ids=tuple(d["der_ids"]), reactive_error=np.asarray(d["reactive_error"], dtype=float),
            l1_reactive=d["l1_reactive_pct"], solve_time=d.get("solve_time_s", 0.0),
            vpp_target=d.get("vpp_target"), vpp_oracle=d.get("vpp_oracle"),
            oracle_iterations=d.get("oracle_iterations", 0),
        )


def error_metrics(scenario_id: str, nodes: Iterable[str], y_linear, v_oracle,
                  der_ids: Iterable[str] = (), q_linear=(), q_oracle=()) -> ErrorReport:
    """Metrics from raw arrays; ``y_linear`` is squared magnitude, ``v_oracle`` magnitude."""
    nodes = tuple(nodes)
    dv = np.abs(np.sqrt(np.asarray(y_linear, dtype=float)) - np.asarray(v_oracle, dtype=float))
    if dv.shape != (len(nodes),):
        raise ValueError(f"expected {len(nodes)} voltages, got shape {dv.shape}")
    q_lin = np.asarray(q_linear, dtype=float)
    q_or = np.asarray(q_oracle, dtype=float)
    dq = np.abs(q_lin - q_or)
    total = float(np.abs(q_or).sum())
    num = float(dq.sum())
    if total > 1e-12:
        l1q = 100.0 * num / total
    else:
        l1q = 0.0 if num <= 1e-12 else math.inf
    n = max(len(nodes), 1)
    return ErrorReport(
        scenario=scenario_id, nodes=nodes, voltage_error=dv,
        max_voltage_error=float(dv.max(initial=0.0)), l1_voltage=100.0 * float(dv.sum()) / n,
        der_ids=tuple(der_ids), reactive_error=dq, l1_reactive=l1q,
    )


def compare_solutions(sol: DispatchSolution, pf: PowerFlowSolution) -> ErrorReport:
    """Score a dispatch against the oracle's realization of its commands."""
    index = sol.problem.system.index
    if tuple(index.nodes) != tuple(pf.nodes):
        raise BenchError(sol.problem.config.name, "dispatch and power flow cover different phase-nodes")
    if set(sol.q_der) != set(pf.q_der):
        raise BenchError(sol.problem.config.name, "dispatch and power flow cover different DERs")
    ids = [d.id for d in sol.problem.model.ders]
    rep = error_metrics(sol.problem.config.name, index.labels(), sol.Y, pf.vmag, ids,
                        [sol.q_der[i] for i in ids], [pf.q_der[i] for i in ids])
    rep.solve_time = sol.solve_time
    rep.oracle_iterations = pf.iterations
    vpp = sol.problem.model.vpp
    if vpp is not None:
        rep.vpp_target = vpp.K_q / 2.0 * (float(sol.X[0]) - vpp.Y_set)
        rep.vpp_oracle = -float(pf.substation_q.sum())
    return rep


def run_scenario(model: FeederModel, cfg: ScenarioConfig, *, lp_tol: float = 1e-9,
                 options: PowerFlowOptions | None = None
                 ) -> tuple[DispatchSolution, PowerFlowSolution, ErrorReport]:
    """Dispatch, feed the commands to the oracle at the pinned substation voltage, score."""
    scen = cfg.apply(model)
    sol = dispatch(model, cfg, tol=lp_tol)
    if not sol.optimal:
        raise BenchError(cfg.name, f"dispatch {sol.status}: {sol.message} (provenance {sol.provenance})")
    opts = options or PowerFlowOptions()
    opts = PowerFlowOptions(**{**opts.__dict__, "y0": float(sol.X[0])})
    pf = solve_power_flow(scen, extract_commands(sol, scen), opts)
    if not pf.converged:
        raise BenchError(cfg.name, f"power flow did not converge: {pf.message}")
    return sol, pf, compare_solutions(sol, pf)


@dataclass
class Check:
    criterion: str
    scenario: str
    value: float
    limit: float
    passed: bool

    def line(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return f"{state} {self.criterion} [{self.scenario}] value={self.value:.6g} limit={self.limit:.6g}"


@dataclass
class BenchResult:
    feeder: str
    reports: list[ErrorReport] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)

    def report(self, name: str) -> ErrorReport:
        for r in self.reports:
            if r.scenario == name:
                return r
        raise KeyError(name)

    def checks(self) -> list[Check]:
        out = []
        for r in self.reports:
            s = r.scenario
            out.append(Check("max-voltage-error", s, r.max_voltage_error, MAX_VOLTAGE_ERROR,
                             r.max_voltage_error <= MAX_VOLTAGE_ERROR))
            out.append(Check("l1-voltage", s, r.l1_voltage, L1_VOLTAGE, r.l1_voltage <= L1_VOLTAGE))
            if s == "pq":
                out.append(Check("pq-reactive-exact", s, r.l1_reactive, 0.0, r.l1_reactive == 0.0))
            if s in ("pv", "vv"):
                out.append(Check("l1-reactive", s, r.l1_reactive, L1_REACTIVE, r.l1_reactive <= L1_REACTIVE))
            out.append(Check("lp-runtime", s, r.solve_time, LP_SECONDS, r.solve_time < LP_SECONDS))
            if s in ("vv", "mixed") and r.vpp_error is not None:
                limit = VPP_RELATIVE * abs(r.vpp_target) + 1e-6
                out.append(Check("vpp-tracking", s, r.vpp_error, limit, r.vpp_error <= limit))
        return out

    def failed(self) -> list[Check]:
        return [c for c in self.checks() if not c.passed]

    def to_dict(self, timing: bool = False) -> dict[str, Any]:
        return {
            "feeder": self.feeder,
            "scenarios": [r.to_dict(timing) for r in self.reports],
            "skipped": dict(self.skipped),
        }


def run_bench(model: FeederModel, scenarios: Iterable[str] = SCENARIOS, *, eps: float | None = None,
              lp_tol: float = 1e-9, pf_tol: float | None = None) -> BenchResult:
    """Run the named scenarios; ``mixed`` is skipped when the feeder has no mode map."""
    result = BenchResult(model.name or "feeder")
    opts = PowerFlowOptions() if pf_tol is None else PowerFlowOptions(tol=pf_tol)
    kw = {} if eps is None else {"eps": eps}
    for name in scenarios:
        try:
            cfg = scenario(name, model, **kw)
        except ScenarioError as exc:
            if name != "mixed":
                raise
            result.skipped[name] = str(exc)
            continue
        result.reports.append(run_scenario(model, cfg, lp_tol=lp_tol, options=opts)[2])
    return result


def format_table(result: BenchResult, timing: bool = False) -> str:
    """Aligned text table, one row per scenario."""
    head = ["Scenario", "V max (pu)", "V L1 (%)", "Q L1 (%)"]
    if timing:
        head.append("LP (s)")
    rows = [head]
    for r in result.reports:
        row = [r.scenario.upper() if r.scenario != "mixed" else "Mixed",
               f"{r.max_voltage_error:.4f}", f"{r.l1_voltage:.3f}", f"{r.l1_reactive:.3f}"]
        if timing:
            row.append(f"{r.solve_time:.3f}")
        rows.append(row)
    widths = [max(len(r[k]) for r in rows) for k in range(len(head))]
    lines = [f"Feeder {result.feeder}"]
    for i, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(row, widths))))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    for name, why in result.skipped.items():
        lines.append(f"({name} skipped: {why})")
    return "\n".join(lines) + "\n"


def format_csv(result: BenchResult) -> str:
    """Per-node voltage error rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "node", "abs_voltage_error_pu"])
    for r in result.reports:
        for node, e in zip(r.nodes, r.voltage_error):
            w.writerow([r.scenario, node, repr(float(e))])
    return buf.getvalue()


__all__ = [
    "ErrorReport", "BenchError", "BenchResult", "Check", "error_metrics", "compare_solutions",
    "run_scenario", "run_bench", "format_table", "format_csv", "SCENARIOS",
]
