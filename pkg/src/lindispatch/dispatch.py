"""Sensitivity-aware reactive dispatch as a linear program.

The decision vector is ``X = [t_r, Y_vv_set, q_pq, Y_pv]``. The objective is
``W1 . Y_vv_set + W2 . q_pq + W3 . Y_pv`` with the sensitivity weights of
:func:`lindispatch.lindist.compute_weights`. Constraint rows are emitted in a
fixed order and each carries a provenance tag.

Sign conventions: substation reactive flows are imports (downstream positive);
the VPP curve speaks in generator convention, so the VPP output is the negated
total substation import.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import simplex
from .feeder import MODES, FeederModel, tree_order, validate_feeder
from .lindist import LinearSystem, linearize
from .oracle import DerCommand

TAGS = ("tr-pin", "phase-balance", "voltage-band", "line-limit",
        "capability-pv", "capability-vv", "vpp-curve")


class DispatchError(RuntimeError):
    pass


class ScenarioError(DispatchError):
    """Scenario configuration inconsistent with the feeder."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Mode assignment and operating limits for one dispatch.

    ``modes`` is ``"keep"`` (use the modes stored on each DER), one of
    ``"PQ"``, ``"PV"``, ``"VV"`` (uniform), or a mapping from DER id or bus id
    to mode; unmapped DERs fall back to ``default_mode``.
    """

    name: str = "custom"
    modes: str | dict[str, str] = "keep"
    default_mode: str = "PQ"
    y_low: float = 0.95**2
    y_high: float = 1.05**2
    eps: float = 0.03
    y0: float | None = None

    def __post_init__(self):
        if not self.y_low < self.y_high:
            raise ScenarioError(f"voltage band is empty: Y_l={self.y_low} >= Y_h={self.y_high}")

    def apply(self, model: FeederModel) -> FeederModel:
        """Return ``model`` with DER modes set by this scenario."""
        if self.modes == "keep":
            return model
        if isinstance(self.modes, str):
            mode = self.modes.upper()
            if mode not in MODES:
                raise ScenarioError(f"unknown mode {self.modes!r}")
            return model.with_modes({d.id: mode for d in model.ders})
        der_ids = {d.id for d in model.ders}
        buses = {d.bus for d in model.ders}
        assign = {d.id: self.default_mode for d in model.ders}
        for key, mode in self.modes.items():
            mode = mode.upper()
            if mode not in MODES:
                raise ScenarioError(f"unknown mode {mode!r} for {key!r}")
            if key in der_ids:
                assign[key] = mode
            elif key in buses:
                for d in model.ders:
                    if d.bus == key:
                        assign[d.id] = mode
            else:
                raise ScenarioError(f"mode map references {key!r}, which is neither a DER nor a DER bus")
        return model.with_modes(assign)

    def measured_y0(self, model: FeederModel) -> float:
        if self.y0 is not None:
            return self.y0
        sub = model.substation
        return float(np.mean([model.substation_y0["abc".index(p)] for p in sub.phases]))


def scenario(name: str, model: FeederModel | None = None, **kw: Any) -> ScenarioConfig:
    """Named scenario: ``pq``, ``pv``, ``vv`` (uniform) or ``mixed`` (feeder's map)."""
    key = name.lower()
    if key in ("pq", "pv", "vv"):
        return ScenarioConfig(name=key, modes=key.upper(), **kw)
    if key == "mixed":
        if model is None or "mixed" not in model.scenarios:
            raise ScenarioError("feeder defines no 'mixed' mode map")
        return ScenarioConfig(name="mixed", modes=dict(model.scenarios["mixed"]), **kw)
    if key in ("keep", "custom"):
        return ScenarioConfig(name=key, **kw)
    raise ScenarioError(f"unknown scenario {name!r}")


@dataclass(frozen=True, eq=False)
class DispatchProblem:
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    eq_tags: tuple[str, ...]
    A_ub: np.ndarray
    b_ub: np.ndarray
    ub_tags: tuple[str, ...]
    bounds: tuple[tuple[float | None, float | None], ...]
    labels: tuple[str, ...]
    system: LinearSystem
    model: FeederModel
    config: ScenarioConfig
    row_names: tuple[str, ...] = ()
    y0: float = 1.0
    x_ref: np.ndarray | None = None   # zero-reactive operating point, used as LP origin

    @property
    def n(self) -> int:
        return self.c.size

    def tag_counts(self) -> dict[str, int]:
        out = {t: 0 for t in TAGS}
        for t in self.eq_tags + self.ub_tags:
            out[t] += 1
        return out


def _two_sided(A: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows for ``lo <= A x <= hi`` as ``[A; -A] x <= [hi; -lo]`` interleaved per row."""
    rows = []
    rhs = []
    for k in range(A.shape[0]):
        rows += [A[k], -A[k]]
        rhs += [hi[k], -lo[k]]
    return np.array(rows).reshape(-1, A.shape[1]), np.array(rhs)


def build_problem(sys: LinearSystem, model: FeederModel, cfg: ScenarioConfig) -> DispatchProblem:
    """Assemble the dispatch LP for a linearized, mode-resolved feeder."""
    P = sys.partition
    n = sys.n_x
    ders = {d.id: d for d in model.ders}
    for did in P.der_ids:
        if not math.isfinite(sys.q_cap[did]):
            d = ders[did]
            raise DispatchError(f"DER {did}: p_g={d.p_g:g} exceeds s_rating={d.s_rating:g}")
    y0 = cfg.measured_y0(model)
    eq_rows: list[np.ndarray] = []
    eq_rhs: list[float] = []
    eq_tags: list[str] = []
    ub_rows: list[np.ndarray] = []
    ub_rhs: list[float] = []
    ub_tags: list[str] = []
    names: list[str] = []

    def add_ub(A, b, tag, labels):
        for k in range(A.shape[0]):
            ub_rows.append(A[k])
            ub_rhs.append(float(b[k]))
            ub_tags.append(tag)
        names.extend(labels)

    # (a) t_r pinned to the measured substation voltage
    pin = np.zeros(n)
    pin[0] = 1.0
    eq_rows.append(pin)
    eq_rhs.append(y0)
    eq_tags.append("tr-pin")

    # (b) pairwise phase imbalance at the substation
    A_sub, b_sub = sys.substation_q_map()
    phs = sys.base.sub_phases
    for k in range(len(phs) - 1):
        D = A_sub[k] - A_sub[k + 1]
        off = b_sub[k] - b_sub[k + 1]
        A2, b2 = _two_sided(D[None, :], np.array([-cfg.eps - off]), np.array([cfg.eps - off]))
        add_ub(A2, b2, "phase-balance", [f"Q{phs[k]}-Q{phs[k+1]}<=eps", f"Q{phs[k+1]}-Q{phs[k]}<=eps"])

    # (c) voltage band at every phase-node
    Av, bv = sys.node_voltage_map
    N = sys.index.N
    A2, b2 = _two_sided(Av, np.full(N, cfg.y_low) - bv, np.full(N, cfg.y_high) - bv)
    labels = []
    for lab in sys.index.labels():
        labels += [f"Y[{lab}]<=Y_h", f"Y[{lab}]>=Y_l"]
    add_ub(A2, b2, "voltage-band", labels)

    # (d) reactive line-flow limits, only where rated
    feeding = tree_order(model)[1]
    qmax = np.array([model.lines[feeding[bus][1]].q_max["abc".index(ph)]
                     for bus, ph in sys.index.nodes])
    qmax = qmax[sys.qflow_rows]
    rated = np.flatnonzero(np.isfinite(qmax))
    if rated.size:
        A2, b2 = _two_sided(sys.A_Qflow[rated], -qmax[rated] - sys.B_Qflow[rated],
                            qmax[rated] - sys.B_Qflow[rated])
        labels = []
        for r in rated:
            lab = sys.index.labels()[sys.qflow_rows[r]]
            labels += [f"Qflow[{lab}]<=q_max", f"Qflow[{lab}]>=-q_max"]
        add_ub(A2, b2, "line-limit", labels)

    # (e) PV capability on the derived reactive output
    if P.n_pv:
        A3, b3 = sys.q_pv_map
        cap = np.array([sys.q_cap[i] for i in P.pv])
        A2, b2 = _two_sided(A3, -b3 - cap, -b3 + cap)
        add_ub(A2, b2, "capability-pv", [f"{s}q[{i}]<=cap" for i in P.pv for s in ("", "-")])

    # (f) VV capability on the droop output
    if P.n_vv:
        A1, b1 = sys.q_vv_map
        cap = np.array([sys.q_cap[i] for i in P.vv])
        A2, b2 = _two_sided(A1, -b1 - cap, -b1 + cap)
        add_ub(A2, b2, "capability-vv", [f"{s}q[{i}]<=cap" for i in P.vv for s in ("", "-")])

    # (g) VPP Volt-VAR curve: -(total import) = K_q/2 (t_r * mean(Y0) - Y_set)
    if model.vpp is not None:
        A_t, b_t = sys.total_q_map()
        kh = model.vpp.K_q / 2.0
        row = -A_t.copy()
        row[0] -= kh * _head_shape_mean(sys)
        eq_rows.append(row)
        eq_rhs.append(b_t - kh * model.vpp.Y_set)
        eq_tags.append("vpp-curve")

    c = np.concatenate([[0.0], sys.W1, sys.W2, sys.W3])
    x_ref = _zero_reactive_point(sys, y0)
    bounds = [(None, None)] * n
    for k, did in enumerate(P.pq):
        cap = sys.q_cap[did]
        bounds[sys.x_slices[2].start + k] = (-cap, cap)
    return DispatchProblem(
        c, np.array(eq_rows).reshape(-1, n), np.array(eq_rhs), tuple(eq_tags),
        np.array(ub_rows).reshape(-1, n), np.array(ub_rhs), tuple(ub_tags), tuple(bounds),
        tuple(sys.x_labels()), sys, model, cfg, tuple(names), y0, x_ref,
    )


def _zero_reactive_point(sys: LinearSystem, y0: float) -> np.ndarray:
    """X with t_r = y0 and every DER at q = 0 (setpoints equal to the resulting voltages)."""
    x = np.zeros(sys.n_x)
    x[0] = y0
    free = np.r_[sys.x_slices[1], sys.x_slices[3]]
    if free.size == 0:
        return x
    A1, b1 = sys.q_vv_map
    A3, b3 = sys.q_pv_map
    A = np.vstack([A1, A3])
    b = np.concatenate([b1, b3]) + A @ x
    x[free] = np.linalg.lstsq(A[:, free], -b, rcond=None)[0]
    return x


def _head_shape_mean(sys: LinearSystem) -> float:
    """Mean substation squared-voltage shape over the substation phases (1 by construction)."""
    base = sys.base
    vals = [float(base.Y0[(base.head[k] > 0)].mean()) for k in range(base.head.shape[0])
            if base.head[k].any()]
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class DispatchSolution:
    status: str
    X: np.ndarray | None
    objective: float
    labels: tuple[str, ...]
    problem: DispatchProblem
    Y: np.ndarray | None = None
    q_der: dict[str, float] = field(default_factory=dict)
    substation_q: np.ndarray | None = None
    vpp_q: float = math.nan
    provenance: str | None = None
    message: str = ""
    ineq_duals: np.ndarray | None = None
    eq_duals: np.ndarray | None = None
    lower_duals: np.ndarray | None = None
    upper_duals: np.ndarray | None = None
    iterations: int = 0
    solve_time: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == simplex.OPTIMAL

    def part(self, k: int) -> np.ndarray:
        return self.X[self.problem.system.x_slices[k]]


def constraint_residuals(problem: DispatchProblem, X: np.ndarray) -> dict[str, float]:
    """Largest violation per provenance tag (<= 0 means satisfied)."""
    out = {t: -math.inf for t in TAGS}
    if problem.A_ub.size:
        viol = problem.A_ub @ X - problem.b_ub
        for t, v in zip(problem.ub_tags, viol):
            out[t] = max(out[t], float(v))
    if problem.A_eq.size:
        viol = np.abs(problem.A_eq @ X - problem.b_eq)
        for t, v in zip(problem.eq_tags, viol):
            out[t] = max(out[t], float(v))
    return out


def solve(problem: DispatchProblem, tol: float = 1e-9) -> DispatchSolution:
    """Solve the dispatch LP; diagnose infeasibility by elastic relaxation."""
    t0 = time.perf_counter()
    res = simplex.linprog(problem.c, problem.A_ub, problem.b_ub, problem.A_eq, problem.b_eq,
                          problem.bounds, tol=tol, x0=problem.x_ref,
                          lazy=np.array([t == "voltage-band" for t in problem.ub_tags], dtype=bool))
    elapsed = time.perf_counter() - t0
    sol = DispatchSolution(res.status, res.x, res.fun, problem.labels, problem,
                           iterations=res.iterations, solve_time=elapsed)
    if res.status == simplex.OPTIMAL:
        sol.ineq_duals, sol.eq_duals = res.ineq_duals, res.eq_duals
        sol.lower_duals, sol.upper_duals = res.lower_duals, res.upper_duals
        _derive(sol)
    elif res.status == simplex.INFEASIBLE:
        sol.provenance, sol.message = _diagnose_infeasible(problem, tol)
    elif res.status == simplex.UNBOUNDED:
        k = int(np.argmax(np.abs(res.ray)))
        sol.provenance = problem.labels[k]
        sol.message = f"objective unbounded along {problem.labels[k]}"
    else:
        sol.message = f"simplex stopped: {res.status} after {res.iterations} pivots"
    return sol


def _derive(sol: DispatchSolution) -> None:
    sys = sol.problem.system
    ev = sys.evaluate(sol.X)
    sol.Y = ev["Y"]
    sol.q_der = sys.der_q(sol.X)
    sol.substation_q = ev["q_substation"]
    sol.vpp_q = -float(ev["q_substation"].sum())


def _diagnose_infeasible(problem: DispatchProblem, tol: float) -> tuple[str, str]:
    """Minimise total violation over relaxable rows; report the largest violator."""
    n = problem.n
    m_ub = problem.A_ub.shape[0]
    soft_eq = [k for k, t in enumerate(problem.eq_tags) if t != "tr-pin"]
    n_e = m_ub + 2 * len(soft_eq)
    c = np.concatenate([np.zeros(n), np.ones(n_e)])
    A_ub = np.hstack([problem.A_ub, -np.eye(m_ub), np.zeros((m_ub, 2 * len(soft_eq)))])
    A_eq = np.zeros((problem.A_eq.shape[0], n + n_e))
    A_eq[:, :n] = problem.A_eq
    for j, k in enumerate(soft_eq):
        A_eq[k, n + m_ub + 2 * j] = -1.0
        A_eq[k, n + m_ub + 2 * j + 1] = 1.0
    bounds = list(problem.bounds) + [(0.0, None)] * n_e
    res = simplex.linprog(c, A_ub, problem.b_ub, A_eq, problem.b_eq, bounds, tol=tol)
    if not res.success:
        return "tr-pin", "elastic relaxation failed; hard constraints conflict"
    e = res.x[n:]
    viol = np.concatenate([e[:m_ub], e[m_ub::2][: len(soft_eq)] + e[m_ub + 1::2][: len(soft_eq)]]) \
        if soft_eq else e[:m_ub]
    tags = list(problem.ub_tags) + [problem.eq_tags[k] for k in soft_eq]
    names = list(problem.row_names) + [problem.eq_tags[k] for k in soft_eq]
    k = int(np.argmax(viol))
    return tags[k], f"infeasible: largest violation {viol[k]:.4g} on {names[k]} ({tags[k]})"


def extract_commands(sol: DispatchSolution, model: FeederModel | None = None) -> list[DerCommand]:
    """Per-DER setpoints in feeder order."""
    if not sol.optimal:
        raise DispatchError(f"no commands for a {sol.status} dispatch")
    model = model or sol.problem.model
    sys = sol.problem.system
    P = sys.partition
    yset = dict(zip(P.vv, sol.part(1)))
    qpq = dict(zip(P.pq, sol.part(2)))
    ypv = dict(zip(P.pv, sol.part(3)))
    out = []
    for d in model.ders:
        if d.id in yset:
            out.append(DerCommand(d.id, "VV", v_set=math.sqrt(yset[d.id])))
        elif d.id in qpq:
            out.append(DerCommand(d.id, "PQ", q=float(qpq[d.id])))
        else:
            out.append(DerCommand(d.id, "PV", v_set=math.sqrt(ypv[d.id])))
    return out


def dispatch(model: FeederModel, cfg: ScenarioConfig, *, K: np.ndarray | None = None,
             tol: float = 1e-9) -> DispatchSolution:
    """Apply the scenario, linearize, build and solve."""
    scen = cfg.apply(model)
    diags = validate_feeder(scen)
    if diags:
        raise ScenarioError("; ".join(map(str, diags)))
    sys = linearize(scen, K=K)
    return solve(build_problem(sys, scen, cfg), tol=tol)


def solution_to_dict(sol: DispatchSolution, *, timing: bool = False) -> dict[str, Any]:
    out: dict[str, Any] = {
        "scenario": sol.problem.config.name,
        "status": sol.status,
    }
    if sol.optimal:
        commands = extract_commands(sol)
        out["objective"] = sol.objective
        out["X"] = {k: float(v) for k, v in zip(sol.labels, sol.X)}
        out["commands"] = [
            {"der": c.der_id, "mode": c.mode,
             **({"q": c.q} if c.q is not None else {"v_set": c.v_set})}
            for c in commands
        ]
        out["der_q"] = sol.q_der
        out["substation_q"] = dict(zip(sol.problem.system.base.sub_phases, map(float, sol.substation_q)))
        out["vpp_q"] = sol.vpp_q
    else:
        out["provenance"] = sol.provenance
        out["message"] = sol.message
    if timing:
        out["solve_time_s"] = sol.solve_time
    return out


__all__ = [
    "ScenarioConfig", "DispatchProblem", "DispatchSolution", "DispatchError", "ScenarioError",
    "scenario", "build_problem", "solve", "extract_commands", "dispatch", "constraint_residuals",
    "solution_to_dict",
]
