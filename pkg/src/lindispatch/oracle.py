"""Unbalanced backward/forward sweep power flow with inverter control loops.

The sweep handles fixed injections; PQ inverters are plain injections. Volt-VAR
and PV inverters are solved in an outer loop: each outer step runs the sweep to
convergence, then moves the controlled reactive outputs by a damped chord step
whose Jacobian is the network's reactive voltage sensitivity. The chord matrix
only affects the path to the fixed point, not the fixed point itself.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .feeder import PHASES, FeederModel, iter_nodes, tree_order

log = logging.getLogger(__name__)

ANGLES = {"a": 0.0, "b": -2 * math.pi / 3, "c": 2 * math.pi / 3}


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class DerCommand:
    der_id: str
    mode: str
    q: float | None = None
    v_set: float | None = None


@dataclass
class PowerFlowOptions:
    tol: float = 1e-8
    max_iter: int = 200          # sweep iterations per inner solve
    max_outer: int = 200         # controller iterations
    vv_damping: float = 0.5
    pv_damping: float = 0.7
    collapse_voltage: float = 0.5
    y0: float | None = None      # measured substation squared voltage (mean over phases)
    trace: bool = False


@dataclass
class PowerFlowSolution:
    nodes: tuple[tuple[str, str], ...]
    V: np.ndarray                          # complex per phase-node
    q_der: dict[str, float]
    line_flows: np.ndarray                 # sending-end complex power per line-phase
    substation_phases: str
    substation_s: np.ndarray               # complex power leaving the substation per phase
    iterations: int
    converged: bool
    max_mismatch: float
    V_substation: np.ndarray = field(default_factory=lambda: np.zeros(3, complex))
    history: list[float] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    message: str = ""

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.V)

    @property
    def y(self) -> np.ndarray:
        return np.abs(self.V) ** 2

    @property
    def substation_q(self) -> np.ndarray:
        return self.substation_s.imag

    @property
    def substation_p(self) -> np.ndarray:
        return self.substation_s.real


class _Network:
    """Index arrays for the sweep, built once per model."""

    def __init__(self, model: FeederModel):
        self.nodes = tuple(iter_nodes(model))
        pos = {n: i for i, n in enumerate(self.nodes)}
        order, parent_of = tree_order(model)
        self.sub = model.substation
        self.buses = [b for b in order if b != self.sub.id]  # BFS order, parents first
        phases = {b.id: b.phases for b in model.buses}
        self.rows: dict[str, np.ndarray] = {}
        self.parent_rows: dict[str, np.ndarray | None] = {}
        self.sub_phase_idx: dict[str, list[int]] = {}
        self.z: dict[str, np.ndarray] = {}
        for bus in self.buses:
            par, k = parent_of[bus]
            ph = phases[bus]
            self.rows[bus] = np.array([pos[(bus, p)] for p in ph])
            idx = [PHASES.index(p) for p in ph]
            self.z[bus] = model.lines[k].z()[np.ix_(idx, idx)]
            if par == self.sub.id:
                self.parent_rows[bus] = None
                self.sub_phase_idx[bus] = idx
            else:
                self.parent_rows[bus] = np.array([pos[(par, p)] for p in ph])
        N = len(self.nodes)
        self.N = N
        self.s_const = np.zeros(N, complex)
        self.s_z = np.zeros(N, complex)
        for ld in model.loads:
            i = pos[(ld.bus, ld.phase)]
            self.s_const[i] += ld.a0 * complex(ld.p, ld.q)
            self.s_z[i] += (1.0 - ld.a0) * complex(ld.p, ld.q)
        self.der_row = {d.id: pos[(d.bus, d.phase)] for d in model.ders}


def _substation_voltage(model: FeederModel, y0: float | None) -> np.ndarray:
    sub = model.substation
    y = np.asarray(model.substation_y0, dtype=float)
    if y0 is not None:
        y = y / y[[PHASES.index(p) for p in sub.phases]].mean() * y0
    return np.array([math.sqrt(y[k]) * np.exp(1j * ANGLES[p]) for k, p in enumerate(PHASES)])


def _sweep(net: _Network, V: np.ndarray, V_sub: np.ndarray, s_gen: np.ndarray,
           opts: PowerFlowOptions, trace: list | None, outer: int) -> tuple[np.ndarray, np.ndarray, int, list[float]]:
    """Fixed-injection sweep. Returns (V, line currents, iterations, update history)."""
    history = []
    I_line = np.zeros(net.N, complex)
    for it in range(1, opts.max_iter + 1):
        s_net = net.s_const + net.s_z * np.abs(V) ** 2 - s_gen
        I_line = np.conj(s_net / V)
        for bus in reversed(net.buses):
            pr = net.parent_rows[bus]
            if pr is not None:
                I_line[pr] += I_line[net.rows[bus]]
        V_new = np.empty_like(V)
        for bus in net.buses:
            rows = net.rows[bus]
            pr = net.parent_rows[bus]
            v_up = V_sub[net.sub_phase_idx[bus]] if pr is None else V_new[pr]
            V_new[rows] = v_up - net.z[bus] @ I_line[rows]
        step = float(np.max(np.abs(V_new - V))) if net.N else 0.0
        V = V_new
        history.append(step)
        if trace is not None:
            trace.append({"outer": outer, "iteration": it, "max_update": step})
        if net.N and np.min(np.abs(V)) < opts.collapse_voltage:
            raise PowerFlowError(
                f"voltage collapse: |v| = {np.min(np.abs(V)):.3f} pu at iteration {it}", history)
        if step < opts.tol:
            return V, I_line, it, history
    raise PowerFlowError(f"sweep did not converge in {opts.max_iter} iterations "
                         f"(last update {history[-1]:.3e})", history)


def _reactive_sensitivity(model: FeederModel) -> np.ndarray:
    from .lindist import build_base_model, build_index
    index = build_index(model)
    return build_base_model(model, index).X_eq


def solve_power_flow(model: FeederModel, commands, options: PowerFlowOptions | None = None) -> PowerFlowSolution:
    """Solve the unbalanced power flow with each DER following its command.

    ``commands`` maps DER id to DerCommand (or is an iterable of them); every
    DER of the model must be covered. VV DERs track
    ``q = clamp(k_q (|v| - v_set), +-sqrt(S^2 - p^2))``; PV DERs regulate
    ``|v|`` to ``v_set`` and fall back to a fixed output at the capability limit.
    """
    opts = options or PowerFlowOptions()
    if not isinstance(commands, dict):
        commands = {c.der_id: c for c in commands}
    missing = [d.id for d in model.ders if d.id not in commands]
    if missing:
        raise ValueError("no command for DER(s): " + ", ".join(missing))

    net = _Network(model)
    V_sub = _substation_voltage(model, opts.y0)
    V = np.array([V_sub[PHASES.index(p)] for _, p in net.nodes], dtype=complex)
    ders = list(model.ders)
    q = np.zeros(len(ders))
    p = np.array([d.p_g for d in ders], dtype=float)
    cap = np.array([d.q_capability for d in ders], dtype=float)
    rows = np.array([net.der_row[d.id] for d in ders], dtype=int)
    modes = [commands[d.id].mode for d in ders]
    vset = np.array([commands[d.id].v_set if commands[d.id].v_set is not None else np.nan for d in ders])
    kq = np.array([d.k_q if d.k_q is not None else np.nan for d in ders], dtype=float)
    for i, d in enumerate(ders):
        cmd = commands[d.id]
        if cmd.mode == "PQ":
            q[i] = cmd.q if cmd.q is not None else d.q_fixed
        elif cmd.mode in ("VV", "PV"):
            if cmd.v_set is None:
                raise ValueError(f"DER {d.id} in {cmd.mode} mode needs v_set")
        else:
            raise ValueError(f"unknown mode {cmd.mode!r} for DER {d.id}")
    is_vv = np.array([m == "VV" for m in modes], dtype=bool)
    is_pv = np.array([m == "PV" for m in modes], dtype=bool)
    pv_saturated = np.zeros(len(ders), dtype=bool)
    controlled = np.flatnonzero(is_vv | is_pv)
    S = None
    if controlled.size:
        S = _reactive_sensitivity(model)[np.ix_(rows, rows)]

    trace: list | None = [] if opts.trace else None
    total_iter = 0
    history: list[float] = []
    converged = False
    message = ""
    try:
        for outer in range(opts.max_outer):
            s_gen = np.zeros(net.N, complex)
            np.add.at(s_gen, rows, p + 1j * q)
            V, I_line, it, hist = _sweep(net, V, V_sub, s_gen, opts, trace, outer)
            total_iter += it
            history.extend(hist)
            if not controlled.size:
                converged = True
                break
            vm = np.abs(V[rows])
            target = np.clip(kq * (vm - vset), -cap, cap)
            resid = np.zeros(len(ders))
            resid[is_vv] = q[is_vv] - target[is_vv]
            free_pv = is_pv & ~pv_saturated
            resid[free_pv] = vm[free_pv] - vset[free_pv]
            if np.max(np.abs(resid)) < opts.tol:
                converged = True
                break
            q = q + _control_step(q, vm, vset, kq, cap, target, is_vv, free_pv, S, opts)
            over = is_pv & (np.abs(q) > cap)
            q[is_vv] = np.clip(q[is_vv], -cap[is_vv], cap[is_vv])
            if np.any(over):
                q[over] = np.sign(q[over]) * cap[over]
                pv_saturated |= over
                log.debug("PV DERs saturated: %s", [ders[i].id for i in np.flatnonzero(over)])
        else:
            message = f"controller loop did not converge in {opts.max_outer} outer iterations"
    except PowerFlowError as exc:
        message = str(exc)
        history.extend(exc.history)

    I_line = np.conj(_net_demand(net, V, rows, p, q) / V)
    for bus in reversed(net.buses):
        pr = net.parent_rows[bus]
        if pr is not None:
            I_line[pr] += I_line[net.rows[bus]]
    flows = np.zeros(net.N, complex)
    sub_s = np.zeros(len(net.sub.phases), complex)
    for bus in net.buses:
        r = net.rows[bus]
        pr = net.parent_rows[bus]
        if pr is None:
            v_up = V_sub[net.sub_phase_idx[bus]]
            flows[r] = v_up * np.conj(I_line[r])
            for k, ph_idx in zip(r, net.sub_phase_idx[bus]):
                sub_s[net.sub.phases.index(PHASES[ph_idx])] += flows[k]
        else:
            flows[r] = V[pr] * np.conj(I_line[r])
    sol = PowerFlowSolution(
        net.nodes, V, {d.id: float(q[i]) for i, d in enumerate(ders)}, flows,
        net.sub.phases, sub_s, total_iter, converged, math.nan, V_sub,
        history, trace or [], message,
    )
    sol.max_mismatch = check_power_balance(sol, model)
    if converged and not sol.max_mismatch < 1e-6:
        sol.converged = False
        sol.message = f"fixed point violates power balance ({sol.max_mismatch:.2e})"
    return sol


def _net_demand(net: _Network, V, rows, p, q) -> np.ndarray:
    s_gen = np.zeros(net.N, complex)
    np.add.at(s_gen, rows, p + 1j * q)
    return net.s_const + net.s_z * np.abs(V) ** 2 - s_gen


def _control_step(q, vm, vset, kq, cap, target, is_vv, free_pv, S, opts) -> np.ndarray:
    """Damped chord step for the controlled reactive outputs.

    VV outputs whose predicted droop target leaves the capability range are
    pinned at the limit and the remaining step is re-solved, so steep droop
    curves do not flip between saturated and free on every iteration.
    """
    n = len(q)
    dvdq = S / (2.0 * vm[:, None])                # d|v_i| / d q_j
    sat = np.zeros(n, dtype=bool)
    for _ in range(n + 1):
        dq = np.zeros(n)
        dq[sat] = np.sign(target[sat]) * cap[sat] - q[sat]
        F = np.flatnonzero((is_vv & ~sat) | free_pv)
        if F.size:
            known = dvdq[np.ix_(F, np.flatnonzero(sat))] @ dq[sat]
            J = np.empty((F.size, F.size))
            rhs = np.empty(F.size)
            for a, i in enumerate(F):
                if is_vv[i]:
                    # q_i + dq_i = k_i (|v_i| + sum_j dvdq_ij dq_j - vset_i)
                    J[a] = -kq[i] * dvdq[i, F]
                    J[a, a] += 1.0
                    rhs[a] = kq[i] * (vm[i] - vset[i] + known[a]) - q[i]
                else:
                    J[a] = dvdq[i, F]
                    rhs[a] = vset[i] - vm[i] - known[a]
            dq[F] = np.linalg.solve(J, rhs)
        over = is_vv & ~sat & (np.abs(q + dq) > cap)
        if not over.any():
            break
        target = target.copy()
        target[over] = q[over] + dq[over]
        sat |= over
    damp = np.where(is_vv, opts.vv_damping, opts.pv_damping)
    # outputs that hit the limit jump straight to it
    damp[sat] = 1.0
    return damp * dq


def check_power_balance(sol: PowerFlowSolution, model: FeederModel) -> float:
    """Largest complex power mismatch over all phase-nodes.

    Line currents are recomputed from the voltages alone (``I = Z^{-1} dV``),
    so any inconsistency between voltages and injections shows up.
    """
    net = _Network(model)
    V = sol.V
    I_in = np.zeros(net.N, complex)
    I_out = np.zeros(net.N, complex)
    for bus in net.buses:
        r = net.rows[bus]
        pr = net.parent_rows[bus]
        v_up = sol.V_substation[net.sub_phase_idx[bus]] if pr is None else V[pr]
        I = np.linalg.solve(net.z[bus], v_up - V[r])
        I_in[r] += I
        if pr is not None:
            I_out[pr] += I
    rows = np.array([net.der_row[d.id] for d in model.ders], dtype=int)
    p = np.array([d.p_g for d in model.ders], dtype=float)
    q = np.array([sol.q_der[d.id] for d in model.ders], dtype=float)
    demand = _net_demand(net, V, rows, p, q)
    mismatch = V * np.conj(I_in - I_out) - demand
    return float(np.max(np.abs(mismatch))) if net.N else 0.0
