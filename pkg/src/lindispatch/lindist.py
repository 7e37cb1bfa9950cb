"""LinDist3Flow assembly with smart-inverter control modes.

Conventions
-----------
* Phase-nodes are the non-substation (bus, phase) pairs. Every phase-node is
  fed by exactly one line-phase, so line-phases share the node ordering.
* ``M`` is the node x line-phase incidence matrix: ``-1`` at the receiving
  node and the line's loss factor at the sending node (``+1`` when lossless).
  ``M^{-1}`` maps net injections ``g - l`` to receiving-end flows; sending-end
  flows are ``L M^{-1}(g - l)``, positive in the downstream direction.
* ``Z_D^p``/``Z_D^q`` are the block-diagonal LinDist3Flow coupling matrices
  with the sign convention ``Y_parent - Y_child = -(Z_D^p P + Z_D^q Q)``,
  so ``R_eq = -M0^{-T} Z_D^p L M^{-1}`` with ``M0`` the lossless incidence.
* Decision vector ``X = [t_r, Y_vv_set, q_pq, Y_pv]``; dependent vector
  ``U = [Y_vv, Y_pq, q_pv, Y_nan]`` with ``U = A_sys X + B_sys``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .feeder import PHASES, FeederModel, iter_nodes, tree_order

ALPHA = np.exp(-2j * np.pi / 3)
PHASOR = np.array([1.0, ALPHA, ALPHA**2])
COND_LIMIT = 1e12


class LinearizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseNodeIndex:
    nodes: tuple[tuple[str, str], ...]

    @property
    def N(self) -> int:
        return len(self.nodes)

    def position(self, bus: str, phase: str) -> int:
        return self._lookup[(bus, phase)]

    @cached_property
    def _lookup(self) -> dict[tuple[str, str], int]:
        return {n: i for i, n in enumerate(self.nodes)}

    def labels(self) -> list[str]:
        return [f"{b}.{p}" for b, p in self.nodes]


def build_index(model: FeederModel) -> PhaseNodeIndex:
    return PhaseNodeIndex(tuple(iter_nodes(model)))


@dataclass(frozen=True, eq=False)
class BaseModel:
    """Mode-agnostic LinDist3Flow matrices."""

    M: np.ndarray
    M_inv: np.ndarray
    R_eq: np.ndarray
    X_eq: np.ndarray
    M0: np.ndarray
    Zp: np.ndarray
    Zq: np.ndarray
    L: np.ndarray          # loss factor per line-phase (diagonal of L)
    Y0: np.ndarray         # substation squared-voltage shape seen by each node
    parent: np.ndarray     # parent node of each line-phase, -1 for the substation
    sub_phases: str
    head: np.ndarray       # (n_sub_phases, N) selector of substation line-phases

    def __iter__(self):
        # unpacks like the (M, M_inv, R_eq, X_eq) tuple
        return iter((self.M, self.M_inv, self.R_eq, self.X_eq))

    @property
    def flow(self) -> np.ndarray:
        """Sending-end flow operator ``L M^{-1}``."""
        return self.L[:, None] * self.M_inv


def coupling_blocks(z: np.ndarray, phases: str) -> tuple[np.ndarray, np.ndarray]:
    """LinDist3Flow (Z_D^p, Z_D^q) blocks for a line's present phases."""
    idx = [PHASES.index(p) for p in phases]
    a = PHASOR[idx]
    gamma = np.outer(a, a.conj())
    w = gamma * np.conj(z[np.ix_(idx, idx)])
    return -2.0 * w.real, 2.0 * w.imag


def build_base_model(model: FeederModel, index: PhaseNodeIndex) -> BaseModel:
    N = index.N
    pos = index._lookup
    _, parent_of = tree_order(model)
    sub = model.substation
    y0 = np.asarray(model.substation_y0, dtype=float)
    shape = y0 / y0[[PHASES.index(p) for p in sub.phases]].mean()

    M = np.zeros((N, N))
    M0 = np.zeros((N, N))
    Zp = np.zeros((N, N))
    Zq = np.zeros((N, N))
    L = np.ones(N)
    parent = np.full(N, -1)
    Y0 = np.zeros(N)
    head = np.zeros((len(sub.phases), N))
    for b in model.buses:
        if b.is_substation:
            continue
        par, k = parent_of[b.id]
        line = model.lines[k]
        rows = [pos[(b.id, p)] for p in b.phases]
        bp, bq = coupling_blocks(line.z(), b.phases)
        Zp[np.ix_(rows, rows)] = bp
        Zq[np.ix_(rows, rows)] = bq
        for r, ph in zip(rows, b.phases):
            lf = line.loss_factor[PHASES.index(ph)]
            L[r] = lf
            M[r, r] = -1.0
            M0[r, r] = -1.0
            if par == sub.id:
                head[sub.phases.index(ph), r] = 1.0
            else:
                pr = pos[(par, ph)]
                parent[r] = pr
                M[pr, r] = lf
                M0[pr, r] = 1.0
    try:
        M_inv = np.linalg.inv(M)
        M0_invT = np.linalg.inv(M0).T
    except np.linalg.LinAlgError as exc:
        raise LinearizationError("incidence matrix is singular; feeder is not radial") from exc
    # substation voltage enters through lines leaving the substation
    s = np.zeros(N)
    for i, (bus, ph) in enumerate(index.nodes):
        if parent[i] < 0:
            s[i] = shape[PHASES.index(ph)]
    Y0 = -M0_invT @ s
    flow = L[:, None] * M_inv
    R_eq = -M0_invT @ Zp @ flow
    X_eq = -M0_invT @ Zq @ flow
    return BaseModel(M, M_inv, R_eq, X_eq, M0, Zp, Zq, L, Y0, parent, sub.phases, head)


@dataclass(frozen=True, eq=False)
class ModePartition:
    ID_vv: np.ndarray
    ID_pq: np.ndarray
    ID_pv: np.ndarray
    ID_nan: np.ndarray
    vv: tuple[str, ...]    # DER ids in column order
    pq: tuple[str, ...]
    pv: tuple[str, ...]

    @property
    def n_vv(self) -> int:
        return self.ID_vv.shape[1]

    @property
    def n_pq(self) -> int:
        return self.ID_pq.shape[1]

    @property
    def n_pv(self) -> int:
        return self.ID_pv.shape[1]

    @property
    def n_nan(self) -> int:
        return self.ID_nan.shape[1]

    @property
    def der_ids(self) -> tuple[str, ...]:
        return self.vv + self.pq + self.pv


def build_partition(model: FeederModel, index: PhaseNodeIndex) -> ModePartition:
    pos = index._lookup
    owner: dict[int, str] = {}
    groups: dict[str, list[tuple[int, str]]] = {"VV": [], "PQ": [], "PV": []}
    for d in model.ders:
        i = pos[(d.bus, d.phase)]
        if i in owner:
            raise LinearizationError(
                f"DERs {owner[i]} and {d.id} share phase-node {d.bus}.{d.phase}")
        owner[i] = d.id
        groups[d.mode].append((i, d.id))

    def ident(cols: list[int]) -> np.ndarray:
        m = np.zeros((index.N, len(cols)))
        m[cols, np.arange(len(cols))] = 1.0
        return m

    for g in groups.values():
        g.sort()
    nan = [i for i in range(index.N) if i not in owner]
    return ModePartition(
        ident([i for i, _ in groups["VV"]]), ident([i for i, _ in groups["PQ"]]),
        ident([i for i, _ in groups["PV"]]), ident(nan),
        tuple(d for _, d in groups["VV"]), tuple(d for _, d in groups["PQ"]),
        tuple(d for _, d in groups["PV"]),
    )


@dataclass(frozen=True, eq=False)
class LinearSystem:
    index: PhaseNodeIndex
    partition: ModePartition
    base: BaseModel
    K: np.ndarray
    A_sys: np.ndarray
    B_sys: np.ndarray
    R_star: dict[str, np.ndarray]
    X_star: dict[str, np.ndarray]
    p_g: np.ndarray               # per-node DER active output
    p_load: np.ndarray            # constant-power share a0 * p_l per node
    q_load: np.ndarray            # constant-power share a0 * q_l per node
    p_load_z: np.ndarray          # constant-impedance share (1 - a0) * p_l
    q_load_z: np.ndarray
    k_half: np.ndarray            # k_q / 2 for VV DERs, column order
    q_cap: dict[str, float]       # sqrt(S^2 - p_g^2) per DER id
    A_Qflow: np.ndarray | None = None
    B_Qflow: np.ndarray | None = None
    qflow_rows: np.ndarray | None = None   # line-phase (node) index of each Qflow row
    W1: np.ndarray | None = None
    W2: np.ndarray | None = None
    W3: np.ndarray | None = None
    d: float | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    # -- layout of X -------------------------------------------------------
    @property
    def n_x(self) -> int:
        p = self.partition
        return 1 + p.n_vv + p.n_pq + p.n_pv

    @property
    def x_slices(self) -> tuple[slice, slice, slice, slice]:
        p = self.partition
        a = 1 + p.n_vv
        b = a + p.n_pq
        return slice(0, 1), slice(1, a), slice(a, b), slice(b, b + p.n_pv)

    @property
    def u_slices(self) -> tuple[slice, slice, slice, slice]:
        p = self.partition
        a, b, c = p.n_vv, p.n_vv + p.n_pq, p.n_vv + p.n_pq + p.n_pv
        return slice(0, a), slice(a, b), slice(b, c), slice(c, self.index.N)

    def block(self, i: int, j: int) -> np.ndarray:
        """Block A_ij of A_sys (1-based, rows vv/pq/pv/nan, cols t_r/yset/qpq/ypv)."""
        return self.A_sys[self.u_slices[i - 1], self.x_slices[j - 1]]

    def b(self, i: int) -> np.ndarray:
        return self.B_sys[self.u_slices[i - 1]]

    def x_labels(self) -> list[str]:
        p = self.partition
        return (["t_r"] + [f"y_set[{d}]" for d in p.vv] + [f"q[{d}]" for d in p.pq]
                + [f"y_pv[{d}]" for d in p.pv])

    # -- affine maps over X ------------------------------------------------
    def selector(self, part: int) -> np.ndarray:
        """Rows of the identity picking one part of X (0=t_r .. 3=Y_pv)."""
        return np.eye(self.n_x)[self.x_slices[part]]

    @property
    def node_voltage_map(self) -> tuple[np.ndarray, np.ndarray]:
        """(A, b) with squared voltage at every phase-node = A X + b (node order)."""
        p = self.partition
        u = self.u_slices
        A = (p.ID_vv @ self.A_sys[u[0]] + p.ID_pq @ self.A_sys[u[1]]
             + p.ID_pv @ self.selector(3) + p.ID_nan @ self.A_sys[u[3]])
        b = p.ID_vv @ self.B_sys[u[0]] + p.ID_pq @ self.B_sys[u[1]] + p.ID_nan @ self.B_sys[u[3]]
        return A, b

    @property
    def A_v(self) -> np.ndarray:
        u = self.u_slices
        return np.vstack([self.A_sys[u[0]], self.A_sys[u[1]], self.A_sys[u[3]]])

    @property
    def B_v(self) -> np.ndarray:
        u = self.u_slices
        return np.concatenate([self.B_sys[u[0]], self.B_sys[u[1]], self.B_sys[u[3]]])

    @property
    def q_vv_map(self) -> tuple[np.ndarray, np.ndarray]:
        kh = self.k_half[:, None]
        return kh * (self.A_sys[self.u_slices[0]] - self.selector(1)), self.k_half * self.b(1)

    @property
    def q_pv_map(self) -> tuple[np.ndarray, np.ndarray]:
        return self.A_sys[self.u_slices[2]], self.b(3)

    @property
    def q_gen_map(self) -> tuple[np.ndarray, np.ndarray]:
        """(A, b) with DER reactive injection at every phase-node = A X + b."""
        p = self.partition
        Avv, bvv = self.q_vv_map
        Apv, bpv = self.q_pv_map
        A = p.ID_vv @ Avv + p.ID_pq @ self.selector(2) + p.ID_pv @ Apv
        return A, p.ID_vv @ bvv + p.ID_pv @ bpv

    @property
    def head_rows(self) -> np.ndarray:
        """(n_sub_phases, n_rows) selector of substation rows in A_Qflow."""
        return self.base.head[:, self.qflow_rows]

    def substation_q_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-phase substation reactive import ``(A, b)`` over X."""
        H = self.head_rows
        return H @ self.A_Qflow, H @ self.B_Qflow

    def total_q_map(self) -> tuple[np.ndarray, np.ndarray]:
        A, b = self.substation_q_map()
        return A.sum(axis=0), float(b.sum())

    def evaluate(self, X: np.ndarray) -> dict[str, np.ndarray]:
        """All derived quantities at a decision vector."""
        X = np.asarray(X, dtype=float)
        Av, bv = self.node_voltage_map
        Aq, bq = self.q_gen_map
        Avv, bvv = self.q_vv_map
        Apv, bpv = self.q_pv_map
        As, bs = self.substation_q_map()
        return {
            "U": self.A_sys @ X + self.B_sys,
            "Y": Av @ X + bv,
            "q_node": Aq @ X + bq,
            "q_vv": Avv @ X + bvv,
            "q_pq": X[self.x_slices[2]],
            "q_pv": Apv @ X + bpv,
            "q_flow": self.A_Qflow @ X + self.B_Qflow,
            "q_substation": As @ X + bs,
        }

    def der_q(self, X: np.ndarray) -> dict[str, float]:
        ev = self.evaluate(X)
        p = self.partition
        out = dict(zip(p.vv, ev["q_vv"]))
        out.update(zip(p.pq, ev["q_pq"]))
        out.update(zip(p.pv, ev["q_pv"]))
        return {k: float(v) for k, v in out.items()}


def _node_vectors(model: FeederModel, index: PhaseNodeIndex):
    pos = index._lookup
    N = index.N
    pl, ql, plz, qlz, pg = (np.zeros(N) for _ in range(5))
    for ld in model.loads:
        i = pos[(ld.bus, ld.phase)]
        pl[i] += ld.a0 * ld.p
        ql[i] += ld.a0 * ld.q
        plz[i] += (1.0 - ld.a0) * ld.p
        qlz[i] += (1.0 - ld.a0) * ld.q
    for d in model.ders:
        pg[pos[(d.bus, d.phase)]] += d.p_g
    return pl, ql, plz, qlz, pg


def load_correction(base: BaseModel, p_load_z: np.ndarray, q_load_z: np.ndarray) -> np.ndarray:
    """Voltage-dependence matrix K for constant-impedance load shares.

    A constant-impedance share draws ``(1-a0) s_l * Y``; moving it to the left
    of the linear model gives ``K = I + R_eq diag((1-a0) p_l) + X_eq diag((1-a0) q_l)``,
    which is the identity for pure constant-power loads.
    """
    N = len(p_load_z)
    return np.eye(N) + base.R_eq * p_load_z[None, :] + base.X_eq * q_load_z[None, :]


def assemble_system(model: FeederModel, index: PhaseNodeIndex, partition: ModePartition,
                    base: BaseModel | None = None, K: np.ndarray | None = None) -> LinearSystem:
    """Eliminate the droop law and PV voltages into ``U = A_sys X + B_sys``."""
    base = base if base is not None else build_base_model(model, index)
    pl, ql, plz, qlz, pg = _node_vectors(model, index)
    N = index.N
    if K is None:
        K = load_correction(base, plz, qlz)
    K = np.asarray(K, dtype=float)
    if K.shape != (N, N):
        raise LinearizationError(f"K must be {N}x{N}, got {K.shape}")
    ders = {d.id: d for d in model.ders}
    P = partition
    k_half = np.array([ders[i].k_q / 2.0 for i in P.vv], dtype=float)
    R, Xe = base.R_eq, base.X_eq
    XDk = Xe @ P.ID_vv * k_half[None, :]
    Kt = K - XDk @ P.ID_vv.T

    G = np.hstack([Kt @ P.ID_vv, Kt @ P.ID_pq, -Xe @ P.ID_pv, Kt @ P.ID_nan])
    H = np.hstack([base.Y0[:, None], -XDk, Xe @ P.ID_pq, -Kt @ P.ID_pv])
    h = R @ (pg - pl) - Xe @ ql
    cond = np.linalg.cond(G) if N else 1.0
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise LinearizationError(
            f"elimination system is singular (condition number {cond:.3g}); "
            "check droop gains against network sensitivity and PV placement")
    A_sys = np.linalg.solve(G, H)
    B_sys = np.linalg.solve(G, h)

    R_star = {m: R @ getattr(P, f"ID_{m}") for m in ("vv", "pq", "pv", "nan")}
    X_star = {m: Xe @ getattr(P, f"ID_{m}") for m in ("vv", "pq", "pv", "nan")}
    R_star["r"] = np.hstack([R_star[m] for m in ("vv", "pq", "pv", "nan")])
    X_star["r"] = np.hstack([X_star[m] for m in ("vv", "pq", "pv", "nan")])
    q_cap = {d.id: d.q_capability for d in model.ders}
    return LinearSystem(index, partition, base, K, A_sys, B_sys, R_star, X_star,
                        pg, pl, ql, plz, qlz, k_half, q_cap)


def assemble_qflow(sys: LinearSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Line-phase reactive flows ``A_Qflow X + B_Qflow``, substation rows first.

    Returns ``(A_Qflow, B_Qflow, rows)`` where ``rows[k]`` is the line-phase
    (equivalently receiving node) index of row ``k``.
    """
    base = sys.base
    Aq, bq = sys.q_gen_map
    Av, bv = sys.node_voltage_map
    A_net = Aq - sys.q_load_z[:, None] * Av
    b_net = bq - sys.q_load - sys.q_load_z * bv
    F = base.flow
    is_head = base.parent < 0
    rows = np.concatenate([np.flatnonzero(is_head), np.flatnonzero(~is_head)])
    return (F @ A_net)[rows], (F @ b_net)[rows], rows


def _sensitivities(sys: LinearSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    A_t, _ = sys.total_q_map()
    s = sys.x_slices
    P = sys.partition
    s_vv = np.zeros(0)
    s_pv = np.zeros(0)
    if P.n_vv:
        J = sys.k_half[:, None] * (sys.block(1, 2) - np.eye(P.n_vv))
        if np.linalg.cond(J) > COND_LIMIT:
            raise LinearizationError("block (k/2)(A_12 - I) is singular; VV droop gains are degenerate")
        s_vv = np.linalg.solve(J.T, A_t[s[1]])
    if P.n_pv:
        A34 = sys.block(3, 4)
        if np.linalg.cond(A34) > COND_LIMIT:
            raise LinearizationError("block A_34 is singular; PV DERs cannot regulate independently")
        s_pv = np.linalg.solve(A34.T, A_t[s[3]])
    return s_vv, A_t[s[2]].copy(), s_pv


def compute_weights(sys: LinearSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Sensitivity weights ``W_i = 1 - (dQ_t/dq_i) / d`` per control mode.

    ``dQ_t/dq`` is the change of total substation reactive import per unit of
    reactive output at each DER, and ``d`` is their sum over all DERs.
    """
    if sys.A_Qflow is None:
        raise LinearizationError("assemble_qflow must run before compute_weights")
    s_vv, s_pq, s_pv = _sensitivities(sys)
    d = float(s_vv.sum() + s_pq.sum() + s_pv.sum())
    if d == 0.0:
        return s_vv, s_pq, s_pv, 0.0
    return 1.0 - s_vv / d, 1.0 - s_pq / d, 1.0 - s_pv / d, d


def linearize(model: FeederModel, K: np.ndarray | None = None) -> LinearSystem:
    """Full assembly pipeline: index, base model, partition, system, flows, weights."""
    index = build_index(model)
    base = build_base_model(model, index)
    part = build_partition(model, index)
    sys = assemble_system(model, index, part, base=base, K=K)
    A_q, B_q, rows = assemble_qflow(sys)
    sys = replace(sys, A_Qflow=A_q, B_Qflow=B_q, qflow_rows=rows)
    W1, W2, W3, d = compute_weights(sys)
    return replace(sys, W1=W1, W2=W2, W3=W3, d=d)


def system_matrices(sys: LinearSystem) -> dict[str, np.ndarray]:
    base = sys.base
    mats = {
        "M": base.M, "M_inv": base.M_inv, "R_eq": base.R_eq, "X_eq": base.X_eq,
        "Z_D_p": base.Zp, "Z_D_q": base.Zq, "L": np.diag(base.L), "Y0": base.Y0, "K": sys.K,
        "ID_vv": sys.partition.ID_vv, "ID_pq": sys.partition.ID_pq,
        "ID_pv": sys.partition.ID_pv, "ID_nan": sys.partition.ID_nan,
        "R_r_eq": sys.R_star["r"], "X_r_eq": sys.X_star["r"],
        "A_sys": sys.A_sys, "B_sys": sys.B_sys, "A_v": sys.A_v, "B_v": sys.B_v,
    }
    for m in ("vv", "pq", "pv", "nan"):
        mats[f"R_{m}_eq"] = sys.R_star[m]
        mats[f"X_{m}_eq"] = sys.X_star[m]
    if sys.A_Qflow is not None:
        mats["A_Qflow"] = sys.A_Qflow
        mats["B_Qflow"] = sys.B_Qflow
    if sys.W1 is not None:
        mats.update(W1=sys.W1, W2=sys.W2, W3=sys.W3, d=np.array([sys.d]))
    return mats


def dump_system(sys: LinearSystem, path: str | Path | None = None) -> dict:
    """Named dense matrices (row-major) plus the phase-node manifest."""
    mats = system_matrices(sys)
    doc = {
        "index": [list(n) for n in sys.index.nodes],
        "N": sys.index.N,
        "x_labels": sys.x_labels(),
        "qflow_rows": [] if sys.qflow_rows is None else [sys.index.labels()[i] for i in sys.qflow_rows],
        "manifest": sorted(mats),
        "matrices": {
            k: {"shape": list(np.atleast_1d(v).shape) if v.ndim else [1],
                "data": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in sorted(mats.items())
        },
    }
    if path is not None:
        Path(path).write_text(json.dumps(doc) + "\n")
    return doc
