"""Feeder data model, validation and JSON ingestion.

All quantities held by the model are per-unit on a per-phase base:
``base_mva`` is the per-phase apparent power base and ``base_kv`` the
line-to-neutral voltage base, so ``z_base = base_kv**2 / base_mva``.
A feeder file may be written in physical units (``"units": "si"``: ohms,
kW, kvar, kVA) and is converted on load.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

PHASES = "abc"
MODES = ("PQ", "PV", "VV")

Block = tuple[tuple[float, float, float], ...]


class FeederError(ValueError):
    """Base class for feeder ingestion problems."""


class FeederParseError(FeederError):
    pass


class FeederValidationError(FeederError):
    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


@dataclass(frozen=True)
class Diagnostic:
    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.element}: {self.message}"


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str
    is_substation: bool = False


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: Block
    x: Block
    loss_factor: tuple[float, float, float] = (1.0, 1.0, 1.0)
    q_max: tuple[float, float, float] = (math.inf, math.inf, math.inf)

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"

    def z(self) -> np.ndarray:
        """Complex 3x3 series impedance block."""
        return np.asarray(self.r, dtype=float) + 1j * np.asarray(self.x, dtype=float)


@dataclass(frozen=True)
class Load:
    bus: str
    phase: str
    p: float
    q: float
    a0: float = 1.0


@dataclass(frozen=True)
class DerUnit:
    id: str
    bus: str
    phase: str
    mode: str
    p_g: float
    s_rating: float
    k_q: float | None = None
    q_fixed: float = 0.0
    y_set: float = 1.0

    @property
    def q_capability(self) -> float:
        """Reactive headroom sqrt(S^2 - p^2); NaN when p exceeds the rating."""
        rad = self.s_rating**2 - self.p_g**2
        return math.sqrt(rad) if rad >= 0 else math.nan


@dataclass(frozen=True)
class VppCurve:
    K_q: float
    Y_set: float = 1.0


@dataclass(frozen=True)
class FeederModel:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...] = ()
    ders: tuple[DerUnit, ...] = ()
    vpp: VppCurve | None = None
    substation_y0: tuple[float, float, float] = (1.0, 1.0, 1.0)
    base_mva: float = 1.0
    base_kv: float = 1.0
    name: str = ""
    manifest: dict[str, Any] = field(default_factory=dict, compare=False)
    scenarios: dict[str, dict[str, str]] = field(default_factory=dict, compare=False)

    @property
    def substation(self) -> Bus:
        return next(b for b in self.buses if b.is_substation)

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def with_modes(self, modes: dict[str, str]) -> "FeederModel":
        """Copy of the model with DER modes replaced (keys are DER ids)."""
        ders = tuple(replace(d, mode=modes.get(d.id, d.mode)) for d in self.ders)
        return replace(self, ders=ders)


def default_droop_gain(p_g: float, s_rating: float, dv: float = 0.1) -> float:
    """Droop gain that reaches full reactive capability ``dv`` below the setpoint."""
    cap = math.sqrt(max(s_rating**2 - p_g**2, 0.0))
    return -cap / dv if cap > 0 else -1.0 / dv


# --------------------------------------------------------------------------- #
# topology helpers

def tree_order(model: FeederModel) -> tuple[list[str], dict[str, tuple[str, int]]]:
    """Breadth-first order from the substation and a parent map.

    Returns ``(order, parent)`` where ``parent[bus] = (parent_bus, line_idx)``.
    Buses unreachable from the substation are absent from ``order``.
    """
    adj: dict[str, list[tuple[str, int]]] = {b.id: [] for b in model.buses}
    for k, ln in enumerate(model.lines):
        if ln.from_bus in adj and ln.to_bus in adj:
            adj[ln.from_bus].append((ln.to_bus, k))
            adj[ln.to_bus].append((ln.from_bus, k))
    root = model.substation.id
    order = [root]
    parent: dict[str, tuple[str, int]] = {}
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, k in adj[u]:
            if v not in seen:
                seen.add(v)
                parent[v] = (u, k)
                order.append(v)
                queue.append(v)
    return order, parent


def find_cycle(model: FeederModel) -> list[str] | None:
    """Bus ids along one cycle of the line graph, or None if acyclic."""
    adj: dict[str, list[tuple[str, int]]] = {b.id: [] for b in model.buses}
    for k, ln in enumerate(model.lines):
        if ln.from_bus in adj and ln.to_bus in adj:
            adj[ln.from_bus].append((ln.to_bus, k))
            adj[ln.to_bus].append((ln.from_bus, k))
    parent: dict[str, tuple[str | None, int]] = {}
    for start in adj:
        if start in parent:
            continue
        parent[start] = (None, -1)
        stack = [start]
        while stack:
            u = stack.pop()
            for v, k in adj[u]:
                if k == parent[u][1]:
                    continue
                if v in parent:
                    # walk both ends back to their common ancestor
                    path_u, path_v = [u], [v]
                    anc_u = {u}
                    w: str | None = u
                    while parent[w][0] is not None:
                        w = parent[w][0]
                        path_u.append(w)
                        anc_u.add(w)
                    w = v
                    while w not in anc_u:
                        w = parent[w][0]
                        path_v.append(w)
                    meet = path_v[-1]
                    cyc = path_u[: path_u.index(meet) + 1]
                    return cyc + list(reversed(path_v[:-1]))
                parent[v] = (u, k)
                stack.append(v)
    return None


# --------------------------------------------------------------------------- #
# validation

def _block_support(block: Block) -> set[str]:
    sup = set()
    for i in range(3):
        for j in range(3):
            if block[i][j] != 0.0:
                sup.add(PHASES[i])
                sup.add(PHASES[j])
    return sup


def validate_feeder(model: FeederModel) -> list[Diagnostic]:
    """Check every model invariant; returns one diagnostic per violation."""
    diags: list[Diagnostic] = []
    add = lambda code, el, msg: diags.append(Diagnostic(code, el, msg))  # noqa: E731

    ids = [b.id for b in model.buses]
    phases = {}
    for b in model.buses:
        if ids.count(b.id) > 1 and b.id not in phases:
            add("duplicate", f"bus {b.id}", "bus id appears more than once")
        if not b.phases or any(p not in PHASES for p in b.phases):
            add("phase", f"bus {b.id}", f"invalid phase set {b.phases!r}")
        phases[b.id] = set(b.phases)
    n_sub = sum(b.is_substation for b in model.buses)
    if n_sub != 1:
        add("substation", "buses", f"expected exactly one substation bus, found {n_sub}")

    for ln in model.lines:
        el = f"line {ln.name}"
        for end in (ln.from_bus, ln.to_bus):
            if end not in phases:
                add("reference", el, f"unknown bus {end!r}")
        if ln.from_bus not in phases or ln.to_bus not in phases:
            continue
        common = phases[ln.from_bus] & phases[ln.to_bus]
        if not (_block_support(ln.r) | _block_support(ln.x)) <= common:
            add("phase", el, "impedance entries outside the shared phase set")
        if any(f <= 0 for f in ln.loss_factor):
            add("loss_factor", el, "loss factors must be positive")
        if any(q < 0 for q in ln.q_max):
            add("q_max", el, "negative flow limit")

    if n_sub == 1 and not any(d.code == "reference" for d in diags):
        cyc = find_cycle(model)
        if cyc is not None:
            add("non-radial", "lines", "cycle through buses " + " -> ".join(cyc))
        order, parent = tree_order(model)
        missing = [b for b in ids if b not in set(order)]
        if missing:
            add("non-radial", "buses", "not connected to the substation: " + ", ".join(missing))
        if cyc is None and len(model.lines) != len(model.buses) - 1 and not missing:
            add("non-radial", "lines", "parallel lines between buses")
        for child, (par, k) in parent.items():
            if not phases[child] <= phases[par]:
                add("phase", f"bus {child}",
                    f"phases {''.join(sorted(phases[child]))} not fed by parent {par}")
            ln = model.lines[k]
            z = np.abs(ln.z())
            for ph in phases[child]:
                i = PHASES.index(ph)
                if z[i, i] == 0.0:
                    add("phase", f"line {ln.name}", f"zero self-impedance on phase {ph}")

    for i, ld in enumerate(model.loads):
        el = f"load #{i} at {ld.bus}.{ld.phase}"
        if ld.bus not in phases or ld.phase not in phases[ld.bus]:
            add("reference", el, "load references a missing bus/phase")
        if not 0.0 <= ld.a0 <= 1.0:
            add("a0", el, "constant-power fraction must lie in [0, 1]")

    der_ids = [d.id for d in model.ders]
    seen_nodes: dict[tuple[str, str], str] = {}
    for d in model.ders:
        el = f"der {d.id}"
        if der_ids.count(d.id) > 1:
            add("duplicate", el, "DER id appears more than once")
        if d.bus not in phases or d.phase not in phases[d.bus]:
            add("reference", el, f"DER references missing node {d.bus}.{d.phase}")
        elif (d.bus, d.phase) in seen_nodes:
            add("duplicate", el, f"shares node {d.bus}.{d.phase} with der {seen_nodes[(d.bus, d.phase)]}")
        else:
            seen_nodes[(d.bus, d.phase)] = d.id
        if d.mode not in MODES:
            add("mode", el, f"unknown mode {d.mode!r}")
        if abs(d.p_g) > d.s_rating:
            add("capability", el, f"|p_g|={abs(d.p_g):g} exceeds rating {d.s_rating:g}")
        if d.mode == "VV" and (d.k_q is None or not math.isfinite(d.k_q) or d.k_q == 0):
            add("droop", el, "VV mode needs a finite nonzero droop gain")

    if model.vpp is not None and not math.isfinite(model.vpp.K_q):
        add("vpp", "vpp", "K_q must be finite")
    if any(y <= 0 for y in model.substation_y0):
        add("substation", "substation", "squared voltage must be positive")
    return diags


# --------------------------------------------------------------------------- #
# file format

def _block(raw: Any, scale: float, where: str) -> Block:
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (3, 3):
        raise FeederParseError(f"{where}: expected a 3x3 block, got shape {arr.shape}")
    return tuple(tuple(float(v) * scale for v in row) for row in arr)  # type: ignore[return-value]


def _triple(raw: Any, default: float, where: str) -> tuple[float, float, float]:
    if raw is None:
        return (default, default, default)
    if isinstance(raw, (int, float)):
        return (float(raw),) * 3  # type: ignore[return-value]
    vals = [math.inf if v is None else float(v) for v in raw]
    if len(vals) != 3:
        raise FeederParseError(f"{where}: expected three per-phase values")
    return tuple(vals)  # type: ignore[return-value]


def _phases(raw: Any) -> str:
    s = ("".join(raw) if isinstance(raw, (list, tuple)) else str(raw)).lower()
    if set(s) <= set(PHASES):
        return "".join(p for p in PHASES if p in s)
    return s  # left as-is so validation reports it


def parse_feeder(doc: dict[str, Any]) -> FeederModel:
    """Build a FeederModel from a decoded feeder document (no validation)."""
    try:
        bases = doc.get("bases", {})
        base_mva = float(bases.get("base_mva", 1.0))
        base_kv = float(bases.get("base_kv", 1.0))
        units = bases.get("units", "pu")
        if units not in ("pu", "si"):
            raise FeederParseError(f"bases.units must be 'pu' or 'si', got {units!r}")
        si = units == "si"
        z_scale = 1.0 / (base_kv**2 / base_mva) if si else 1.0
        s_scale = 1.0 / (1000.0 * base_mva) if si else 1.0

        buses = tuple(
            Bus(str(b["id"]), _phases(b["phases"]), bool(b.get("is_substation", False)))
            for b in doc["buses"]
        )
        lines = []
        for raw in doc["lines"]:
            where = f"line {raw.get('from')}-{raw.get('to')}"
            q_max = _triple(raw.get("q_max"), math.inf, where)
            lines.append(Line(
                str(raw["from"]), str(raw["to"]),
                _block(raw["r"], z_scale, where), _block(raw["x"], z_scale, where),
                _triple(raw.get("loss_factor"), 1.0, where),
                tuple(q * s_scale for q in q_max),  # type: ignore[arg-type]
            ))
        loads = tuple(
            Load(str(ld["bus"]), str(ld["phase"]), float(ld["p"]) * s_scale,
                 float(ld["q"]) * s_scale, float(ld.get("a0", 1.0)))
            for ld in doc.get("loads", [])
        )
        ders = []
        for d in doc.get("ders", []):
            p_g = float(d.get("p_g", 0.0)) * s_scale
            s_rating = float(d["s_rating"]) * s_scale
            k_q = d.get("k_q")
            ders.append(DerUnit(
                str(d["id"]), str(d["bus"]), str(d["phase"]), str(d.get("mode", "PQ")).upper(),
                p_g, s_rating,
                default_droop_gain(p_g, s_rating) if k_q is None else float(k_q),
                float(d.get("q_fixed", 0.0)) * s_scale, float(d.get("y_set", 1.0)),
            ))
        vpp_raw = doc.get("vpp")
        vpp = None if vpp_raw is None else VppCurve(float(vpp_raw["K_q"]), float(vpp_raw.get("Y_set", 1.0)))
        sub = doc.get("substation", {})
        y0 = _triple(sub.get("y0"), 1.0, "substation")
        scenarios = {
            str(k): {str(a): str(m).upper() for a, m in v.items()}
            for k, v in doc.get("scenarios", {}).items()
        }
    except FeederParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FeederParseError(f"malformed feeder document: {exc!r}") from exc
    return FeederModel(
        buses, tuple(lines), loads, tuple(ders), vpp, y0, base_mva, base_kv,
        name=str(doc.get("name", "")), manifest=dict(doc.get("manifest", {})),
        scenarios=scenarios,
    )


def load_feeder(path: str | Path) -> FeederModel:
    """Read, parse and validate a feeder file.

    Raises FeederParseError for unreadable/malformed files and
    FeederValidationError (carrying the diagnostics) for invalid models.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FeederParseError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FeederParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FeederParseError(f"{path}: top level must be an object")
    model = parse_feeder(doc)
    diags = validate_feeder(model)
    if diags:
        raise FeederValidationError(diags)
    return model


def _num(v: float) -> float | None:
    return None if math.isinf(v) else v


def feeder_to_dict(model: FeederModel) -> dict[str, Any]:
    """Serialise a model to the per-unit feeder document."""
    doc: dict[str, Any] = {}
    if model.name:
        doc["name"] = model.name
    doc["bases"] = {"base_mva": model.base_mva, "base_kv": model.base_kv, "units": "pu"}
    doc["substation"] = {"y0": list(model.substation_y0)}
    doc["buses"] = [
        {"id": b.id, "phases": b.phases, **({"is_substation": True} if b.is_substation else {})}
        for b in model.buses
    ]
    doc["lines"] = [
        {"from": ln.from_bus, "to": ln.to_bus,
         "r": [list(r) for r in ln.r], "x": [list(r) for r in ln.x],
         "loss_factor": list(ln.loss_factor), "q_max": [_num(q) for q in ln.q_max]}
        for ln in model.lines
    ]
    doc["loads"] = [
        {"bus": ld.bus, "phase": ld.phase, "p": ld.p, "q": ld.q, "a0": ld.a0}
        for ld in model.loads
    ]
    doc["ders"] = [
        {"id": d.id, "bus": d.bus, "phase": d.phase, "mode": d.mode, "p_g": d.p_g,
         "s_rating": d.s_rating, "k_q": d.k_q, "q_fixed": d.q_fixed, "y_set": d.y_set}
        for d in model.ders
    ]
    doc["vpp"] = None if model.vpp is None else {"K_q": model.vpp.K_q, "Y_set": model.vpp.Y_set}
    if model.scenarios:
        doc["scenarios"] = model.scenarios
    if model.manifest:
        doc["manifest"] = model.manifest
    return doc


def save_feeder(model: FeederModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(model), indent=1) + "\n")


def iter_nodes(model: FeederModel) -> Iterable[tuple[str, str]]:
    """Non-substation (bus, phase) pairs in file order, phases a<b<c."""
    for b in model.buses:
        if not b.is_substation:
            for ph in PHASES:
                if ph in b.phases:
                    yield b.id, ph
