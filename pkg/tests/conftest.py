import math

import numpy as np
import pytest

from lindispatch.feeder import parse_feeder
from lindispatch.fixtures import resolve_feeder, synthetic_feeder

ALPHA = np.exp(-2j * np.pi / 3)
PHASE_VEC = np.array([1.0, ALPHA, ALPHA**2])


def diag_block(v, phases="a"):
    m = [[0.0] * 3 for _ in range(3)]
    for p in phases:
        i = "abc".index(p)
        m[i][i] = v
    return m


def two_bus_doc(r=0.01, x=0.02, p=0.1, q=0.05, phases="a", ders=(), vpp=None, y0=1.0):
    """Substation plus one load bus; loads of (p, q) on every phase."""
    return {
        "bases": {"base_mva": 1.0, "base_kv": 1.0},
        "substation": {"y0": [y0] * 3},
        "buses": [{"id": "s", "phases": "abc", "is_substation": True}, {"id": "n1", "phases": phases}],
        "lines": [{"from": "s", "to": "n1", "r": diag_block(r, phases), "x": diag_block(x, phases)}],
        "loads": [{"bus": "n1", "phase": ph, "p": p, "q": q} for ph in phases if p or q],
        "ders": list(ders),
        "vpp": vpp,
    }


def two_bus(**kw):
    return parse_feeder(two_bus_doc(**kw))


def random_feeder(seed, n_max=15, modes=("PQ", "PV", "VV"), **kw):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    return synthetic_feeder(n, rng, modes=modes, **kw)


def reference_lindistflow(model, t_r, q_gen):
    """Independent lossless LinDist3Flow recursion.

    Walks the tree from the substation: Y_child = Y_parent - 2 Re(G) P + 2 Im(G) Q
    with G = gamma * conj(Z) and (P, Q) the downstream net demand on the line.
    Loads are constant power; ``q_gen`` maps (bus, phase) to DER reactive output.
    """
    gamma = np.outer(PHASE_VEC, PHASE_VEC.conj())
    phases = {b.id: b.phases for b in model.buses}
    children = {b.id: [] for b in model.buses}
    for k, ln in enumerate(model.lines):
        children[ln.from_bus].append((ln.to_bus, k))
        children[ln.to_bus].append((ln.from_bus, k))
    sub = model.substation.id
    order, parent = [sub], {}
    for bus in order:
        for nb, k in children[bus]:
            if nb not in parent and nb != sub:
                parent[nb] = (bus, k)
                order.append(nb)
    demand = {b: np.zeros(3, complex) for b in phases}
    for ld in model.loads:
        demand[ld.bus]["abc".index(ld.phase)] += complex(ld.p, ld.q)
    for d in model.ders:
        demand[d.bus]["abc".index(d.phase)] -= complex(d.p_g, q_gen.get((d.bus, d.phase), 0.0))
    flow = {b: demand[b].copy() for b in phases}
    for bus in reversed(order[1:]):
        flow[parent[bus][0]] += flow[bus]
    Y = {sub: np.full(3, t_r)}
    for bus in order[1:]:
        par, k = parent[bus]
        G = gamma * np.conj(model.lines[k].z())
        mask = np.array([p in phases[bus] for p in "abc"], dtype=float)
        P, Q = flow[bus].real * mask, flow[bus].imag * mask
        Y[bus] = Y[par] - 2 * G.real @ P + 2 * G.imag @ Q
    out = []
    for b in model.buses:
        if not b.is_substation:
            out += [Y[b.id]["abc".index(p)] for p in b.phases]
    return np.array(out)


@pytest.fixture(scope="session")
def feeder13():
    return resolve_feeder("fixture13")


@pytest.fixture(scope="session")
def feeder123():
    return resolve_feeder("fixture123")


@pytest.fixture(scope="session")
def feeder2():
    return resolve_feeder("fixture2")


def cap(d):
    return math.sqrt(d.s_rating**2 - d.p_g**2)
