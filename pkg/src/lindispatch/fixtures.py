"""Bundled feeders and a seeded synthetic feeder generator.

``fixture13`` follows the IEEE 13-node topology and phasing with line
configurations 601-607 (ohm/mile) and the published spot loads; line lengths
and DER ratings are authored. ``fixture123`` is a generated radial feeder of
IEEE-123 scale. Shipped JSON files are regenerated with ``python -m
lindispatch.fixtures``.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .feeder import PHASES, FeederModel, feeder_to_dict, load_feeder, parse_feeder

BUILTIN = {"fixture2": "feeder2.json", "fixture13": "feeder13.json", "fixture123": "feeder123.json"}

# ohm per mile, IEEE 13-node line configurations
_CONFIGS = {
    "601": ("abc", [[0.3465 + 1.0179j, 0.1560 + 0.5017j, 0.1580 + 0.4236j],
                    [0.1560 + 0.5017j, 0.3375 + 1.0478j, 0.1535 + 0.3849j],
                    [0.1580 + 0.4236j, 0.1535 + 0.3849j, 0.3414 + 1.0348j]]),
    "602": ("abc", [[0.7526 + 1.1814j, 0.1580 + 0.4236j, 0.1560 + 0.5017j],
                    [0.1580 + 0.4236j, 0.7475 + 1.1983j, 0.1535 + 0.3849j],
                    [0.1560 + 0.5017j, 0.1535 + 0.3849j, 0.7436 + 1.2112j]]),
    "603": ("bc", [[1.3294 + 1.3471j, 0.2066 + 0.4591j],
                   [0.2066 + 0.4591j, 1.3238 + 1.3569j]]),
    "604": ("ac", [[1.3238 + 1.3569j, 0.2066 + 0.4591j],
                   [0.2066 + 0.4591j, 1.3294 + 1.3471j]]),
    "605": ("c", [[1.3292 + 1.3475j]]),
    "606": ("abc", [[0.7982 + 0.4463j, 0.3192 + 0.0328j, 0.2849 - 0.0143j],
                    [0.3192 + 0.0328j, 0.7891 + 0.4041j, 0.3192 + 0.0328j],
                    [0.2849 - 0.0143j, 0.3192 + 0.0328j, 0.7982 + 0.4463j]]),
    "607": ("a", [[1.3425 + 0.5124j]]),
}

# per-phase spot loads (kW, kvar); delta loads split over their two phases
_LOADS13 = [
    ("670", "a", 17, 10), ("670", "b", 66, 38), ("670", "c", 117, 68),
    ("634", "a", 160, 110), ("634", "b", 120, 90), ("634", "c", 120, 90),
    ("645", "b", 170, 125),
    ("646", "b", 115, 66), ("646", "c", 115, 66),
    ("652", "a", 128, 86),
    ("671", "a", 385, 220), ("671", "b", 385, 220), ("671", "c", 385, 220),
    ("675", "a", 485, 190), ("675", "b", 68, 60), ("675", "c", 290, 212),
    ("692", "a", 85, 75), ("692", "c", 85, 76),
    ("611", "c", 170, 80),
]


def _config_block(name: str, miles: float) -> tuple[list[list[float]], list[list[float]]]:
    phases, z = _CONFIGS[name]
    full = np.zeros((3, 3), complex)
    idx = [PHASES.index(p) for p in phases]
    full[np.ix_(idx, idx)] = np.asarray(z) * miles
    return full.real.round(9).tolist(), full.imag.round(9).tolist()


def feeder13_document() -> dict[str, Any]:
    """IEEE-13-style feeder in SI units (ohm, kW, kvar, kVA)."""
    buses = [("650", "abc"), ("632", "abc"), ("670", "abc"), ("671", "abc"), ("680", "abc"),
             ("633", "abc"), ("634", "abc"), ("645", "bc"), ("646", "bc"), ("692", "abc"),
             ("675", "abc"), ("684", "ac"), ("611", "c"), ("652", "a")]
    # (from, to, config, feet); lengths are authored, shorter than the IEEE originals
    spans = [("650", "632", "601", 1000), ("632", "670", "601", 333), ("670", "671", "601", 667),
             ("671", "680", "601", 500), ("632", "633", "602", 250), ("632", "645", "603", 250),
             ("645", "646", "603", 150), ("671", "692", "601", 300), ("692", "675", "606", 250),
             ("671", "684", "604", 150), ("684", "611", "605", 150), ("684", "652", "607", 400)]
    lines = []
    for a, b, cfg, ft in spans:
        r, x = _config_block(cfg, ft / 5280.0)
        lines.append({"from": a, "to": b, "r": r, "x": x})
    # 500 kVA 4.16 kV transformer to 634, referred to the primary side (ohm)
    zx = (0.011 + 0.02j) * 4.16**2 / 0.5
    lines.insert(5, {"from": "633", "to": "634",
                     "r": (np.eye(3) * zx.real).round(9).tolist(),
                     "x": (np.eye(3) * zx.imag).round(9).tolist()})
    loads = [{"bus": b, "phase": p, "p": float(kw), "q": float(kvar)} for b, p, kw, kvar in _LOADS13]
    ders = []
    for b, p, kw, kvar in _LOADS13:
        s_load = math.hypot(kw, kvar)
        ders.append({"id": f"der{b}{p}", "bus": b, "phase": p, "mode": "PQ",
                     "p_g": round(0.8 * kw, 3), "s_rating": round(1.3 * s_load, 3)})
    return {
        "name": "fixture13",
        "bases": {"base_mva": 1.0, "base_kv": round(4.16 / math.sqrt(3), 6), "units": "si"},
        "substation": {"y0": [0.96**2] * 3},
        "buses": [{"id": b, "phases": ph, **({"is_substation": True} if b == "650" else {})}
                  for b, ph in buses],
        "lines": lines,
        "loads": loads,
        "ders": ders,
        "vpp": {"K_q": -40.0, "Y_set": 1.0},
        "scenarios": {"mixed": {"634": "VV", "675": "VV", "671": "PV"}},
        "manifest": {"buses": 14, "lines": 13, "loads": 19, "ders": 19, "phase_nodes": 32},
    }


def feeder2_document() -> dict[str, Any]:
    z = [[0.01, 0, 0], [0, 0, 0], [0, 0, 0]]
    x = [[0.02, 0, 0], [0, 0, 0], [0, 0, 0]]
    return {
        "name": "fixture2",
        "bases": {"base_mva": 1.0, "base_kv": 1.0, "units": "pu"},
        "substation": {"y0": [1.0, 1.0, 1.0]},
        "buses": [{"id": "s", "phases": "a", "is_substation": True}, {"id": "n1", "phases": "a"}],
        "lines": [{"from": "s", "to": "n1", "r": z, "x": x}],
        "loads": [{"bus": "n1", "phase": "a", "p": 0.1, "q": 0.05}],
        "ders": [],
        "vpp": None,
        "manifest": {"buses": 2, "lines": 1, "loads": 1, "ders": 0, "phase_nodes": 1},
    }


def synthetic_feeder(n_buses: int, seed: int | np.random.Generator = 0, *,
                     three_phase: float = 0.5, load_prob: float = 0.7, der_prob: float = 1.0,
                     modes: tuple[str, ...] | None = None, load_scale: float = 1.0,
                     miles: tuple[float, float] = (0.03, 0.15), base_kv: float = 4.16 / math.sqrt(3),
                     substation_y0: float = 1.0, vpp_kq: float | None = -40.0,
                     pg_share: float = 0.8, rating_margin: float = 1.3,
                     name: str = "") -> FeederModel:
    """Random radial feeder in per-unit (1 MVA per-phase base).

    Lines use the 601/602/603/604/605/607 configurations scaled by a random
    length. Loads sit on a random subset of phase-nodes; DERs are co-located
    with loads, producing ``pg_share`` of the local real load with a rating of
    ``rating_margin`` times the local apparent load. ``modes`` draws each DER's
    mode uniformly from the given set.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z_base = base_kv**2 / 1.0
    buses = [{"id": "b0", "phases": "abc", "is_substation": True}]
    phases = {"b0": "abc"}
    lines = []
    for i in range(1, n_buses):
        par = buses[int(rng.integers(max(0, i - 4), i))]["id"] if rng.random() < 0.7 \
            else buses[int(rng.integers(0, i))]["id"]
        pp = phases[par]
        if len(pp) == 3 and rng.random() < three_phase:
            ph = "abc"
        elif len(pp) >= 2 and rng.random() < 0.3:
            pick = sorted(rng.choice(len(pp), 2, replace=False))
            ph = "".join(pp[k] for k in pick)
        else:
            ph = pp[int(rng.integers(0, len(pp)))]
        cfg = {"abc": "601" if rng.random() < 0.6 else "602", "bc": "603", "ac": "604"}.get(ph)
        length = float(rng.uniform(*miles))
        full = np.zeros((3, 3), complex)
        idx = [PHASES.index(p) for p in ph]
        if cfg is not None:
            _, z = _CONFIGS[cfg]
            full[np.ix_(idx, idx)] = np.asarray(z)
        elif len(ph) == 2:   # "ab": reuse the 603 geometry
            full[np.ix_(idx, idx)] = np.asarray(_CONFIGS["603"][1])
        else:
            full[idx[0], idx[0]] = _CONFIGS["605" if rng.random() < 0.7 else "607"][1][0][0]
        full *= length / z_base
        bid = f"b{i}"
        buses.append({"id": bid, "phases": ph})
        phases[bid] = ph
        lines.append({"from": par, "to": bid, "r": full.real.tolist(), "x": full.imag.tolist()})
    loads, ders = [], []
    for b in buses[1:]:
        for ph in b["phases"]:
            if rng.random() >= load_prob:
                continue
            p = float(rng.uniform(0.01, 0.06)) * load_scale
            q = p * float(rng.uniform(0.3, 0.7))
            loads.append({"bus": b["id"], "phase": ph, "p": p, "q": q})
            if rng.random() < der_prob:
                mode = "PQ" if not modes else str(modes[int(rng.integers(0, len(modes)))])
                ders.append({"id": f"der_{b['id']}{ph}", "bus": b["id"], "phase": ph, "mode": mode,
                             "p_g": pg_share * p, "s_rating": rating_margin * math.hypot(p, q)})
    doc = {
        "name": name, "bases": {"base_mva": 1.0, "base_kv": base_kv, "units": "pu"},
        "substation": {"y0": [substation_y0] * 3}, "buses": buses, "lines": lines,
        "loads": loads, "ders": ders,
        "vpp": None if vpp_kq is None else {"K_q": vpp_kq, "Y_set": 1.0},
    }
    return parse_feeder(doc)


def feeder123_model() -> FeederModel:
    model = synthetic_feeder(123, 123, three_phase=0.8, load_prob=0.3, miles=(0.04, 0.12),
                             substation_y0=0.97**2, name="fixture123")
    doc = feeder_to_dict(model)
    # mixed map: every fifth DER bus on VV, every seventh on PV, the rest PQ
    der_buses = list(dict.fromkeys(d.bus for d in model.ders))
    mixed = {b: "VV" for b in der_buses[::5]}
    mixed.update({b: "PV" for b in der_buses[3::7]})
    doc["scenarios"] = {"mixed": mixed}
    doc["manifest"] = {"buses": len(model.buses), "lines": len(model.lines),
                       "loads": len(model.loads), "ders": len(model.ders),
                       "phase_nodes": sum(len(b.phases) for b in model.buses if not b.is_substation)}
    return parse_feeder(doc)


def data_path(name: str) -> Path:
    return Path(str(resources.files("lindispatch") / "data" / BUILTIN[name]))


def resolve_feeder(name: str) -> FeederModel:
    """Load a bundled fixture by name (``fixture13``) or a feeder file by path."""
    if name in BUILTIN:
        return load_feeder(data_path(name))
    return load_feeder(name)


def write_fixtures(directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "feeder2.json").write_text(json.dumps(feeder2_document(), indent=1) + "\n")
    (directory / "feeder13.json").write_text(json.dumps(feeder13_document(), indent=1) + "\n")
    (directory / "feeder123.json").write_text(json.dumps(feeder_to_dict(feeder123_model())) + "\n")


if __name__ == "__main__":
    write_fixtures(Path(__file__).parent / "data")
