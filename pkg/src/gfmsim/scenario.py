"""Feeder and scenario file handling: versioned JSON schemas, validation with
precise error paths, CLI overrides, and static cross-checks."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .control import GfmGains
from .motor import InductionMotorParams
from .protection import LoadRelaySettings, OvercurrentRelaySettings

SCHEMA_VERSION = 1

LOAD_MODELS = ("constant_z", "composite")
ACTIONS = (
    "energize_converter",
    "begin_soft_start",
    "start_presync",
    "connect_converter",
    "arm_relays",
    "apply_fault",
    "clear_fault",
    "connect_motor",
    "set_motor_torque",
    "set_parameter",
)


class ValidationError(ValueError):
    """Schema or cross-reference failure, carrying the offending path."""

    def __init__(self, path, msg):
        self.path = path
        super().__init__(f"{path}: {msg}")


def _req(d, key, path, types=None):
    if key not in d:
        raise ValidationError(path, f"missing required field {key!r}")
    v = d[key]
    if types and not isinstance(v, types):
        raise ValidationError(f"{path}.{key}", f"expected {types}, got {type(v).__name__}")
    return v


@dataclass
class LineConfigSpec:
    phasing: str
    r_ohm_per_mile: np.ndarray
    x_ohm_per_mile: np.ndarray
    b_us_per_mile: np.ndarray


@dataclass
class BusSpec:
    id: str
    kv_ll: float
    phases: str


@dataclass
class LineSpec:
    from_bus: str
    to_bus: str
    config: str
    length_ft: float


@dataclass
class SwitchLineSpec:
    id: str
    from_bus: str
    to_bus: str
    phases: str
    closed: bool


@dataclass
class TransformerRecord:
    id: str
    from_bus: str
    to_bus: str
    kind: str
    s_va: float
    kv_ll_from: float
    kv_ll_to: float
    r_pu: float
    x_pu: float


@dataclass
class LoadEntry:
    phases: str          # one phase ("a") for wye, pair ("bc") for delta
    kw: float
    kvar: float


@dataclass
class LoadSpec:
    id: str
    bus: str
    conn: str            # "wye" | "delta"
    entries: list
    model: str = "constant_z"
    breaker: bool = False
    relay: dict = field(default_factory=dict)   # per-load relay overrides


@dataclass
class CapacitorSpec:
    id: str
    bus: str
    kvar_by_phase: dict


@dataclass
class ConverterSpec:
    id: str
    bus: str
    s_va: float
    kv_ll_lv: float
    gains: GfmGains
    xfmr_s_va: float
    xfmr_r_pu: float
    xfmr_x_pu: float
    l_f_pu: float = 0.08
    r_f_pu: float = 0.005
    c_f_pu: float = 0.07
    rd_pu: float = 0.3
    soft_start_s: float = 2.0


@dataclass
class MotorSpec:
    id: str
    bus: str
    params: InductionMotorParams
    oc_pickup_pu: float = 8.0


@dataclass
class FeederDescription:
    name: str
    f_hz: float
    line_configs: dict
    buses: dict
    lines: list
    switch_lines: list
    transformers: list
    loads: list
    capacitors: list
    converters: list
    motors: list
    raw: dict = field(repr=False, default_factory=dict)


def _as_matrix(v, path):
    m = np.asarray(v, dtype=float)
    if m.shape != (3, 3):
        raise ValidationError(path, f"expected a 3x3 matrix, got shape {m.shape}")
    return m


def parse_feeder(source) -> FeederDescription:
    """Parse and validate a feeder file (path, dict, or JSON string)."""
    raw = _load_json(source, "feeder")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ValidationError("schema", f"unsupported schema {raw.get('schema')!r}")
    f_hz = float(raw.get("frequency_hz", 60.0))

    configs = {}
    for cid, c in raw.get("line_configs", {}).items():
        path = f"line_configs.{cid}"
        configs[cid] = LineConfigSpec(
            phasing=_req(c, "phasing", path, str),
            r_ohm_per_mile=_as_matrix(_req(c, "r_ohm_per_mile", path), path),
            x_ohm_per_mile=_as_matrix(_req(c, "x_ohm_per_mile", path), path),
            b_us_per_mile=_as_matrix(c.get("b_us_per_mile", np.zeros((3, 3))), path),
        )

    buses = {}
    for i, b in enumerate(raw.get("buses", [])):
        path = f"buses[{i}]"
        bid = _req(b, "id", path, str)
        if bid in buses:
            raise ValidationError(path, f"duplicate bus id {bid!r}")
        buses[bid] = BusSpec(bid, float(_req(b, "kv_ll", path, (int, float))),
                             _req(b, "phases", path, str))

    def check_bus(bid, path, phases=""):
        if bid not in buses:
            raise ValidationError(path, f"references unknown bus {bid!r}")
        for p in phases:
            if p not in buses[bid].phases:
                raise ValidationError(path, f"bus {bid!r} has no phase {p!r}")

    lines = []
    for i, ln in enumerate(raw.get("lines", [])):
        path = f"lines[{i}]"
        cfg = _req(ln, "config", path, str)
        if cfg not in configs:
            raise ValidationError(path, f"references unknown line config {cfg!r}")
        spec = LineSpec(_req(ln, "from", path, str), _req(ln, "to", path, str),
                        cfg, float(_req(ln, "length_ft", path, (int, float))))
        check_bus(spec.from_bus, path, configs[cfg].phasing)
        check_bus(spec.to_bus, path, configs[cfg].phasing)
        lines.append(spec)

    switch_lines = []
    for i, s in enumerate(raw.get("switch_lines", [])):
        path = f"switch_lines[{i}]"
        spec = SwitchLineSpec(
            _req(s, "id", path, str), _req(s, "from", path, str),
            _req(s, "to", path, str), _req(s, "phases", path, str),
            bool(s.get("closed", True)),
        )
        check_bus(spec.from_bus, path, spec.phases)
        check_bus(spec.to_bus, path, spec.phases)
        switch_lines.append(spec)

    transformers = []
    for i, t in enumerate(raw.get("transformers", [])):
        path = f"transformers[{i}]"
        spec = TransformerRecord(
            _req(t, "id", path, str), _req(t, "from", path, str),
            _req(t, "to", path, str), t.get("kind", "wye_g_wye_g"),
            float(_req(t, "s_kva", path, (int, float))) * 1e3,
            float(_req(t, "kv_ll_from", path, (int, float))),
            float(_req(t, "kv_ll_to", path, (int, float))),
            float(t.get("r_pu", 0.01)), float(t.get("x_pu", 0.05)),
        )
        check_bus(spec.from_bus, path, "abc")
        check_bus(spec.to_bus, path, "abc")
        if spec.x_pu <= 0:
            raise ValidationError(path, "x_pu must be positive")
        transformers.append(spec)

    loads = []
    for i, l in enumerate(raw.get("loads", [])):
        path = f"loads[{i}]"
        lid = _req(l, "id", path, str)
        conn = l.get("conn", "wye")
        if conn not in ("wye", "delta"):
            raise ValidationError(path, f"unknown connection {conn!r}")
        model = l.get("model", "constant_z")
        if model not in LOAD_MODELS:
            raise ValidationError(path, f"unknown load model {model!r}")
        entries = []
        for ph, val in _req(l, "entries", path, dict).items():
            nph = 1 if conn == "wye" else 2
            if len(ph) != nph:
                raise ValidationError(
                    f"{path}.entries.{ph}",
                    f"{conn} entry needs {nph} phase letter(s)")
            entries.append(LoadEntry(ph, float(val.get("kw", 0.0)),
                                     float(val.get("kvar", 0.0))))
        spec = LoadSpec(lid, _req(l, "bus", path, str), conn, entries, model,
                        bool(l.get("breaker", False)), dict(l.get("relay", {})))
        check_bus(spec.bus, path, "".join(sorted(set("".join(e.phases for e in entries)))))
        loads.append(spec)

    capacitors = []
    for i, c in enumerate(raw.get("capacitors", [])):
        path = f"capacitors[{i}]"
        spec = CapacitorSpec(_req(c, "id", path, str), _req(c, "bus", path, str),
                             {k: float(v) for k, v in _req(c, "kvar", path, dict).items()})
        check_bus(spec.bus, path, "".join(spec.kvar_by_phase))
        capacitors.append(spec)

    converters = []
    for i, cv in enumerate(raw.get("converters", [])):
        path = f"converters[{i}]"
        g = cv.get("gains", {})
        gains = GfmGains(
            mp_pct=float(g.get("mp_pct", 5.0)),
            mq_pct=float(g.get("mq_pct", 5.0)),
            ks=float(g.get("ks", 1.0)),
            i_max_pu=float(g.get("imax_pu", 1.2)),
            **{k: float(g[k]) for k in ("kp_v", "ki_v", "kp_i", "ki_i",
                                        "power_filter_hz", "q_filter_hz",
                                        "r_damp_pu", "washout_hz") if k in g},
        )
        flt = cv.get("filter", {})
        xf = _req(cv, "transformer", path, dict)
        spec = ConverterSpec(
            id=_req(cv, "id", path, str), bus=_req(cv, "bus", path, str),
            s_va=float(_req(cv, "s_mva", path, (int, float))) * 1e6,
            kv_ll_lv=float(_req(cv, "kv_ll_lv", path, (int, float))),
            gains=gains,
            xfmr_s_va=float(_req(xf, "s_mva", f"{path}.transformer", (int, float))) * 1e6,
            xfmr_r_pu=float(xf.get("r_pu", 0.005)),
            xfmr_x_pu=float(xf.get("x_pu", 0.06)),
            l_f_pu=float(flt.get("l_pu", 0.08)),
            r_f_pu=float(flt.get("r_pu", 0.005)),
            c_f_pu=float(flt.get("c_pu", 0.07)),
            rd_pu=float(flt.get("rd_pu", 0.3)),
            soft_start_s=float(cv.get("soft_start_s", 2.0)),
        )
        check_bus(spec.bus, path, "abc")
        converters.append(spec)

    motors = []
    for i, mo in enumerate(raw.get("motors", [])):
        path = f"motors[{i}]"
        params = InductionMotorParams(
            s_va=float(_req(mo, "s_mva", path, (int, float))) * 1e6,
            v_ll_rms=float(_req(mo, "kv_ll", path, (int, float))) * 1e3,
            rs=float(mo.get("rs_pu", 0.01)), rr=float(mo.get("rr_pu", 0.015)),
            xls=float(mo.get("xls_pu", 0.10)), xlr=float(mo.get("xlr_pu", 0.10)),
            xm=float(mo.get("xm_pu", 3.0)), h_s=float(mo.get("h_s", 0.5)),
            pole_pairs=int(mo.get("pole_pairs", 2)),
        )
        spec = MotorSpec(_req(mo, "id", path, str), _req(mo, "bus", path, str),
                         params, float(mo.get("oc_pickup_pu", 8.0)))
        check_bus(spec.bus, path, "abc")
        motors.append(spec)

    ids = [l.id for l in loads] + [c.id for c in converters] + [m.id for m in motors] \
        + [s.id for s in switch_lines]
    dup = {x for x in ids if ids.count(x) > 1}
    if dup:
        raise ValidationError("ids", f"duplicate element ids {sorted(dup)}")

    return FeederDescription(
        name=raw.get("name", "feeder"), f_hz=f_hz, line_configs=configs,
        buses=buses, lines=lines, switch_lines=switch_lines,
        transformers=transformers, loads=loads, capacitors=capacitors,
        converters=converters, motors=motors, raw=raw,
    )


# --------------------------------------------------------------------------
# Scenario
# --------------------------------------------------------------------------

@dataclass
class RelayDefaults:
    f_min_hz: float = 59.5
    v_min_pu: float = 0.85
    v_max_pu: float = 1.10
    t_wait_dis_s: float = 0.1
    stagger_base_s: float = 1.0
    stagger_increment_s: float = 2.0
    oc_pickup_pu: float = 2.0
    oc_cycles: float = 5.0


@dataclass
class Event:
    t_s: float
    action: str
    params: dict


@dataclass
class Scenario:
    name: str
    t_end_s: float
    dt_s: float
    decimation: int
    relay_defaults: RelayDefaults
    stagger_order: list
    events: list
    raw: dict = field(repr=False, default_factory=dict)

    def fault_time(self):
        times = [e.t_s for e in self.events if e.action == "apply_fault"]
        return min(times) if times else None


def parse_scenario(source) -> Scenario:
    raw = _load_json(source, "scenario")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ValidationError("schema", f"unsupported schema {raw.get('schema')!r}")
    rd = raw.get("relay_defaults", {})
    defaults = RelayDefaults(
        f_min_hz=float(rd.get("f_min_hz", 59.5)),
        v_min_pu=float(rd.get("v_min_pu", 0.85)),
        v_max_pu=float(rd.get("v_max_pu", 1.10)),
        t_wait_dis_s=float(rd.get("t_wait_dis_s", 0.1)),
        stagger_base_s=float(rd.get("stagger_base_s", 1.0)),
        stagger_increment_s=float(rd.get("stagger_increment_s", 2.0)),
        oc_pickup_pu=float(rd.get("oc_pickup_pu", 2.0)),
        oc_cycles=float(rd.get("oc_cycles", 5.0)),
    )
    events = []
    last_t = -np.inf
    for i, e in enumerate(raw.get("events", [])):
        path = f"events[{i}]"
        t = float(_req(e, "t_s", path, (int, float)))
        action = _req(e, "action", path, str)
        if action not in ACTIONS:
            raise ValidationError(path, f"unknown action {action!r}")
        if t < last_t:
            raise ValidationError(path, "event times must be non-decreasing")
        last_t = t
        events.append(Event(t, action, {k: v for k, v in e.items()
                                        if k not in ("t_s", "action")}))
    return Scenario(
        name=raw.get("name", "scenario"),
        t_end_s=float(_req(raw, "t_end_s", "scenario", (int, float))),
        dt_s=float(raw.get("dt_s", 50e-6)),
        decimation=int(raw.get("decimation", 16)),
        relay_defaults=defaults,
        stagger_order=list(raw.get("stagger_order", [])),
        events=events,
        raw=raw,
    )


def _load_json(source, what):
    if isinstance(source, dict):
        return copy.deepcopy(source)
    p = Path(source)
    if not p.exists():
        raise ValidationError(str(p), f"{what} file not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(str(p), f"invalid JSON: {e}") from None


def bundled_path(name: str) -> Path:
    """Path of a data file shipped with the package."""
    return Path(resources.files("gfmsim.data") / name)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply CLI `dotted.path=value` overrides onto a raw JSON dict.

    Values are coerced to the type of the existing field; new keys are
    rejected so typos fail loudly.
    """
    out = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(item, "override must look like key.path=value")
        key, val = item.split("=", 1)
        parts = []
        for piece in key.split("."):
            if "[" in piece:
                name, _, idx = piece.partition("[")
                parts.append(name)
                parts.append(int(idx.rstrip("]")))
            else:
                parts.append(piece)
        node = out
        for p in parts[:-1]:
            try:
                node = node[p]
            except (KeyError, IndexError, TypeError):
                raise ValidationError(key, f"no such path element {p!r}") from None
        leaf = parts[-1]
        try:
            current = node[leaf]
        except (KeyError, IndexError, TypeError):
            raise ValidationError(key, f"unknown field {leaf!r}") from None
        if isinstance(current, bool):
            node[leaf] = val.lower() in ("1", "true", "yes")
        elif isinstance(current, (int, float)):
            node[leaf] = type(current)(float(val))
        elif isinstance(current, str):
            node[leaf] = val
        else:
            raise ValidationError(key, "can only override scalar fields")
    return out


def cross_validate(feeder: FeederDescription, scenario: Scenario):
    """Static checks across the two inputs; returns a list of problem strings."""
    problems = []
    conv_ids = {c.id for c in feeder.converters}
    motor_ids = {m.id for m in feeder.motors}
    load_ids = {l.id for l in feeder.loads}
    presynced = set()
    for i, e in enumerate(scenario.events):
        where = f"events[{i}] ({e.action} at t={e.t_s})"
        if e.action in ("energize_converter", "begin_soft_start",
                        "start_presync", "connect_converter"):
            cid = e.params.get("converter")
            if cid not in conv_ids:
                problems.append(f"{where}: unknown converter {cid!r}")
            if e.action == "start_presync":
                presynced.add(cid)
            if e.action == "connect_converter" and cid not in presynced:
                problems.append(
                    f"{where}: connect_converter without a preceding "
                    f"start_presync for {cid!r}")
        elif e.action in ("connect_motor", "set_motor_torque"):
            if e.params.get("motor") not in motor_ids:
                problems.append(f"{where}: unknown motor {e.params.get('motor')!r}")
        elif e.action == "apply_fault":
            target = e.params.get("load") or e.params.get("bus")
            if e.params.get("load") and e.params["load"] not in load_ids:
                problems.append(f"{where}: unknown load {e.params['load']!r}")
            if e.params.get("bus") and e.params["bus"] not in feeder.buses:
                problems.append(f"{where}: unknown bus {e.params['bus']!r}")
            if not target:
                problems.append(f"{where}: fault needs a load or bus target")
    for lid in scenario.stagger_order:
        if lid not in load_ids:
            problems.append(f"stagger_order: unknown load {lid!r}")
    return problems
