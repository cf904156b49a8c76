"""Black-start co-simulation: builds the nodal model from a feeder
description, steps network / converter controls / relays / motor / composite
loads in lockstep, applies timeline events at step boundaries, and records
decimated channels plus a machine-readable event log."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis, components
from .control import (
    GfmConverterBank,
    ConverterRatings,
    PresyncError,
    SogiBank,
    ThreePhasePll,
    presync_handoff,
)
from .motor import InductionMotor
from .network import GND, NetworkModel, NodalSystem
from .protection import (
    LoadRelay,
    LoadRelaySettings,
    OvercurrentRelay,
    OvercurrentRelaySettings,
    stagger_assign,
)
from .scenario import (
    FeederDescription,
    Scenario,
    ValidationError,
    parse_feeder,
    parse_scenario,
)

SQRT2 = math.sqrt(2.0)
PHASES = "abc"


def v_pk_of(kv_ll: float) -> float:
    return kv_ll * 1e3 * SQRT2 / math.sqrt(3.0)


class RelayFreqBank:
    """Per-relay single-phase SOGI + SRF-PLL frequency estimates, 10 Hz LPF."""

    def __init__(self, n: int, omega0: float, dt: float):
        self.n = n
        self.omega0 = omega0
        self.dt = dt
        self.sogi = SogiBank(n, omega0, dt) if n else None
        wn = 2.0 * np.pi * 15.0
        self.kp = 2.0 * wn
        self.ki = wn * wn
        self.theta = np.zeros(n)
        self.omega_i = np.zeros(n)
        self._alpha = 1.0 - math.exp(-dt * 2.0 * np.pi * 10.0)
        self.freq_hz = np.full(n, omega0 / (2 * np.pi))

    def step(self, v_pu):
        if self.n == 0:
            return self.freq_hz
        x, q = self.sogi.step(v_pu)
        mag = np.hypot(x, q)
        ok = mag > 0.1
        safe = np.where(ok, mag, 1.0)
        qe = (q * np.cos(self.theta) - x * np.sin(self.theta)) / safe
        qe = np.where(ok, qe, 0.0)
        self.omega_i += np.where(ok, self.ki * qe * self.dt, 0.0)
        om = self.omega0 + self.omega_i + self.kp * qe
        self.theta = np.mod(self.theta + om * self.dt, 2 * np.pi)
        f_now = np.where(ok, om / (2 * np.pi), self.freq_hz)
        self.freq_hz += self._alpha * (f_now - self.freq_hz)
        return self.freq_hz


@dataclass
class _EntryBinding:
    phases: str
    node_pos: int
    node_neg: int            # GND for wye
    branch_row: int
    v_base_pk: float
    i_rated_pk: float
    pf_angle: float
    chan_pos: int = -1       # phasor-bank channels of terminal nodes
    chan_neg: int = -1       # zero channel for wye
    inj_pos: int = -1
    inj_neg: int = -1


@dataclass
class _LoadBinding:
    spec: object
    entries: list
    switch: str | None = None
    relay: LoadRelay | None = None
    oc: OvercurrentRelay | None = None
    pole_rows: list = field(default_factory=list)
    pole_ibase: np.ndarray | None = None
    bus_vchans: list = field(default_factory=list)
    freq_chan: int = -1
    constant_current: bool = False


@dataclass
class _ConverterBinding:
    spec: object
    k: int
    fil_nodes: list
    lv_nodes: list
    src_channels: list
    lf_rows: list
    brk_rows: list
    switch: str
    fil_vchans: list = field(default_factory=list)
    ifil_chans: list = field(default_factory=list)
    pll: ThreePhasePll | None = None
    pll_active: bool = False


@dataclass
class _MotorBinding:
    spec: object
    motor: InductionMotor
    nodes: list
    switch: str
    src_channels: list
    stator_rows: list
    oc: OvercurrentRelay | None = None
    pole_rows: list = field(default_factory=list)
    connected: bool = False


class RunRecord:
    """Decimated channel matrix + event log + metadata for one run."""

    def __init__(self, names, meta):
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(self.names)}
        self.meta = meta
        self.t = None
        self.data = None
        self.events = []

    def col(self, name):
        return self.data[:, self.index[name]]

    def csv_columns(self):
        return ["time_s"] + self.names, [self.t] + [self.data[:, i] for i in
                                                    range(len(self.names))]

    def output_hash(self):
        import hashlib
        h = hashlib.sha256()
        h.update(self.t.tobytes())
        h.update(self.data.tobytes())
        for e in self.events:
            h.update(repr(e).encode())
        return h.hexdigest()

    # -- windows and metrics -------------------------------------------------

    def last_load_close_time(self):
        times = [t for t, actor, action, cause in self.events
                 if action == "close" and actor.startswith("relay:")]
        return max(times) if times else None

    def steady_window(self, fault_time=None):
        """[start, end): after the last staggered pickup has settled, ending
        at the first fault (or the end of the record)."""
        end = fault_time if fault_time is not None else float(self.t[-1])
        done = self.last_load_close_time()
        start = (done + 2.0) if done is not None else end - 1.0
        start = min(start, end - 1.0)
        start = max(start, 0.0)
        return start, end

    def window_mask(self, start, end):
        return (self.t >= start) & (self.t < end)

    def converter_unbalance(self, conv, mask):
        """Window-averaged (V_UF, P_UF, Q_UF) for one converter id."""
        re = np.column_stack([self.col(f"{conv}_{p}_vph_re") for p in PHASES])
        im = np.column_stack([self.col(f"{conv}_{p}_vph_im") for p in PHASES])
        ph = (re + 1j * im)[mask]
        seq = ph @ analysis.FORTESCUE.T
        # complex ratio: common off-nominal rotation cancels, spectral
        # leakage (rotating fast relative to V+) averages out
        ratio = np.mean(seq[:, 1] / seq[:, 0])
        p = np.array([self.col(f"{conv}_{p}_p_pu")[mask].mean() for p in PHASES])
        q = np.array([self.col(f"{conv}_{p}_q_pu")[mask].mean() for p in PHASES])
        uf = analysis.unbalance_factors(1.0, abs(ratio), p, q)
        return analysis.UnbalanceFactors(abs(ratio), uf.p_uf, uf.q_uf)

    def summary(self, fault_time=None):
        convs = self.meta["converters"]
        ratings = self.meta["ratings"]
        start, end = self.steady_window(fault_time)
        mask = self.window_mask(start, end)
        out = {
            "t_end_s": float(self.t[-1]),
            "steady_window_s": [start, end],
            "events": len(self.events),
            "trips": [
                {"t_s": t, "relay": actor.split(":", 1)[1], "cause": cause}
                for t, actor, action, cause in self.events if action == "trip"
            ],
        }
        tail = self.t >= self.t[-1] - 0.25
        for conv in convs:
            f = np.column_stack([self.col(f"{conv}_{p}_f_hz") for p in PHASES])
            out[f"{conv}_final_freq_hz"] = float(f[tail].mean())
            out[f"{conv}_peak_i_pu"] = float(
                max(self.col(f"{conv}_{p}_i_mag_pu").max() for p in PHASES))
            if mask.any():
                uf = self.converter_unbalance(conv, mask)
                out[f"{conv}_v_uf"] = uf.v_uf
                out[f"{conv}_p_uf_pu"] = uf.p_uf
                out[f"{conv}_q_uf_pu"] = uf.q_uf
        if len(convs) >= 2 and mask.any():
            p_tot = [self.col(f"{c}_p_total_w")[mask].mean() for c in convs]
            try:
                out["sharing_error"] = analysis.power_sharing_error(p_tot, ratings)
            except analysis.UndefinedMetricError:
                out["sharing_error"] = None
        return out


class BlackStartRun:
    """One fully built simulation; run() executes the timeline."""

    def __init__(self, feeder: FeederDescription, scenario: Scenario,
                 dt=None, decimation=None):
        self.feeder = feeder
        self.scenario = scenario
        self.dt = float(dt if dt is not None else scenario.dt_s)
        self.decimation = int(decimation if decimation is not None
                              else scenario.decimation)
        if self.dt <= 0:
            raise ValidationError("dt", "time step must be positive")
        self.omega0 = 2 * np.pi * feeder.f_hz
        self._build()

    # -- construction ---------------------------------------------------------

    def _build(self):
        fd = self.feeder
        sc = self.scenario
        w0 = self.omega0
        m = NetworkModel()
        self.model = m

        self._bus_nodes = {}
        for bus in fd.buses.values():
            for p in bus.phases:
                self._bus_nodes[(bus.id, p)] = m.node(f"{bus.id}.{p}")

        def node_of(bus, ph):
            try:
                return self._bus_nodes[(bus, ph)]
            except KeyError:
                raise ValidationError(bus, f"bus {bus!r} has no phase {ph!r}")

        for ln in fd.lines:
            cfg = fd.line_configs[ln.config]
            components.stamp_line(
                m,
                components.LineSegment(ln.from_bus, ln.to_bus,
                                       components.LineConfig(
                                           cfg.phasing, cfg.r_ohm_per_mile,
                                           cfg.x_ohm_per_mile, cfg.b_us_per_mile),
                                       ln.length_ft),
                node_of, w0)

        for sw in fd.switch_lines:
            poles = [(node_of(sw.from_bus, p), node_of(sw.to_bus, p))
                     for p in sw.phases]
            m.add_switch(sw.id, poles, r_closed=1e-4, closed=sw.closed)

        for tr in fd.transformers:
            spec = components.TransformerSpec(tr.kind, tr.s_va, tr.kv_ll_from,
                                              tr.kv_ll_to, tr.r_pu, tr.x_pu)
            components.stamp_transformer(
                m, spec,
                [node_of(tr.from_bus, p) for p in PHASES],
                [node_of(tr.to_bus, p) for p in PHASES], w0)

        # phasor-bank channel registry: voltages then currents, plus one
        # permanently zero channel used as the wye return of delta math
        self._vchan_nodes = []
        self._vchan_scale = []
        self._ichan_rows = []
        self._ichan_scale = []

        def vchan(node, v_pk):
            self._vchan_nodes.append(node)
            self._vchan_scale.append(1.0 / v_pk)
            return len(self._vchan_nodes) - 1

        self._bus_chans = {}
        for bus in fd.buses.values():
            for p in bus.phases:
                self._bus_chans[(bus.id, p)] = vchan(
                    self._bus_nodes[(bus.id, p)], v_pk_of(bus.kv_ll))

        # loads
        self.loads = []
        defaults = sc.relay_defaults
        for spec in fd.loads:
            bus = fd.buses[spec.bus]
            binding = _LoadBinding(spec, [])
            term = {}
            used = sorted(set("".join(e.phases for e in spec.entries)))
            for p in used:
                term[p] = m.node(f"{spec.id}.{p}")
            if spec.breaker:
                poles = [(node_of(spec.bus, p), term[p]) for p in used]
                binding.switch = f"brk_{spec.id}"
                binding.pole_rows = m.add_switch(binding.switch, poles,
                                                 r_closed=1e-4, closed=False)
                attach = term
            else:
                attach = {p: node_of(spec.bus, p) for p in used}

            v_ln = bus.kv_ll * 1e3 / math.sqrt(3.0)
            v_ll = bus.kv_ll * 1e3
            pole_ibase = {p: 0.0 for p in used}
            for e in spec.entries:
                if spec.conn == "wye":
                    nodes = (attach[e.phases], GND)
                    v_rms = v_ln
                else:
                    nodes = (attach[e.phases[0]], attach[e.phases[1]])
                    v_rms = v_ll
                lp = components.LoadPhase(nodes, e.kw, e.kvar, v_rms)
                row = components.stamp_load_phase(m, lp, w0)
                eb = _EntryBinding(
                    e.phases, nodes[0], nodes[1], row, v_rms * SQRT2,
                    lp.i_rated_pk, lp.pf_angle)
                if spec.model == "composite":
                    eb.inj_pos = m.add_injection(nodes[0])
                    if nodes[1] != GND:
                        eb.inj_neg = m.add_injection(nodes[1])
                    if spec.breaker:
                        eb.chan_pos = vchan(nodes[0], v_pk_of(bus.kv_ll))
                        if nodes[1] != GND:
                            eb.chan_neg = vchan(nodes[1], v_pk_of(bus.kv_ll))
                    else:
                        eb.chan_pos = self._bus_chans[(spec.bus, e.phases[0])]
                        if nodes[1] != GND:
                            eb.chan_neg = self._bus_chans[(spec.bus, e.phases[1])]
                binding.entries.append(eb)
                i_rms = abs(complex(e.kw, e.kvar)) * 1e3 / v_rms
                for p in e.phases:
                    pole_ibase[p] += i_rms * SQRT2

            if spec.breaker:
                rs = _relay_settings(defaults, spec.relay)
                binding.relay = LoadRelay(rs)
                ocs = OvercurrentRelaySettings(
                    pickup_pu=float(spec.relay.get("oc_pickup_pu",
                                                   defaults.oc_pickup_pu)),
                    definite_time_s=float(spec.relay.get(
                        "oc_cycles", defaults.oc_cycles)) / fd.f_hz)
                binding.oc = OvercurrentRelay(ocs)
                binding.pole_ibase = np.array([pole_ibase[p] for p in used])
                binding.bus_vchans = [self._bus_chans[(spec.bus, p)]
                                      for p in bus.phases]
            self.loads.append(binding)

        for cap in fd.capacitors:
            bus = fd.buses[cap.bus]
            v_ln = bus.kv_ll * 1e3 / math.sqrt(3.0)
            for p, kvar in cap.kvar_by_phase.items():
                components.stamp_capacitor_bank(m, node_of(cap.bus, p), kvar,
                                                v_ln, w0)

        # converters: source -> filter L -> fil bus (C to ground) ->
        # breaker -> GSU delta side -> GSU -> feeder bus
        self.convs = []
        ratings, gains, names, soft = [], [], [], []
        for k, cv in enumerate(fd.converters):
            r = ConverterRatings(cv.s_va, cv.kv_ll_lv * 1e3,
                                 cv.l_f_pu, cv.r_f_pu, cv.c_f_pu, cv.rd_pu)
            lf, rf, cf = r.filter_values(w0)
            fil = [m.node(f"{cv.id}:fil.{p}") for p in PHASES]
            lv = [m.node(f"{cv.id}:lv.{p}") for p in PHASES]
            src_ch, lf_rows = [], []
            for nid in fil:
                ch, row = m.add_source_rl(nid, rf, lf)
                src_ch.append(ch)
                lf_rows.append(row)
            beta_d = r.cap_damping_beta(w0, self.dt)
            for nid in fil:
                m.add_capacitor(nid, cf, beta=beta_d)
            sw = f"brk_{cv.id}"
            brk_rows = m.add_switch(sw, list(zip(fil, lv)), r_closed=1e-5,
                                    closed=False)
            gsu = components.TransformerSpec(
                "delta_wye_g", cv.xfmr_s_va, cv.kv_ll_lv,
                fd.buses[cv.bus].kv_ll, cv.xfmr_r_pu, cv.xfmr_x_pu)
            components.stamp_transformer(
                m, gsu, lv, [node_of(cv.bus, p) for p in PHASES], w0)
            cb = _ConverterBinding(cv, k, fil, lv, src_ch, lf_rows, brk_rows, sw)
            cb.fil_vchans = [vchan(nid, r.v_pk) for nid in fil]
            cb.pll = ThreePhasePll(w0, self.dt)
            self.convs.append(cb)
            ratings.append(r)
            gains.append(cv.gains)
            names.append(cv.id)
            soft.append(cv.soft_start_s)
        self.conv_bank = GfmConverterBank(names, ratings, gains, w0, self.dt,
                                          soft_start_s=np.array(soft)) \
            if names else None

        # motors: EMF source behind the stator transient impedance, the
        # branch itself solved implicitly by the network
        self.motors = []
        for mo in fd.motors:
            nodes = [m.node(f"{mo.id}.{p}") for p in PHASES]
            sw = f"brk_{mo.id}"
            poles = list(zip([node_of(mo.bus, p) for p in PHASES], nodes))
            pole_rows = m.add_switch(sw, poles, r_closed=1e-4, closed=False)
            motor = InductionMotor(mo.params, w0)
            r_st, l_st = motor.stator_branch()
            src_ch, rows = [], []
            for n in nodes:
                ch, row = m.add_source_rl(n, r_st, l_st)
                src_ch.append(ch)
                rows.append(row)
            mb = _MotorBinding(mo, motor, nodes, sw, src_ch, rows)
            mb.oc = OvercurrentRelay(OvercurrentRelaySettings(
                pickup_pu=mo.oc_pickup_pu,
                definite_time_s=sc.relay_defaults.oc_cycles / fd.f_hz))
            mb.pole_rows = pole_rows
            self.motors.append(mb)

        # fault switches, one per timeline fault event
        self.fault_switches = {}
        for i, ev in enumerate(sc.events):
            if ev.action != "apply_fault":
                continue
            ph = ev.params.get("phase", "a")
            r_ohm = float(ev.params.get("r_ohm", 1e-4))
            if ev.params.get("load"):
                lid = ev.params["load"]
                target = m.node(f"{lid}.{ph}")
            else:
                target = node_of(ev.params["bus"], ph)
            name = f"fault_{ev.params.get('load') or ev.params.get('bus')}_{ph}"
            if name not in m.switches:
                m.add_switch(name, [(target, GND)], r_closed=r_ohm, closed=False)
            self.fault_switches[i] = name

        # converter filter current channels (one-cycle magnitudes)
        for cb in self.convs:
            r = ratings[cb.k]
            for row in cb.lf_rows:
                self._ichan_rows.append(row)
                self._ichan_scale.append(1.0 / r.i_pk)
                cb.ifil_chans.append(len(self._vchan_nodes) + len(self._ichan_rows) - 1)

        # breaker-pole current channels for overcurrent relays
        for lb in self.loads:
            if lb.oc is None:
                continue
            chans = []
            for row, ib in zip(lb.pole_rows, lb.pole_ibase):
                self._ichan_rows.append(row)
                self._ichan_scale.append(1.0 / max(ib, 1e-9))
                chans.append(len(self._vchan_nodes) + len(self._ichan_rows) - 1)
            lb.oc_chans = chans
        for mb in self.motors:
            chans = []
            ib = mb.motor.params.i_pk_base
            for row in mb.pole_rows:
                self._ichan_rows.append(row)
                self._ichan_scale.append(1.0 / ib)
                chans.append(len(self._vchan_nodes) + len(self._ichan_rows) - 1)
            mb.oc_chans = chans

        # relay frequency channels: first energized phase of the bus
        self._freq_nodes = []
        self._freq_scale = []
        for lb in self.loads:
            if lb.relay is None:
                continue
            bus = fd.buses[lb.spec.bus]
            p = bus.phases[0]
            lb.freq_chan = len(self._freq_nodes)
            self._freq_nodes.append(self._bus_nodes[(bus.id, p)])
            self._freq_scale.append(1.0 / v_pk_of(bus.kv_ll))

        n_bank = len(self._vchan_nodes) + len(self._ichan_rows) + 1  # + zero
        self.bank = analysis.SlidingPhasorBank(n_bank, fd.f_hz, self.dt)
        self.zero_chan = n_bank - 1
        self.freq_bank = RelayFreqBank(len(self._freq_nodes), w0, self.dt)

        # staggered connection delays in declared priority order
        order = sc.stagger_order or sorted(
            lb.spec.id for lb in self.loads if lb.relay)
        by_id = {lb.spec.id: lb for lb in self.loads}
        staggered = [by_id[i] for i in order if i in by_id and by_id[i].relay]
        rest = [lb for lb in self.loads
                if lb.relay and lb.spec.id not in set(order)]
        seq = staggered + sorted(rest, key=lambda lb: lb.spec.id)
        settings = stagger_assign([lb.relay.settings for lb in seq],
                                  sc.relay_defaults.stagger_base_s,
                                  sc.relay_defaults.stagger_increment_s)
        for lb, s in zip(seq, settings):
            # explicit per-load connection wait beats the stagger assignment
            if "t_wait_con_s" not in lb.spec.relay:
                lb.relay.settings = s

        self.system = NodalSystem(m, self.dt, allow_dead_islands=True)

        # composite-load constant-current machinery
        cc = [(lb, eb) for lb in self.loads if lb.spec.model == "composite"
              for eb in lb.entries]
        self._cc_entries = cc
        self._cc_pos = np.array([eb.chan_pos for _, eb in cc], dtype=np.intp)
        self._cc_neg = np.array([eb.chan_neg if eb.chan_neg >= 0 else
                                 self.zero_chan for _, eb in cc], dtype=np.intp)
        self._cc_u = np.array([eb.i_rated_pk *
                               np.exp(-1j * eb.pf_angle) for _, eb in cc])
        self._cc_vbase = np.array([eb.v_base_pk for _, eb in cc])
        self._cc_active = np.zeros(len(cc), dtype=bool)
        own = sorted({eb.inj_pos for _, eb in cc}
                     | {eb.inj_neg for _, eb in cc if eb.inj_neg >= 0})
        self._cc_channels = np.array(own, dtype=np.intp)
        chan_row = {ch: r for r, ch in enumerate(own)}
        self._cc_scatter = np.zeros((len(own), len(cc)))
        for j, (_, eb) in enumerate(cc):
            self._cc_scatter[chan_row[eb.inj_pos], j] = -1.0  # load draws
            if eb.inj_neg >= 0:
                self._cc_scatter[chan_row[eb.inj_neg], j] = 1.0

        self._armed = False
        self._queued_switch = []
        self.events_log = []
        self._recorder_setup()

    def _recorder_setup(self):
        names = []
        for cb in self.convs:
            for p in PHASES:
                names += [f"{cb.spec.id}_{p}_{x}" for x in
                          ("v_mag_pu", "i_mag_pu", "p_pu", "q_pu", "f_hz")]
        for bus in self.feeder.buses.values():
            for p in bus.phases:
                names.append(f"bus_{bus.id}_{p}_v_pu")
        self._breaker_list = [lb for lb in self.loads if lb.switch] \
            + self.motors
        for b in self._breaker_list:
            bid = b.spec.id if hasattr(b, "spec") else b
            names.append(f"breaker_{bid}_closed")
        for mb in self.motors:
            names += [f"motor_{mb.spec.id}_speed_pu",
                      f"motor_{mb.spec.id}_torque_pu"]
        # extra documented channels after the contractual block
        for cb in self.convs:
            for p in PHASES:
                names += [f"{cb.spec.id}_{p}_vph_re", f"{cb.spec.id}_{p}_vph_im",
                          f"{cb.spec.id}_{p}_limited", f"{cb.spec.id}_{p}_v_gfm_pu"]
        for cb in self.convs:
            names += [f"{cb.spec.id}_p_total_w", f"{cb.spec.id}_q_total_w"]
        for mb in self.motors:
            names.append(f"motor_{mb.spec.id}_slip")
        self._rec_names = names

    # -- events ----------------------------------------------------------------

    def _log(self, t, actor, action, cause):
        self.events_log.append((t, actor, action, cause))

    def _find_conv(self, cid):
        for cb in self.convs:
            if cb.spec.id == cid:
                return cb
        raise ValidationError(cid, f"unknown converter {cid!r}")

    def _find_motor(self, mid):
        for mb in self.motors:
            if mb.spec.id == mid:
                return mb
        raise ValidationError(mid, f"unknown motor {mid!r}")

    def _apply_event(self, idx, ev, t):
        bank = self.conv_bank
        if ev.action == "energize_converter":
            cb = self._find_conv(ev.params["converter"])
            self.system.on_switch_event(cb.switch, True)
            bank.energize(cb.k, t)
        elif ev.action == "begin_soft_start":
            cb = self._find_conv(ev.params["converter"])
            bank.begin_soft_start(cb.k, t)
        elif ev.action == "start_presync":
            cb = self._find_conv(ev.params["converter"])
            cb.pll_active = True
        elif ev.action == "connect_converter":
            cb = self._find_conv(ev.params["converter"])
            err = math.radians(float(ev.params.get("angle_error_deg", 0.0)))
            presync_handoff(cb.pll, bank, cb.k, t, angle_error_rad=err)
            cb.pll_active = False
            self.system.on_switch_event(cb.switch, True)
        elif ev.action == "arm_relays":
            self._armed = True
            for lb in self.loads:
                if lb.relay:
                    lb.relay.arm()
        elif ev.action == "apply_fault":
            self.system.on_switch_event(self.fault_switches[idx], True)
        elif ev.action == "clear_fault":
            for name in self.fault_switches.values():
                self.system.on_switch_event(name, False)
        elif ev.action == "connect_motor":
            mb = self._find_motor(ev.params["motor"])
            mb.motor.reset()
            mb.motor.t_load = 0.0
            mb.connected = True
            mb.oc.breaker_closed = True
            self.system.on_switch_event(mb.switch, True)
        elif ev.action == "set_motor_torque":
            mb = self._find_motor(ev.params["motor"])
            mb.motor.t_load = float(ev.params["torque_pu"])
        elif ev.action == "set_parameter":
            self._set_parameter(ev.params)
        self._log(t, "timeline", ev.action, _event_cause(ev))

    def _set_parameter(self, params):
        target = params.get("converter")
        if target:
            cb = self._find_conv(target)
            field_ = params["field"]
            value = float(params["value"])
            if field_ == "v_set_pu":
                self.conv_bank.set_voltage_target(cb.k, value)
            elif field_ == "p_set_pu":
                self.conv_bank.p_set_pu[cb.k, :] = value
            elif field_ == "q_set_pu":
                self.conv_bank.q_set_pu[cb.k, :] = value
            else:
                raise ValidationError(field_, "unknown converter parameter")
            return
        if params.get("motor"):
            mb = self._find_motor(params["motor"])
            mb.motor.t_load = float(params["value"])
            return
        raise ValidationError("set_parameter", "needs a converter or motor target")

    # -- main loop ---------------------------------------------------------------

    def run(self, t_end=None) -> RunRecord:
        sc = self.scenario
        dt = self.dt
        t_stop = float(t_end if t_end is not None else sc.t_end_s)
        n_steps = int(round(t_stop / dt))
        decim = self.decimation
        n_samp = (n_steps + decim - 1) // decim

        sys_ = self.system
        bank = self.conv_bank
        pbank = self.bank
        fbank = self.freq_bank

        rec = RunRecord(self._rec_names, {
            "converters": [cb.spec.id for cb in self.convs],
            "ratings": [cb.spec.s_va for cb in self.convs],
            "buses": [(b.id, b.phases) for b in self.feeder.buses.values()],
            "dt_s": dt, "decimation": decim,
        })
        rec.t = np.empty(n_samp)
        rec.data = np.empty((n_samp, len(self._rec_names)))
        samp = 0

        v_nodes = np.array(self._vchan_nodes, dtype=np.intp)
        v_scale = np.array(self._vchan_scale)
        i_rows = np.array(self._ichan_rows, dtype=np.intp)
        i_scale = np.array(self._ichan_scale)
        fr_nodes = np.array(self._freq_nodes, dtype=np.intp)
        fr_scale = np.array(self._freq_scale)
        bank_x = np.zeros(pbank.n)
        nv = len(v_nodes)

        conv_fil = np.array([cb.fil_nodes for cb in self.convs], dtype=np.intp)
        conv_lf = np.array([cb.lf_rows for cb in self.convs], dtype=np.intp)
        conv_brk = np.array([cb.brk_rows for cb in self.convs], dtype=np.intp)
        src_map = np.array([ch for cb in self.convs for ch in cb.src_channels],
                           dtype=np.intp)

        src_v = np.zeros(self.model.n_sources)
        inj = np.zeros(max(len(self.model.injection_nodes), 1))
        events = sc.events
        ev_idx = 0
        w0 = self.omega0

        for k in range(n_steps):
            t = k * dt

            while ev_idx < len(events) and events[ev_idx].t_s <= t + 1e-12:
                self._apply_event(ev_idx, events[ev_idx], t)
                ev_idx += 1
            if self._queued_switch:
                for name, closed, actor, action, cause in self._queued_switch:
                    self.system.on_switch_event(name, closed)
                    self._log(t, actor, action, cause)
                self._queued_switch.clear()

            v = sys_.step(source_v=src_v,
                          injections=inj if self.model.injection_nodes else None,
                          step_index=k)

            bank_x[:nv] = v[v_nodes] * v_scale
            if i_rows.size:
                bank_x[nv:-1] = sys_.srl_i[i_rows] * i_scale
            pbank.update(bank_x, t)
            mags = pbank.magnitudes()

            if fr_nodes.size:
                freqs = fbank.step(v[fr_nodes] * fr_scale)
            else:
                freqs = fbank.freq_hz

            if bank is not None:
                for cb in self.convs:
                    if cb.pll_active:
                        vpu = v[cb.lv_nodes] / bank.v_pk[cb.k, 0]
                        cb.pll.step(vpu)
                        # form the open-breaker filter voltage in sync with
                        # the grid so closing causes no charging transient
                        bank.slave_to_angle(cb.k, cb.pll.theta,
                                            cb.pll.magnitude)
                v_fil = v[conv_fil]
                i_fil = sys_.srl_i[conv_lf]
                io = sys_.srl_i[conv_brk]
                vsw = bank.step(t, v_fil, i_fil, io)
                src_v[src_map] = vsw.reshape(-1)

            for mb in self.motors:
                if mb.connected:
                    i_drawn = -sys_.srl_i[mb.stator_rows]
                    mb.motor.absorb_stator_current(i_drawn, dt, step_index=k)
                    src_v[mb.src_channels] = mb.motor.emf_volts()
                else:
                    src_v[mb.src_channels] = 0.0

            self._composite_step(mags, t + dt, inj)
            self._relay_step(mags, freqs, dt, t)

            if k % decim == 0:
                rec.t[samp] = t
                self._record_row(rec.data[samp], mags, pbank)
                samp += 1

        rec.t = rec.t[:samp]
        rec.data = rec.data[:samp]
        rec.events = list(self.events_log)
        return rec

    def _composite_step(self, mags, t_next, inj):
        pos = self._cc_pos
        if pos.size:
            ph = self.bank.phasors()
            pair = ph[pos] - ph[self._cc_neg]
            pmag = np.abs(pair)
        # per-load mode decision on the min entry magnitude
        j = 0
        changed = False
        for lb in self.loads:
            if lb.spec.model != "composite":
                continue
            n_e = len(lb.entries)
            vmin = (pmag[j:j + n_e] / self._cc_vbase[j:j + n_e]).min() \
                if self.bank.warmed else 0.0
            want_cc = components.composite_mode(vmin)
            if want_cc != lb.constant_current:
                lb.constant_current = want_cc
                for eb in lb.entries:
                    self.system.set_branch_enabled("srl", eb.branch_row,
                                                   not want_cc)
                self._log(t_next, f"load:{lb.spec.id}", "mode",
                          "constant_current" if want_cc else "constant_impedance")
                changed = True
            self._cc_active[j:j + n_e] = want_cc
            j += n_e
        if pos.size:
            safe = np.where(pmag > 1e-9, pmag, 1.0)
            u = np.where(self._cc_active & (pmag > 1e-9),
                         (pair / safe) * self._cc_u, 0.0)
            wt = self.omega0 * t_next
            i_inst = u.real * math.cos(wt) - u.imag * math.sin(wt)
            inj[self._cc_channels] = self._cc_scatter @ i_inst
        return changed

    def _relay_step(self, mags, freqs, dt, t):
        warmed = self.bank.warmed
        for lb in self.loads:
            if lb.oc is not None and lb.oc.breaker_closed and warmed:
                i_max = float(mags[lb.oc_chans].max())
                cmd = lb.oc.step(i_max, dt)
                if cmd == "pickup":
                    self._log(t, f"relay:{lb.spec.id}", "oc_pickup",
                              f"i={i_max:.2f}pu >= {lb.oc.settings.pickup_pu}pu")
                elif cmd == "trip":
                    self._queued_switch.append(
                        (lb.switch, False, f"relay:{lb.spec.id}", "trip",
                         f"overcurrent for {lb.oc.settings.definite_time_s * 1e3:.1f}ms"))
                    if lb.relay:
                        lb.relay.breaker_closed = False
            if lb.relay is None or not self._armed:
                continue
            if lb.oc is not None and lb.oc.latched:
                continue   # faulted lateral stays isolated
            vm = mags[lb.bus_vchans]
            f = float(freqs[lb.freq_chan]) if lb.freq_chan >= 0 else 60.0
            cmd = lb.relay.step(f, float(vm.min()), float(vm.max()), dt)
            if cmd == "close":
                self._queued_switch.append(
                    (lb.switch, True, f"relay:{lb.spec.id}", "close",
                     f"f,V in window for {lb.relay.settings.t_wait_con_s:.1f}s"))
                if lb.oc:
                    lb.oc.breaker_closed = True
            elif cmd == "open":
                self._queued_switch.append(
                    (lb.switch, False, f"relay:{lb.spec.id}", "open",
                     "f or V out of window"))
                if lb.oc:
                    lb.oc.breaker_closed = False
        for mb in self.motors:
            if mb.oc is not None and mb.connected and warmed:
                i_max = float(mags[mb.oc_chans].max())
                cmd = mb.oc.step(i_max, dt)
                if cmd == "trip":
                    self._queued_switch.append(
                        (mb.switch, False, f"relay:{mb.spec.id}", "trip",
                         "overcurrent"))
                    mb.connected = False

    def _record_row(self, row, mags, pbank):
        i = 0
        bank = self.conv_bank
        ph = None
        for cb in self.convs:
            k = cb.k
            for j, p in enumerate(PHASES):
                row[i] = mags[cb.fil_vchans[j]]
                row[i + 1] = mags[cb.ifil_chans[j]]
                row[i + 2] = bank.p[k, j]
                row[i + 3] = bank.q[k, j]
                row[i + 4] = bank.omega[k, j] / (2 * np.pi)
                i += 5
        for bus in self.feeder.buses.values():
            for p in bus.phases:
                row[i] = mags[self._bus_chans[(bus.id, p)]]
                i += 1
        for b in self._breaker_list:
            row[i] = 1.0 if self.model.switches[b.switch].closed else 0.0
            i += 1
        for mb in self.motors:
            row[i] = mb.motor.speed_pu
            row[i + 1] = mb.motor.torque_pu
            i += 2
        if self.convs:
            ph = pbank.phasors()
        for cb in self.convs:
            for j in range(3):
                c = ph[cb.fil_vchans[j]]
                row[i] = c.real
                row[i + 1] = c.imag
                row[i + 2] = 1.0 if bank.limited[cb.k, j] else 0.0
                row[i + 3] = bank.v_gfm[cb.k, j]
                i += 4
        for cb in self.convs:
            s3 = cb.spec.s_va / 3.0
            row[i] = bank.p[cb.k].sum() * s3
            row[i + 1] = bank.q[cb.k].sum() * s3
            i += 2
        for mb in self.motors:
            row[i] = mb.motor.slip
            i += 1


def _relay_settings(defaults, overrides):
    return LoadRelaySettings(
        f_min_hz=float(overrides.get("f_min_hz", defaults.f_min_hz)),
        v_min_pu=float(overrides.get("v_min_pu", defaults.v_min_pu)),
        v_max_pu=float(overrides.get("v_max_pu", defaults.v_max_pu)),
        t_wait_con_s=float(overrides.get("t_wait_con_s", 1.0)),
        t_wait_dis_s=float(overrides.get("t_wait_dis_s", defaults.t_wait_dis_s)),
    )


def _event_cause(ev):
    extras = ", ".join(f"{k}={v}" for k, v in ev.params.items())
    return extras or "timeline"


def run(feeder, scenario, dt=None, decimation=None, t_end=None) -> RunRecord:
    """Execute one scenario; feeder/scenario may be parsed objects, dicts or
    paths."""
    if not isinstance(feeder, FeederDescription):
        feeder = parse_feeder(feeder)
    if not isinstance(scenario, Scenario):
        scenario = parse_scenario(scenario)
    sim = BlackStartRun(feeder, scenario, dt=dt, decimation=decimation)
    return sim.run(t_end=t_end)


# --------------------------------------------------------------------------
# ks sweep
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    ks: float
    v_uf: float
    p_uf: float
    q_uf: float
    converged: bool


def _feeder_with_ks(raw: dict, converter_id: str, ks: float,
                    other_ks: float = 1e5) -> dict:
    import copy
    out = copy.deepcopy(raw)
    seen = False
    for cv in out.get("converters", []):
        g = cv.setdefault("gains", {})
        if cv.get("id") == converter_id:
            g["ks"] = ks
            seen = True
        else:
            g["ks"] = other_ks
    if not seen:
        raise ValidationError(converter_id, "designated converter not found")
    return out


def _sweep_point(args):
    feeder_raw, scenario_raw, converter_id, ks, dt = args
    feeder = parse_feeder(_feeder_with_ks(feeder_raw, converter_id, ks))
    scenario = parse_scenario(scenario_raw)
    rec = run(feeder, scenario, dt=dt)
    start, end = rec.steady_window(scenario.fault_time())
    mask = rec.window_mask(start, end)
    mid = 0.5 * (start + end)
    uf = rec.converter_unbalance(converter_id, mask)
    first = rec.converter_unbalance(converter_id, rec.window_mask(start, mid))
    second = rec.converter_unbalance(converter_id, rec.window_mask(mid, end))
    converged = True
    for a, b in ((first.v_uf, second.v_uf), (first.p_uf, second.p_uf),
                 (first.q_uf, second.q_uf)):
        scale = max(abs(a), abs(b), 1e-3)
        if abs(a - b) / scale > 0.01:
            converged = False
    return SweepRow(ks, uf.v_uf, uf.p_uf, uf.q_uf, converged)


def sweep_ks(feeder, scenario, ks_values, converter_id, jobs=1, dt=None):
    """One run per ks value; the non-designated converters hold ks = 1e5."""
    if not isinstance(feeder, FeederDescription):
        feeder = parse_feeder(feeder)
    if not isinstance(scenario, Scenario):
        scenario = parse_scenario(scenario)
    for ks in ks_values:
        if ks <= 0:
            raise ValidationError("ks", "sweep values must be positive")
    args = [(feeder.raw, scenario.raw, converter_id, float(ks), dt)
            for ks in ks_values]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, args))
    else:
        rows = [_sweep_point(a) for a in args]
    return rows
