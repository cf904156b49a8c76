"""Generalized per-phase grid-forming droop control.

Each converter runs three single-phase droop controllers coupled through a
phase-balancing gain ks:

    d(delta_p)/dt = w0 - sum_{l != p} ks (delta_p - delta_l) + mp (Pp* - Pp)
    Vp = Vp* - sum_{l != p} ks (Vp - Vl) + mq (Qp* - Qp)

The angle equation is integrated with an exact exponential update on the
common/differential mode split of the complete-graph Laplacian, which stays
stable for arbitrarily large ks (forward Euler diverges for ks >> 1/dt). The
voltage equation is implicit in Vp and solved in closed form each step.

Per-phase quadrature signals come from second-order generalized integrators
(SOGI); each phase is then controlled in its own rotating frame by a standard
dual-loop PI voltage/current controller whose current reference magnitude is
clipped per phase, so a faulted phase saturates without disturbing healthy
phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT2 = math.sqrt(2.0)
THETA_BAL = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])


class PresyncError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Droop laws
# --------------------------------------------------------------------------

def droop_angle_update(delta, p_pu, p_set_pu, ks, mp_rad, omega0, dt):
    """Advance the three coupled phase angles one step.

    delta, p_pu, p_set_pu: (3,) arrays (or (n, 3) for stacked converters with
    ks as (n, 1)). mp_rad converts per-unit power deviation to rad/s.
    Returns (delta_new, omega) with omega the per-phase frequency in rad/s.

    Summing the three equations cancels the balancing terms exactly, so the
    common mode integrates plainly while the differential mode relaxes with
    rate 3 ks; both are advanced by their exact solutions for piecewise
    constant power input.
    """
    u = omega0 + mp_rad * (p_set_pu - p_pu)
    ks = np.asarray(ks, dtype=float)
    if np.all(ks == 0.0):
        delta_new = delta + dt * u
        return delta_new, u
    u_mean = u.mean(axis=-1, keepdims=True)
    u_dev = u - u_mean
    d_mean = delta.mean(axis=-1, keepdims=True)
    d_dev = delta - d_mean
    decay = np.exp(-3.0 * ks * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(ks > 0.0, (1.0 - decay) / (3.0 * ks), dt)
    d_dev_new = decay * d_dev + gain * u_dev
    delta_new = d_mean + dt * u_mean + d_dev_new
    omega = u - 3.0 * ks * d_dev_new
    return delta_new, omega


def droop_voltage_solve(q_pu, q_set_pu, v_set_pu, ks, mq_pu):
    """Closed-form solution of the implicit per-phase voltage droop.

    (I + ks L) V = V* + mq (Q* - Q), with L the Laplacian of the complete
    3-vertex graph; the inverse acts as identity on the common mode and as
    1/(1 + 3 ks) on the differential mode.
    """
    rhs = v_set_pu + mq_pu * (q_set_pu - q_pu)
    ks = np.asarray(ks, dtype=float)
    if np.all(ks == 0.0):
        return rhs   # three decoupled single-phase droops
    mean = rhs.mean(axis=-1, keepdims=True)
    return mean + (rhs - mean) / (1.0 + 3.0 * ks)


def per_phase_power(v_inphase, v_quad, i_inphase, i_quad):
    """Instantaneous single-phase P/Q from quadrature pairs in peak-pu.

    Rated in-phase sinusoids give P = 1; a current lagging 90 degrees gives
    Q = +1.
    """
    p = v_inphase * i_inphase + v_quad * i_quad
    q = v_quad * i_inphase - v_inphase * i_quad
    return p, q


def limit_current_reference(i_d, i_q, i_max):
    """Clip the per-phase reference magnitude, preserving its angle.

    Returns (i_d, i_q, clipped_mask). Idempotent; phases are independent.
    """
    mag = np.hypot(i_d, i_q)
    clipped = mag > i_max
    scale = np.ones_like(mag)
    np.divide(np.broadcast_to(i_max, mag.shape), mag, out=scale, where=clipped)
    return i_d * scale, i_q * scale, clipped


def soft_start_ramp(t_since_start, duration, target):
    """Linear 0 -> target ramp, clamped at target after `duration`."""
    if duration <= 0:
        raise ValueError("ramp duration must be positive")
    if t_since_start <= 0.0:
        return 0.0 * target
    frac = min(t_since_start / duration, 1.0)
    return frac * target


# --------------------------------------------------------------------------
# Signal generation
# --------------------------------------------------------------------------

class SogiBank:
    """Second-order generalized integrators over n channels, trapezoidal.

    For an input A cos(w0 t + phi) the settled outputs are the in-phase
    component and its 90-degree lagged copy (A sin(w0 t + phi)).
    """

    def __init__(self, n_channels: int, omega0: float, dt: float,
                 k: float = SQRT2):
        self.n = n_channels
        self.k = k
        a = omega0 * np.array([[-k, -1.0], [1.0, 0.0]])
        b = omega0 * np.array([k, 0.0])
        eye = np.eye(2)
        m = np.linalg.inv(eye - 0.5 * dt * a)
        self._m1 = m @ (eye + 0.5 * dt * a)
        self._m2 = m @ (dt * b)
        self.x = np.zeros(n_channels)   # in-phase
        self.q = np.zeros(n_channels)   # quadrature (lagging)
        self._u_prev = np.zeros(n_channels)

    def step(self, u):
        um = 0.5 * (u + self._u_prev)
        m1 = self._m1
        x_new = m1[0, 0] * self.x + m1[0, 1] * self.q + self._m2[0] * um
        q_new = m1[1, 0] * self.x + m1[1, 1] * self.q + self._m2[1] * um
        self.x = x_new
        self.q = q_new
        self._u_prev = np.asarray(u, dtype=float).copy()
        return x_new, q_new

    @property
    def amplitude(self):
        return np.hypot(self.x, self.q)


class ThreePhasePll:
    """Synchronous-reference-frame PLL on the positive-sequence voltage."""

    def __init__(self, omega0: float, dt: float, bandwidth_hz: float = 8.0,
                 min_lock_s: float = 0.5):
        self.omega0 = omega0
        self.dt = dt
        wn = 2.0 * np.pi * bandwidth_hz
        self.kp = 2.0 * wn
        self.ki = wn * wn
        self.theta = 0.0
        self.omega_i = 0.0
        self.q_f = 0.0
        self._lock_steps = 0
        self._lock_steps_needed = max(int(round(min_lock_s / dt)), 1)
        self.synchronized = False
        self.magnitude = 0.0

    @property
    def locked_for(self) -> float:
        return self._lock_steps * self.dt

    @property
    def freq_hz(self) -> float:
        return (self.omega0 + self.omega_i + self.kp * self.q_f) / (2.0 * np.pi)

    def step(self, v_abc_pu):
        va, vb, vc = v_abc_pu
        alpha = (2.0 * va - vb - vc) / 3.0
        beta = (vb - vc) / math.sqrt(3.0)
        mag = math.hypot(alpha, beta)
        self.magnitude = mag
        if mag < 0.1:
            # loss of signal: hold the last estimate
            self.synchronized = False
            self._lock_steps = 0
            self.theta = (self.theta + (self.omega0 + self.omega_i) * self.dt) % (2 * np.pi)
            return
        q = (beta * math.cos(self.theta) - alpha * math.sin(self.theta)) / mag
        a = 1.0 - math.exp(-self.dt / 0.005)
        self.q_f += a * (q - self.q_f)
        self.omega_i += self.ki * self.q_f * self.dt
        omega = self.omega0 + self.omega_i + self.kp * self.q_f
        self.theta = (self.theta + omega * self.dt) % (2 * np.pi)
        self._lock_steps += 1
        self.synchronized = self._lock_steps >= self._lock_steps_needed


# --------------------------------------------------------------------------
# Converter control bank
# --------------------------------------------------------------------------

@dataclass
class GfmGains:
    mp_pct: float = 5.0      # P-f droop, percent of w0 per 1 pu phase power
    mq_pct: float = 5.0      # Q-V droop, percent of nominal V per 1 pu var
    ks: float = 1.0
    i_max_pu: float = 1.2
    kp_v: float = 0.45
    ki_v: float = 70.0
    kp_i: float = 2.0
    ki_i: float = 120.0
    power_filter_hz: float = 20.0
    # reactive power feeds the magnitude droop; a slower filter there calms
    # the V-Q envelope interaction with near-synchronous motor loads
    q_filter_hz: float = 20.0
    # washout-filtered virtual resistance on the output current: damps the
    # inter-converter swing mode without touching the steady droop laws
    r_damp_pu: float = 0.15
    washout_hz: float = 3.0

    def __post_init__(self):
        if self.mp_pct <= 0 or self.mq_pct <= 0:
            raise ValueError("droop coefficients must be positive")
        if self.ks < 0:
            raise ValueError("phase-balancing gain must be non-negative")
        if self.i_max_pu <= 0:
            raise ValueError("current limit must be positive")


@dataclass
class ConverterRatings:
    s_va: float
    v_ll_rms: float
    l_f_pu: float = 0.08
    r_f_pu: float = 0.005
    c_f_pu: float = 0.07
    # damping resistor in series with the filter capacitor; tames the
    # leakage/C_f resonance that otherwise sits near the current loop
    rd_pu: float = 0.3

    @property
    def v_pk(self) -> float:
        return SQRT2 * self.v_ll_rms / math.sqrt(3.0)

    @property
    def i_pk(self) -> float:
        return SQRT2 * self.s_va / (math.sqrt(3.0) * self.v_ll_rms)

    @property
    def z_base(self) -> float:
        return self.v_ll_rms**2 / self.s_va

    def filter_values(self, omega0: float):
        """(L_f henry, R_f ohm, C_f farad) of the output LC filter."""
        z = self.z_base
        return (self.l_f_pu * z / omega0, self.r_f_pu * z,
                self.c_f_pu / (z * omega0))

    def cap_damping_beta(self, omega0: float, dt: float) -> float:
        """Series-R damping of the C_f branch in companion-ESR form."""
        c_f = self.c_f_pu / (self.z_base * omega0)
        return self.rd_pu * self.z_base * 2.0 * c_f / dt


STAGE_STANDBY = 0
STAGE_FORMING = 1


class GfmConverterBank:
    """All converters of one run stepped together on stacked (n, 3) arrays.

    Measurements arrive in SI volts/amps; the commanded averaged terminal
    voltage is returned in volts. Converters in standby keep their signal
    filters running but hold droop/PI state and output 0 V.
    """

    def __init__(self, names, ratings, gains, omega0: float, dt: float,
                 soft_start_s=2.0):
        self.names = list(names)
        n = len(self.names)
        self.n = n
        self.omega0 = omega0
        self.dt = dt
        self.ratings = list(ratings)
        self.gains = list(gains)

        self.v_pk = np.array([r.v_pk for r in self.ratings])[:, None]
        self.i_pk = np.array([r.i_pk for r in self.ratings])[:, None]
        self.ks = np.array([g.ks for g in self.gains])[:, None]
        self.mp_rad = np.array([g.mp_pct / 100.0 for g in self.gains])[:, None] * omega0
        self.mq_pu = np.array([g.mq_pct / 100.0 for g in self.gains])[:, None]
        self.i_max = np.array([g.i_max_pu for g in self.gains])[:, None]
        self.kp_v = np.array([g.kp_v for g in self.gains])[:, None]
        self.ki_v = np.array([g.ki_v for g in self.gains])[:, None]
        self.kp_i = np.array([g.kp_i for g in self.gains])[:, None]
        self.ki_i = np.array([g.ki_i for g in self.gains])[:, None]
        self.l_pu = np.array([r.l_f_pu for r in self.ratings])[:, None]
        self.c_pu = np.array([r.c_f_pu for r in self.ratings])[:, None]
        pf = np.array([g.power_filter_hz for g in self.gains])[:, None]
        self.pf_alpha = 1.0 - np.exp(-2.0 * np.pi * pf * dt)
        qf = np.array([g.q_filter_hz for g in self.gains])[:, None]
        self.qf_alpha = 1.0 - np.exp(-2.0 * np.pi * qf * dt)
        self.r_damp = np.array([g.r_damp_pu for g in self.gains])[:, None]
        wash_hz = np.array([g.washout_hz for g in self.gains])[:, None]
        self.wash_alpha = 1.0 - np.exp(-2.0 * np.pi * wash_hz * dt)
        self.io_d_f = np.zeros((n, 3))
        self.io_q_f = np.zeros((n, 3))

        ss = np.broadcast_to(np.asarray(soft_start_s, dtype=float), (n,))
        self.soft_start_s = np.array(ss, dtype=float)

        # 9 signals per converter: v, i, io (3 phases each)
        self.sogi = SogiBank(9 * n, omega0, dt)

        self.stage = np.zeros(n, dtype=int)
        self.t_forming = np.full(n, -1.0)     # time forming began
        self.t_ramp_start = np.full(n, np.inf)
        self.v_target_pu = np.ones((n, 3))
        self.v_goal_pu = np.ones((n, 3))      # v_target relaxes toward this
        self.v_target_rate = 0.1              # pu per second
        self.p_set_pu = np.zeros((n, 3))
        self.q_set_pu = np.zeros((n, 3))
        self._qgain_f = np.ones((n, 3))
        self._qgain_alpha = 1.0 - math.exp(-dt / 0.2)

        self.delta = np.tile(THETA_BAL * 0.0, (n, 1))
        self.omega = np.full((n, 3), omega0)
        self.v_gfm = np.zeros((n, 3))
        self.p = np.zeros((n, 3))
        self.q = np.zeros((n, 3))
        self.integ_vd = np.zeros((n, 3))
        self.integ_vq = np.zeros((n, 3))
        self.integ_id = np.zeros((n, 3))
        self.integ_iq = np.zeros((n, 3))
        self.limited = np.zeros((n, 3), dtype=bool)
        self.v_sw = np.zeros((n, 3))
        self._amp_v = np.zeros((n, 3))
        self._amp_i = np.zeros((n, 3))
        self._amp_io = np.zeros((n, 3))

    def index(self, name: str) -> int:
        return self.names.index(name)

    # -- lifecycle ----------------------------------------------------------

    def energize(self, k: int, t: float):
        """Start forming with a zero setpoint; soft start ramps it later."""
        self.stage[k] = STAGE_FORMING
        self.t_forming[k] = t
        self.t_ramp_start[k] = np.inf

    def begin_soft_start(self, k: int, t: float):
        self.t_ramp_start[k] = t

    def connect_with_angle(self, k: int, theta: float, t: float,
                           omega_meas=None):
        """Pre-synchronized start: droop angles seeded from a PLL estimate.

        Seeding the power filter with the droop-consistent preload makes the
        converter start at the measured grid frequency instead of stepping in
        from nominal. A converter already forming (live presync behind its
        open breaker) keeps its inner-loop state; a cold one starts clean.
        """
        cold = self.stage[k] != STAGE_FORMING
        self.stage[k] = STAGE_FORMING
        self.t_forming[k] = t
        self.t_ramp_start[k] = -np.inf   # full setpoint immediately
        self.delta[k, :] = theta
        if omega_meas is not None:
            self.p[k, :] = self.p_set_pu[k, :] + (
                (self.omega0 - omega_meas) / self.mp_rad[k, 0])
        if cold:
            self.v_target_pu[k, :] = 1.0
            self.integ_vd[k] = 0.0
            self.integ_vq[k] = 0.0
            self.integ_id[k] = 0.0
            self.integ_iq[k] = 0.0
        # else: hold the grid-matched magnitude; step() relaxes the target
        # back to the nominal goal slowly

    def slave_to_angle(self, k: int, theta: float, v_mag_pu: float):
        """Presync tracking: form the filter voltage at the measured grid
        angle and magnitude while the breaker is still open."""
        if self.stage[k] != STAGE_FORMING:
            self.stage[k] = STAGE_FORMING
            self.t_ramp_start[k] = -np.inf
        self.delta[k, :] = theta
        self.v_target_pu[k, :] = min(max(v_mag_pu, 0.0), 1.1)

    def set_voltage_target(self, k: int, value):
        """Immediate setpoint change (both the target and its goal)."""
        self.v_target_pu[k, :] = value
        self.v_goal_pu[k, :] = value

    def setpoint_scale(self, t: float):
        """Per-converter soft-start scaling of the voltage setpoints."""
        since = t - self.t_ramp_start
        frac = np.clip(since / self.soft_start_s, 0.0, 1.0)
        frac[np.isnan(frac)] = 0.0
        return frac

    # -- one control step -----------------------------------------------------

    def step(self, t, v_abc, i_abc, io_abc):
        """v/i/io: (n, 3) SI measurements. Returns v_sw (n, 3) volts."""
        n = self.n
        v_pu = v_abc / self.v_pk
        i_pu = i_abc / self.i_pk
        io_pu = io_abc / self.i_pk

        u = np.concatenate(
            [v_pu.reshape(-1), i_pu.reshape(-1), io_pu.reshape(-1)]
        )
        x, qx = self.sogi.step(u)
        # the quadrature output of a SOGI tuned at w0 carries gain w0/w for a
        # signal at w; each phase runs off-nominal by its own droop frequency.
        # De-bias with a slow-filtered estimate so the correction fixes the
        # steady-state droop law without coupling into swing dynamics.
        self._qgain_f += self._qgain_alpha * (self.omega / self.omega0
                                              - self._qgain_f)
        qgain = self._qgain_f
        vx = x[: 3 * n].reshape(n, 3)
        vq = qx[: 3 * n].reshape(n, 3) * qgain
        ix = x[3 * n: 6 * n].reshape(n, 3)
        iq = qx[3 * n: 6 * n].reshape(n, 3) * qgain
        iox = x[6 * n:].reshape(n, 3)
        ioq = qx[6 * n:].reshape(n, 3) * qgain

        self._amp_v = np.hypot(vx, vq)
        self._amp_i = np.hypot(ix, iq)
        self._amp_io = np.hypot(iox, ioq)

        p_inst, q_inst = per_phase_power(vx, vq, iox, ioq)
        self.p += self.pf_alpha * (p_inst - self.p)
        self.q += self.qf_alpha * (q_inst - self.q)

        forming = (self.stage == STAGE_FORMING)[:, None]

        delta_new, omega = droop_angle_update(
            self.delta, self.p, self.p_set_pu, self.ks, self.mp_rad,
            self.omega0, self.dt,
        )
        self.delta = np.where(forming, delta_new, self.delta)
        self.omega = np.where(forming, omega, self.omega0)

        step_lim = self.v_target_rate * self.dt
        self.v_target_pu += np.clip(self.v_goal_pu - self.v_target_pu,
                                    -step_lim, step_lim)
        v_set = self.v_target_pu * self.setpoint_scale(t)[:, None]
        self.v_gfm = droop_voltage_solve(
            self.q, self.q_set_pu, v_set, self.ks, self.mq_pu
        )

        theta = self.delta + THETA_BAL
        c = np.cos(theta)
        s = np.sin(theta)

        v_d = vx * c + vq * s
        v_q = -vx * s + vq * c
        i_d = ix * c + iq * s
        i_q = -ix * s + iq * c
        io_d = iox * c + ioq * s
        io_q = -iox * s + ioq * c

        # transient virtual resistance: reference sags against fast output
        # current changes and recovers as the washout filter catches up
        self.io_d_f += self.wash_alpha * (io_d - self.io_d_f)
        self.io_q_f += self.wash_alpha * (io_q - self.io_q_f)
        ev_d = self.v_gfm - self.r_damp * (io_d - self.io_d_f) - v_d
        ev_q = -self.r_damp * (io_q - self.io_q_f) - v_q
        iref_d = self.kp_v * ev_d + self.integ_vd + io_d - self.c_pu * v_q
        iref_q = self.kp_v * ev_q + self.integ_vq + io_q + self.c_pu * v_d

        iref_d, iref_q, clipped = limit_current_reference(iref_d, iref_q, self.i_max)
        self.limited = clipped & forming

        # anti-windup: voltage-loop integrators freeze while their phase clips
        free = forming & ~clipped
        self.integ_vd += np.where(free, self.ki_v * ev_d * self.dt, 0.0)
        self.integ_vq += np.where(free, self.ki_v * ev_q * self.dt, 0.0)

        ei_d = iref_d - i_d
        ei_q = iref_q - i_q
        cmd_d = self.kp_i * ei_d + self.integ_id + v_d - self.l_pu * i_q
        cmd_q = self.kp_i * ei_q + self.integ_iq + v_q + self.l_pu * i_d
        self.integ_id += np.where(forming, self.ki_i * ei_d * self.dt, 0.0)
        self.integ_iq += np.where(forming, self.ki_i * ei_q * self.dt, 0.0)

        v_sw_pu = np.where(forming, cmd_d * c - cmd_q * s, 0.0)
        self.v_sw = v_sw_pu * self.v_pk
        return self.v_sw

    # -- telemetry -------------------------------------------------------------

    @property
    def freq_hz(self):
        return self.omega / (2.0 * np.pi)

    def amplitudes(self):
        """(v, i, io) per-unit amplitude estimates, frequency-debiased."""
        return self._amp_v, self._amp_i, self._amp_io


def presync_handoff(pll: ThreePhasePll, bank: GfmConverterBank, k: int,
                    t: float, angle_error_rad: float = 0.0):
    """Initialize converter k's droop angles from a settled PLL estimate.

    Raises PresyncError while the PLL is not synchronized.
    """
    if not pll.synchronized:
        raise PresyncError("handoff refused: PLL not synchronized")
    bank.connect_with_angle(k, pll.theta + angle_error_rad, t,
                            omega_meas=2.0 * np.pi * pll.freq_hz)
