"""Dynamic three-phase induction machine.

The machine is split at its transient impedance: the stator R_s + L'
(L' = transient inductance) is a passive branch, and everything behind it is
an EMF driven by the rotor flux. The network solver carries the stator
branch implicitly, so the co-simulation interface stays stable even when
every source in the island is current-limited; only the slowly varying EMF
crosses the interface one step late. Standalone stepping (step with terminal
volts) integrates the same stator branch internally with the trapezoidal
rule, so both paths share one set of machine states.

All machine quantities are per-unit on the machine base with peak phase
voltage/current bases; instantaneous abc samples map directly onto the
two-axis model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import InvalidElementError, NumericalError

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)


@dataclass
class InductionMotorParams:
    s_va: float
    v_ll_rms: float
    rs: float = 0.01
    rr: float = 0.015
    xls: float = 0.10
    xlr: float = 0.10
    xm: float = 3.0
    h_s: float = 0.5
    pole_pairs: int = 2

    def __post_init__(self):
        if min(self.s_va, self.v_ll_rms, self.rs, self.rr,
               self.xls, self.xlr, self.xm, self.h_s) <= 0:
            raise InvalidElementError("motor parameters must be positive")

    @property
    def v_pk_base(self) -> float:
        return SQRT2 * self.v_ll_rms / SQRT3

    @property
    def i_pk_base(self) -> float:
        return SQRT2 * self.s_va / (SQRT3 * self.v_ll_rms)

    @property
    def x_ss(self) -> float:
        return self.xls + self.xm

    @property
    def x_rr(self) -> float:
        return self.xlr + self.xm

    @property
    def x_transient(self) -> float:
        return self.x_ss - self.xm**2 / self.x_rr

    @property
    def k_rotor(self) -> float:
        return self.xm / self.x_rr

    @property
    def r_reflected(self) -> float:
        """Rotor resistance reflected through the magnetizing branch; it
        belongs in the (implicit) stator branch, not the lagged EMF, or the
        co-simulation interface turns negative-resistive at high frequency."""
        return self.rr * self.k_rotor**2


def equivalent_circuit(params: InductionMotorParams, slip: float,
                       v_pu: float = 1.0):
    """Steady-state per-phase equivalent circuit at a given slip.

    Returns (stator current pu, electromagnetic torque pu). slip = 0 is
    treated as an open rotor branch.
    """
    zs = complex(params.rs, params.xls)
    zm = complex(0.0, params.xm)
    if slip == 0.0:
        z = zs + zm
        i_s = v_pu / z
        return abs(i_s), 0.0
    zr = complex(params.rr / slip, params.xlr)
    z = zs + zm * zr / (zm + zr)
    i_s = v_pu / z
    i_r = i_s * zm / (zm + zr)
    torque = abs(i_r) ** 2 * params.rr / slip
    return abs(i_s), torque


def breakdown_slip(params: InductionMotorParams) -> float:
    """Slip of peak torque from the Thevenin-reduced circuit."""
    zth = complex(params.rs, params.xls) * complex(0, params.xm) / complex(
        params.rs, params.xls + params.xm
    )
    return params.rr / abs(complex(zth.real, zth.imag + params.xlr))


def slip_for_torque(params: InductionMotorParams, t_load: float,
                    v_pu: float = 1.0) -> float:
    """Stable-branch slip delivering t_load, by bisection on the torque curve."""
    s_hi = breakdown_slip(params)
    _, t_hi = equivalent_circuit(params, s_hi, v_pu)
    if t_load >= t_hi:
        raise ValueError(f"load torque {t_load} exceeds breakdown torque {t_hi:.3f}")
    lo, hi = 1e-9, s_hi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        _, t_mid = equivalent_circuit(params, mid, v_pu)
        if t_mid < t_load:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def abc_to_ab(x):
    return np.array([
        (2.0 * x[0] - x[1] - x[2]) / 3.0,
        (x[1] - x[2]) / SQRT3,
    ])


def ab_to_abc(a, b):
    return np.array([a, -0.5 * a + SQRT3 / 2.0 * b, -0.5 * a - SQRT3 / 2.0 * b])


class InductionMotor:
    """Rotor-flux + stator-current machine states on the stationary frame."""

    def __init__(self, params: InductionMotorParams, omega0: float):
        self.params = params
        self.omega0 = omega0
        # states: rotor flux (complex), stator current (complex), speed (pu)
        self.psi_r = 0.0 + 0.0j
        self.i_s = 0.0 + 0.0j
        self.speed_pu = 0.0
        self.t_load = 0.0
        self.torque_pu = 0.0
        self.i_abc = np.zeros(3)

    def reset(self):
        self.psi_r = 0.0 + 0.0j
        self.i_s = 0.0 + 0.0j
        self.speed_pu = 0.0
        self.torque_pu = 0.0
        self.i_abc[:] = 0.0

    @property
    def slip(self) -> float:
        return 1.0 - self.speed_pu

    def stator_branch(self):
        """(R ohms, L henry) of the per-phase interface branch."""
        p = self.params
        z_base = p.v_ll_rms**2 / p.s_va
        return ((p.rs + p.r_reflected) * z_base,
                p.x_transient * z_base / self.omega0)

    def emf_volts(self):
        """Instantaneous abc EMF behind the stator branch, in volts."""
        e = self._emf_pu()
        return ab_to_abc(e.real, e.imag) * self.params.v_pk_base

    def _emf_pu(self):
        # pure function of the slow rotor flux; the i_s-proportional part of
        # the rotor reaction lives in the branch resistance instead
        p = self.params
        return p.k_rotor * (1j * self.speed_pu - p.rr / p.x_rr) * self.psi_r

    def _advance_rotor(self, i_s_new, dt):
        """Trapezoidal rotor-flux update and Heun mechanical update, with the
        stator current held over the step."""
        p = self.params
        wb = self.omega0
        a = wb * (-p.rr / p.x_rr + 1j * self.speed_pu)
        b = wb * p.rr * p.xm / p.x_rr * 0.5 * (self.i_s + i_s_new)
        den = 1.0 - 0.5 * dt * a
        self.psi_r = ((1.0 + 0.5 * dt * a) * self.psi_r + dt * b) / den
        self.i_s = i_s_new

        psi_s = p.x_transient * self.i_s + p.k_rotor * self.psi_r
        self.torque_pu = (psi_s.conjugate() * self.i_s).imag
        self.speed_pu += dt * (self.torque_pu - self.t_load) / (2.0 * p.h_s)

        if (not np.isfinite(self.speed_pu)
                or not np.isfinite(abs(self.psi_r))
                or abs(self.speed_pu) > 2.0):
            raise NumericalError("induction motor state diverged", self._k)

    _k = 0

    def absorb_stator_current(self, i_abc_amps, dt, step_index=0):
        """Network-interfaced update: the solver already produced the stator
        branch current (drawn from the bus)."""
        self._k = step_index
        self.i_abc[:] = i_abc_amps
        ia, ib = abc_to_ab(np.asarray(i_abc_amps) / self.params.i_pk_base)
        self._advance_rotor(complex(ia, ib), dt)

    def step(self, v_abc, dt, step_index=0):
        """Standalone update from terminal volts; trapezoidal stator branch."""
        self._k = step_index
        p = self.params
        wb = self.omega0
        v = abc_to_ab(np.asarray(v_abc) / p.v_pk_base)
        v_c = complex(v[0], v[1])
        e = self._emf_pu()
        # (X'/wb) di/dt = v - e - (R_s + R_reflected) i, trapezoidal, e held
        r_b = p.rs + p.r_reflected
        tau = p.x_transient / wb
        den = tau / dt + 0.5 * r_b
        i_new = ((tau / dt - 0.5 * r_b) * self.i_s + (v_c - e)) / den
        self._advance_rotor(i_new, dt)
        self.i_abc[:] = ab_to_abc(i_new.real, i_new.imag) * p.i_pk_base
        return self.i_abc
