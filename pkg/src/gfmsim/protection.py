"""Breaker-embedded relays: advanced load relays and definite-time
overcurrent relays.

A load relay closes its breaker once frequency and voltage have stayed inside
the permissive window for its connection waiting time, and opens it after the
disconnection waiting time outside the window. Staggered waiting times give
the gradual, uncoordinated load pickup during restoration. The overcurrent
relay trips after the measured one-cycle current magnitude exceeds pickup
continuously for the definite time and then latches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass
class LoadRelaySettings:
    f_min_hz: float = 59.5
    v_min_pu: float = 0.85
    v_max_pu: float = 1.10
    t_wait_con_s: float = 1.0
    t_wait_dis_s: float = 0.1

    def __post_init__(self):
        if self.v_min_pu >= self.v_max_pu:
            raise ValueError("v_min must be below v_max")
        if self.t_wait_con_s <= 0 or self.t_wait_dis_s <= 0:
            raise ValueError("waiting times must be positive")


@dataclass
class OvercurrentRelaySettings:
    pickup_pu: float = 2.0
    definite_time_s: float = 5.0 / 60.0   # five fundamental cycles

    def __post_init__(self):
        if self.pickup_pu <= 1.0:
            raise ValueError("pickup must exceed the protected rated current")
        if self.definite_time_s <= 0:
            raise ValueError("definite time must be positive")


def stagger_assign(settings, base_s: float, increment_s: float):
    """Per-relay connection delays base + k*increment, in list order."""
    if increment_s <= 0:
        raise ValueError("stagger increment must be positive")
    return [
        replace(s, t_wait_con_s=base_s + k * increment_s)
        for k, s in enumerate(settings)
    ]


class LoadRelay:
    """Frequency/voltage window relay driving one breaker.

    step() consumes the relay's own local measurements: PLL frequency and the
    min/max one-cycle voltage magnitude across energized phases. Commands are
    returned once and applied by the caller at the next step boundary.
    """

    def __init__(self, settings: LoadRelaySettings, breaker_closed=False):
        self.settings = settings
        self.breaker_closed = breaker_closed
        self.armed = False
        self.in_timer = 0.0
        self.out_timer = 0.0

    def arm(self):
        self.armed = True
        self.in_timer = 0.0
        self.out_timer = 0.0

    def step(self, f_hz: float, v_min_pu: float, v_max_pu: float, dt: float):
        """Returns 'open', 'close', or None."""
        if not self.armed:
            return None
        s = self.settings
        in_window = (
            f_hz >= s.f_min_hz
            and v_min_pu >= s.v_min_pu
            and v_max_pu <= s.v_max_pu
        )
        if self.breaker_closed:
            self.in_timer = 0.0
            if not in_window:
                self.out_timer += dt
                if self.out_timer >= s.t_wait_dis_s:
                    self.out_timer = 0.0
                    self.breaker_closed = False
                    return "open"
            else:
                self.out_timer = 0.0
            return None
        self.out_timer = 0.0
        if in_window:
            self.in_timer += dt
            if self.in_timer >= s.t_wait_con_s:
                self.in_timer = 0.0
                self.breaker_closed = True
                return "close"
        else:
            self.in_timer = 0.0
        return None


class OvercurrentRelay:
    """Definite-time overcurrent element; trips open and latches."""

    def __init__(self, settings: OvercurrentRelaySettings, breaker_closed=False):
        self.settings = settings
        self.breaker_closed = breaker_closed
        self.latched = False
        self.timer = 0.0
        self.picked_up = False

    def reset(self):
        self.latched = False
        self.timer = 0.0
        self.picked_up = False

    def step(self, i_max_pu: float, dt: float):
        """Returns 'trip' or None; i_max_pu is the worst phase magnitude."""
        if self.latched or not self.breaker_closed:
            return None
        if i_max_pu >= self.settings.pickup_pu:
            newly = not self.picked_up
            self.picked_up = True
            self.timer += dt
            if self.timer >= self.settings.definite_time_s:
                self.latched = True
                self.breaker_closed = False
                return "trip"
            return "pickup" if newly else None
        self.picked_up = False
        self.timer = 0.0
        return None
