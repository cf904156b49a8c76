"""Measurement and metrics: one-cycle phasor extraction, symmetrical
components, unbalance factors, power-sharing error, and run serialization.

Phasors follow the convention x(t) = Re[X e^{j w0 t}], extracted by a
single-bin Fourier projection over a sliding one-fundamental-cycle window, so
a stationary sinusoid maps to a constant complex X regardless of where the
window sits.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np


class WarmingUpError(RuntimeError):
    """Phasor requested before one full window of samples is available."""


class UndefinedMetricError(ValueError):
    pass


def phasor_extract(samples, f0: float, dt: float, t_end: float | None = None):
    """Single-bin projection of one fundamental cycle of samples.

    samples: the most recent window, oldest first; its length must cover one
    period of f0 (rounded to the step). t_end is the absolute time of the last
    sample, defaulting to 0 phase reference at the window end.
    Returns the complex peak phasor.
    """
    x = np.asarray(samples, dtype=float)
    n_window = int(round(1.0 / (f0 * dt)))
    if len(x) < n_window:
        raise WarmingUpError(
            f"need {n_window} samples for one cycle, got {len(x)}"
        )
    x = x[-n_window:]
    if t_end is None:
        t_end = 0.0
    t = t_end - dt * np.arange(n_window - 1, -1, -1)
    w = 2.0 * np.pi * f0
    return 2.0 / n_window * np.sum(x * np.exp(-1j * w * t))


class SlidingPhasorBank:
    """Streaming one-cycle phasors over many channels in O(channels) per step.

    The fundamental period is rarely an integer number of steps, so the
    window carries a fractionally weighted oldest sample; this keeps the
    estimate of a stationary sinusoid flat to a few 1e-5 instead of the 0.2%
    ripple of a truncated window. Running sums are re-accumulated exactly
    once per wrap so float drift cannot build up over long runs.
    """

    def __init__(self, n_channels: int, f0: float, dt: float):
        self.n = n_channels
        self.f0 = f0
        self.dt = dt
        n_exact = 1.0 / (f0 * dt)
        self.n_window = int(math.floor(n_exact))
        self._frac = n_exact - self.n_window
        self._nslots = self.n_window + 1
        self._buf = np.zeros((self._nslots, n_channels), dtype=complex)
        self._sum = np.zeros(n_channels, dtype=complex)
        self._pos = 0
        self._count = 0
        self._scale = 2.0 / n_exact

    @property
    def warmed(self) -> bool:
        return self._count >= self._nslots

    def update(self, x, t: float):
        """Push one sample vector taken at absolute time t."""
        w = 2.0 * np.pi * self.f0
        ph = complex(math.cos(w * t), -math.sin(w * t))
        contrib = np.asarray(x) * ph
        q = self._pos
        demoted = (q - self.n_window) % self._nslots
        self._sum += (contrib - self._frac * self._buf[q]
                      - (1.0 - self._frac) * self._buf[demoted])
        self._buf[q] = contrib
        self._pos += 1
        self._count += 1
        if self._pos == self._nslots:
            self._pos = 0
        if self._count % self._nslots == 0:
            # exact re-sum with the current recency weights
            j = (self._pos - 1 - np.arange(self._nslots)) % self._nslots
            wts = np.ones(self._nslots)
            wts[-1] = self._frac
            self._sum = (self._buf[j] * wts[:, None]).sum(axis=0)

    def phasors(self):
        return self._scale * self._sum

    def magnitudes(self):
        return np.abs(self._sum) * self._scale


A_OP = np.exp(2j * np.pi / 3.0)
FORTESCUE = np.array([
    [1.0, A_OP, A_OP**2],
    [1.0, A_OP**2, A_OP],
    [1.0, 1.0, 1.0],
]) / 3.0


def sequence_components_complex(phasors):
    """(V+, V-, V0) complex from three phase phasors (Fortescue)."""
    v = np.asarray(phasors, dtype=complex)
    return FORTESCUE @ v


def sequence_components(phasors):
    """(V+, V-, V0) magnitudes from three phase phasors."""
    return tuple(np.abs(sequence_components_complex(phasors)))


@dataclass
class UnbalanceFactors:
    v_uf: float
    p_uf: float
    q_uf: float


def unbalance_factors(v_pos: float, v_neg: float, p_by_phase, q_by_phase):
    """V_UF = V-/V+; P_UF/Q_UF = worst-phase deviation from the phase average."""
    if v_pos <= 0.0:
        raise UndefinedMetricError("V_UF undefined for V+ = 0")
    p = np.asarray(p_by_phase, dtype=float)
    q = np.asarray(q_by_phase, dtype=float)
    return UnbalanceFactors(
        v_uf=v_neg / v_pos,
        p_uf=float(np.max(np.abs(p - p.mean()))),
        q_uf=float(np.max(np.abs(q - q.mean()))),
    )


def power_sharing_error(p_watts, ratings_va):
    """Worst relative deviation of P_i/S_i from the rating-proportional share."""
    p = np.asarray(p_watts, dtype=float)
    s = np.asarray(ratings_va, dtype=float)
    if len(p) < 2:
        raise UndefinedMetricError("sharing error needs at least two converters")
    share = p / s
    fair = p.sum() / s.sum()
    if fair == 0.0:
        raise UndefinedMetricError("zero total power in sharing window")
    return float(np.max(np.abs(share - fair)) / abs(fair))


# --------------------------------------------------------------------------
# Run serialization
# --------------------------------------------------------------------------

FLOAT_FMT = "%.9g"


def write_csv(record, path):
    """One row per sample; column order is fixed and documented in a leading
    comment line: time, per-converter per-phase blocks, bus voltage
    magnitudes, breaker states, motor speed and torque."""
    names, columns = record.csv_columns()
    with open(path, "w", newline="") as f:
        f.write("# " + ",".join(names) + "\n")
        writer = csv.writer(f)
        writer.writerow(names)
        data = np.column_stack(columns)
        for row in data:
            writer.writerow([FLOAT_FMT % v for v in row])


def read_csv(path):
    """Round-trip loader; returns (names, array)."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rd = csv.reader(io.StringIO("".join(lines)))
    names = next(rd)
    data = np.array([[float(v) for v in row] for row in rd])
    return names, data


def write_event_log(events, path):
    """Tab-separated (time, actor, action, cause), strictly time-ordered."""
    with open(path, "w") as f:
        f.write("time_s\tactor\taction\tcause\n")
        for t, actor, action, cause in events:
            f.write(f"{FLOAT_FMT % t}\t{actor}\t{action}\t{cause}\n")


def read_event_log(path):
    out = []
    with open(path) as f:
        next(f)
        for ln in f:
            t, actor, action, cause = ln.rstrip("\n").split("\t")
            out.append((float(t), actor, action, cause))
    return out


def write_summary(summary: dict, path):
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
