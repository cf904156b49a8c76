"""Feeder element models: coupled lines, two-winding transformers, static and
composite loads, shunt capacitor banks.

Everything here reduces a physical element description to branch stamps on a
NetworkModel. Impedance data follows the North-American distribution feeder
convention: series R and X in ohm/mile, shunt susceptance in microsiemens per
mile, lengths in feet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import GND, InvalidElementError, NetworkModel

PHASES = "abc"
FT_PER_MILE = 5280.0
SQRT2 = math.sqrt(2.0)

# small leak from transformer terminals to ground; keeps otherwise
# ungrounded delta-side islands solvable while contributing microwatts
PARASITIC_SHUNT_OHM = 1.0e6


def phase_index(p: str) -> int:
    i = PHASES.find(p)
    if i < 0:
        raise InvalidElementError(f"unknown phase {p!r}")
    return i


@dataclass
class LineConfig:
    """One overhead/underground geometry: padded 3x3 matrices, absent phases
    carry zero rows and columns."""

    phasing: str
    r_ohm_per_mile: np.ndarray
    x_ohm_per_mile: np.ndarray
    b_us_per_mile: np.ndarray

    def __post_init__(self):
        self.r_ohm_per_mile = np.asarray(self.r_ohm_per_mile, dtype=float)
        self.x_ohm_per_mile = np.asarray(self.x_ohm_per_mile, dtype=float)
        self.b_us_per_mile = np.asarray(self.b_us_per_mile, dtype=float)
        for m in (self.r_ohm_per_mile, self.x_ohm_per_mile, self.b_us_per_mile):
            if m.shape != (3, 3):
                raise InvalidElementError("line config matrices must be padded 3x3")
            if not np.allclose(m, m.T, atol=1e-9):
                raise InvalidElementError("line config matrices must be symmetric")
        for p in self.phasing:
            i = phase_index(p)
            if self.r_ohm_per_mile[i, i] <= 0:
                raise InvalidElementError(
                    f"phase {p} present but diagonal resistance is not positive"
                )


@dataclass
class LineSegment:
    from_bus: str
    to_bus: str
    config: LineConfig
    length_ft: float


# shunt capacitor series-damping ratio; suppresses trapezoidal Nyquist
# ringing after switching events for ~0.05% fundamental-frequency error
CAP_DAMPING = 0.05


def stamp_line(model: NetworkModel, line: LineSegment, node_of, omega0: float,
               cap_beta: float = CAP_DAMPING):
    """Stamp a coupled series R-L plus half shunt capacitance at each end.

    node_of(bus, phase) -> node id. Returns the coupled-branch row index.
    """
    if line.length_ft <= 0:
        raise InvalidElementError(
            f"line {line.from_bus}-{line.to_bus} must have positive length"
        )
    miles = line.length_ft / FT_PER_MILE
    rmat = line.config.r_ohm_per_mile * miles
    lmat = line.config.x_ohm_per_mile * miles / omega0
    from_nodes = np.full(3, GND)
    to_nodes = np.full(3, GND)
    for p in line.config.phasing:
        i = phase_index(p)
        from_nodes[i] = node_of(line.from_bus, p)
        to_nodes[i] = node_of(line.to_bus, p)
    row = model.add_coupled_rl(from_nodes, to_nodes, rmat, lmat)

    cmat = line.config.b_us_per_mile * 1e-6 * miles / omega0 / 2.0
    if np.abs(cmat).max() > 0:
        model.add_coupled_cap(from_nodes, cmat, beta=cap_beta)
        model.add_coupled_cap(to_nodes, cmat, beta=cap_beta)
    return row


@dataclass
class TransformerSpec:
    """Two-winding transformer; `kind` fixes the vector group.

    delta_wye_g: delta on the `from` side, grounded wye on the `to` side,
    with the wye side leading by 30 degrees for positive sequence.
    """

    kind: str                   # "delta_wye_g" | "wye_g_wye_g"
    s_va: float
    kv_ll_from: float
    kv_ll_to: float
    r_pu: float
    x_pu: float

    def __post_init__(self):
        if self.kind not in ("delta_wye_g", "wye_g_wye_g"):
            raise InvalidElementError(f"unknown transformer kind {self.kind!r}")
        if self.x_pu <= 0:
            raise InvalidElementError("transformer leakage reactance must be positive")
        if self.s_va <= 0 or self.kv_ll_from <= 0 or self.kv_ll_to <= 0:
            raise InvalidElementError("transformer ratings must be positive")


def stamp_transformer(model: NetworkModel, spec: TransformerSpec,
                      from_nodes, to_nodes, omega0: float):
    """Stamp three single-phase winding units plus parasitic ground leaks.

    from_nodes/to_nodes: per-phase node ids on each side. Leakage R-L sits on
    the `to` (secondary) side. Returns the list of winding branch rows.
    """
    v_ln_to = spec.kv_ll_to * 1e3 / math.sqrt(3.0)
    z_base_w = v_ln_to**2 / (spec.s_va / 3.0)
    r = spec.r_pu * z_base_w
    l = spec.x_pu * z_base_w / omega0
    rows = []
    if spec.kind == "delta_wye_g":
        ratio = v_ln_to / (spec.kv_ll_from * 1e3)
        # winding k: primary across delta pair (k, k+1), secondary phase k
        for k in range(3):
            rows.append(
                model.add_winding(
                    from_nodes[k], from_nodes[(k + 1) % 3],
                    to_nodes[k], GND, ratio, r, l,
                )
            )
    else:
        v_ln_from = spec.kv_ll_from * 1e3 / math.sqrt(3.0)
        ratio = v_ln_to / v_ln_from
        for k in range(3):
            rows.append(
                model.add_winding(from_nodes[k], GND, to_nodes[k], GND, ratio, r, l)
            )
    for n in list(from_nodes) + list(to_nodes):
        model.add_rl(n, GND, PARASITIC_SHUNT_OHM, 0.0)
    return rows


# --------------------------------------------------------------------------
# Loads
# --------------------------------------------------------------------------

def load_impedance(kw: float, kvar: float, v_rms: float):
    """Fixed series impedance drawing (kw, kvar) at the rated rms voltage.

    Returns (r_ohm, x_ohm); x > 0 inductive.
    """
    s = complex(kw, kvar) * 1e3
    if abs(s) == 0:
        raise InvalidElementError("load rating must be non-zero")
    z = v_rms**2 / s.conjugate()
    if z.real < 0:
        raise InvalidElementError("load with negative resistance")
    return z.real, z.imag


@dataclass
class LoadPhase:
    """One wye phase or one delta pair of a load."""

    nodes: tuple            # (node, GND) for wye, (node_x, node_y) for delta
    kw: float
    kvar: float
    v_nom_rms: float        # rated rms voltage across this branch
    branch_family: str = "srl"
    branch_row: int = -1
    inj_plus: int = -1      # injection channel at nodes[0]
    inj_minus: int = -1     # injection channel at nodes[1], -1 when grounded
    phasor_channels: tuple = ()   # measurement channels, filled by the engine

    @property
    def i_rated_pk(self) -> float:
        return SQRT2 * math.hypot(self.kw, self.kvar) * 1e3 / self.v_nom_rms

    @property
    def pf_angle(self) -> float:
        return math.atan2(self.kvar, self.kw)


@dataclass
class CompositeState:
    """Mode memory of one composite (dynamic) load."""

    constant_current: bool = False


MODE_THRESHOLD_PU = 0.7


def composite_mode(v_min_pu: float, threshold: float = MODE_THRESHOLD_PU) -> bool:
    """True = constant-current mode. Pure function of the measured magnitude."""
    return v_min_pu >= threshold


def stamp_load_phase(model: NetworkModel, phase: LoadPhase, omega0: float) -> int:
    """Stamp the constant-impedance branch of one load phase/pair."""
    r, x = load_impedance(phase.kw, phase.kvar, phase.v_nom_rms)
    n_from, n_to = phase.nodes
    if x >= 0:
        row = model.add_rl(n_from, n_to, r, x / omega0)
    else:
        # capacitive: series R-C realized as R branch plus the capacitor
        # companion; a dedicated series R-C element is not needed for the
        # feeder data (all spot loads are inductive or resistive)
        raise InvalidElementError("capacitive series loads are not supported")
    phase.branch_row = row
    return row


def constant_current_injection(v_phasor: complex, i_rated_pk: float,
                               pf_angle: float, wt: float):
    """Instantaneous drawn current, phase-locked to the local voltage phasor.

    v_phasor follows the convention v(t) = Re[V e^{j w0 t}].
    """
    mag = abs(v_phasor)
    if mag < 1e-9:
        return 0.0
    i_ph = (v_phasor / mag) * i_rated_pk * complex(math.cos(pf_angle), -math.sin(pf_angle))
    return i_ph.real * math.cos(wt) - i_ph.imag * math.sin(wt)


def stamp_capacitor_bank(model: NetworkModel, node: int, kvar: float,
                         v_ln_rms: float, omega0: float,
                         cap_beta: float = CAP_DAMPING) -> int:
    if kvar <= 0:
        raise InvalidElementError("capacitor bank kvar must be positive")
    c = kvar * 1e3 / (omega0 * v_ln_rms**2)
    return model.add_capacitor(node, c, beta=cap_beta)
