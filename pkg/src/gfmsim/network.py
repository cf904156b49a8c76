"""Fixed-step trapezoidal nodal network solver.

Elements are discretized into resistive companion branches (conductance +
history current source) and assembled into a nodal conductance system
G v = i. The matrix is factorized once per topology and refactorized only
when switches, branch enables or dt change. Everything inside one time step
is vectorized per branch family:

* ``srl``  -- scalar series R-L branches, optionally behind an ideal turns
  ratio (transformer windings) or driven by a known source voltage
  (converter terminal behind its filter inductor),
* ``crl``  -- mutually coupled three-phase series R-L blocks (line segments),
* ``cap``  -- shunt capacitance blocks to ground (scalar or coupled).

Node voltages live in a single flat vector with one extra trailing slot
pinned to 0 V that represents ground; de-energized islands eliminated from
the solve read back as 0 V through the same slot mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

GND = -1


class TopologyError(RuntimeError):
    """A network island has no conductive path to ground."""

    def __init__(self, node_names):
        self.node_names = list(node_names)
        super().__init__(
            "floating island with no path to ground: " + ", ".join(self.node_names)
        )


class InvalidElementError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Solver failure; carries the step index where it happened."""

    def __init__(self, msg, step_index):
        self.step_index = step_index
        super().__init__(f"{msg} (step {step_index})")


@dataclass
class SimClock:
    """Simulation time derived from an integer step count (no drift)."""

    dt: float
    step_index: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidElementError("dt must be positive")

    @property
    def t(self) -> float:
        return self.step_index * self.dt

    def advance(self):
        self.step_index += 1


# --------------------------------------------------------------------------
# Companion stamps
# --------------------------------------------------------------------------

@dataclass
class Resistor:
    r: float


@dataclass
class Inductor:
    l: float
    r: float = 0.0  # series resistance folded into the same branch


@dataclass
class Capacitor:
    c: float


@dataclass
class CoupledRL:
    rmat: np.ndarray  # (3, 3) ohms
    lmat: np.ndarray  # (3, 3) henries


@dataclass
class CompanionBranch:
    """Trapezoidal companion model of one physical element."""

    kind: str
    conductance: object          # float or (3, 3) array, siemens
    history_coeff: object        # multiplies last branch current in h update
    history_current: object      # amperes, 0 at rest

    @property
    def has_history(self) -> bool:
        return self.kind != "resistor"


def companion_stamp(element, dt: float) -> CompanionBranch:
    """Discretize one R / L / C / coupled-RL element at step dt.

    Conductances follow the trapezoidal rule: resistor 1/R, inductor
    dt/(2L) (series R folded in as 1/(R + 2L/dt)), capacitor 2C/dt, coupled
    block (R + (2/dt) L)^-1.
    """
    if dt <= 0:
        raise InvalidElementError("dt must be positive")
    if isinstance(element, Resistor):
        if element.r <= 0:
            raise InvalidElementError(f"resistance must be positive, got {element.r}")
        return CompanionBranch("resistor", 1.0 / element.r, -1.0, 0.0)
    if isinstance(element, Inductor):
        if element.l <= 0:
            raise InvalidElementError(f"inductance must be positive, got {element.l}")
        if element.r < 0:
            raise InvalidElementError("series resistance must be non-negative")
        g = 1.0 / (element.r + 2.0 * element.l / dt)
        a = g * (2.0 * element.l / dt - element.r)
        return CompanionBranch("inductor", g, a, 0.0)
    if isinstance(element, Capacitor):
        if element.c <= 0:
            raise InvalidElementError(f"capacitance must be positive, got {element.c}")
        return CompanionBranch("capacitor", 2.0 * element.c / dt, 1.0, 0.0)
    if isinstance(element, CoupledRL):
        rmat = np.asarray(element.rmat, dtype=float)
        lmat = np.asarray(element.lmat, dtype=float)
        if rmat.shape != (3, 3) or lmat.shape != (3, 3):
            raise InvalidElementError("coupled branch matrices must be 3x3")
        if not np.allclose(rmat, rmat.T) or not np.allclose(lmat, lmat.T):
            raise InvalidElementError("coupled branch matrices must be symmetric")
        z = rmat + (2.0 / dt) * lmat
        present = np.abs(z).sum(axis=1) > 0.0
        g = np.zeros((3, 3))
        if present.any():
            sub = np.ix_(present, present)
            g[sub] = np.linalg.inv(z[sub])
        a = g @ ((2.0 / dt) * lmat - rmat)
        return CompanionBranch("coupled-rl", g, a, np.zeros(3))
    raise InvalidElementError(f"unsupported element {element!r}")


# --------------------------------------------------------------------------
# Network description
# --------------------------------------------------------------------------

@dataclass
class _SrlBranch:
    p_plus: int
    p_minus: int
    s_plus: int
    s_minus: int
    ratio: float
    r: float
    l: float
    src_channel: int = -1   # >= 0: primary port is a known source voltage
    enabled: bool = True
    switch: str | None = None
    # plain two-terminal branch (f = p_plus, t = s_plus); the GND port legs
    # are representation artifacts, not galvanic paths
    plain: bool = True


@dataclass
class _CrlBranch:
    from_nodes: np.ndarray  # (3,) node ids, GND-padded for missing phases
    to_nodes: np.ndarray
    rmat: np.ndarray
    lmat: np.ndarray
    enabled: bool = True


@dataclass
class _CapBranch:
    nodes: np.ndarray       # (3,) node ids, GND-padded
    cmat: np.ndarray        # (3, 3) farads
    enabled: bool = True
    # series damping resistance beta*(dt/2)*inv(C): kills the trapezoidal
    # Nyquist oscillation on stiff cap loops at ~0.5*beta*w0*dt relative
    # error at the fundamental
    beta: float = 0.0


@dataclass
class _Switch:
    poles: list            # srl row indices
    closed: bool


class NetworkModel:
    """Nodes, branches, switches and injection channels of one network."""

    def __init__(self):
        self._node_names: list[str] = []
        self._node_ids: dict[str, int] = {}
        self.srl: list[_SrlBranch] = []
        self.crl: list[_CrlBranch] = []
        self.cap: list[_CapBranch] = []
        self.switches: dict[str, _Switch] = {}
        self.n_sources = 0
        self.injection_nodes: list[int] = []

    # -- nodes -------------------------------------------------------------

    def node(self, name: str) -> int:
        nid = self._node_ids.get(name)
        if nid is None:
            nid = len(self._node_names)
            self._node_names.append(name)
            self._node_ids[name] = nid
        return nid

    def node_name(self, nid: int) -> str:
        return "ground" if nid == GND else self._node_names[nid]

    @property
    def n_nodes(self) -> int:
        return len(self._node_names)

    # -- branches ----------------------------------------------------------

    def add_rl(self, f: int, t: int, r: float, l: float) -> int:
        """Series R-L (l may be 0 for a plain resistor) from node f to t."""
        if r < 0 or l < 0 or (r == 0 and l == 0):
            raise InvalidElementError("branch needs r > 0 and/or l > 0")
        self.srl.append(_SrlBranch(f, GND, t, GND, 1.0, r, l))
        return len(self.srl) - 1

    def add_winding(self, p_plus, p_minus, s_plus, s_minus, ratio, r, l) -> int:
        """Ideal-ratio winding pair with series R-L leakage on the secondary.

        Branch current i flows into s_plus; the primary port carries ratio*i.
        """
        if r + l <= 0:
            raise InvalidElementError("winding leakage must be positive")
        self.srl.append(
            _SrlBranch(p_plus, p_minus, s_plus, s_minus, ratio, r, l, plain=False)
        )
        return len(self.srl) - 1

    def add_source_rl(self, t: int, r: float, l: float) -> tuple[int, int]:
        """Known-voltage source behind a series R-L feeding node t.

        Returns (source_channel, srl_row). The source voltage for each step
        is supplied through NodalSystem.step(source_v=...).
        """
        ch = self.n_sources
        self.n_sources += 1
        self.srl.append(_SrlBranch(GND, GND, t, GND, 1.0, r, l, src_channel=ch))
        return ch, len(self.srl) - 1

    def add_switch(self, name, poles, r_closed=1e-4, closed=False) -> list[int]:
        """Multi-pole ideal switch; each pole is a (from, to) node pair.

        Open poles contribute nothing to the conductance matrix; closed poles
        stamp 1/r_closed. State changes take effect on reassembly.
        """
        if name in self.switches:
            raise InvalidElementError(f"duplicate switch id {name!r}")
        rows = []
        for f, t in poles:
            self.srl.append(
                _SrlBranch(f, GND, t, GND, 1.0, r_closed, 0.0,
                           enabled=closed, switch=name)
            )
            rows.append(len(self.srl) - 1)
        self.switches[name] = _Switch(rows, closed)
        return rows

    def set_switch(self, name: str, closed: bool) -> bool:
        """Returns True if the position actually changed."""
        sw = self.switches.get(name)
        if sw is None:
            raise KeyError(f"unknown switch id {name!r}")
        if sw.closed == bool(closed):
            return False
        sw.closed = bool(closed)
        for row in sw.poles:
            self.srl[row].enabled = sw.closed
        return True

    def add_coupled_rl(self, from_nodes, to_nodes, rmat, lmat) -> int:
        rmat = np.asarray(rmat, dtype=float)
        lmat = np.asarray(lmat, dtype=float)
        if not np.allclose(rmat, rmat.T, atol=1e-12) or not np.allclose(lmat, lmat.T, atol=1e-12):
            raise InvalidElementError("coupled impedance matrices must be symmetric")
        self.crl.append(_CrlBranch(np.asarray(from_nodes), np.asarray(to_nodes), rmat, lmat))
        return len(self.crl) - 1

    def add_capacitor(self, node: int, c: float, beta: float = 0.0) -> int:
        if c <= 0:
            raise InvalidElementError("capacitance must be positive")
        nodes = np.array([node, GND, GND])
        cmat = np.zeros((3, 3))
        cmat[0, 0] = c
        self.cap.append(_CapBranch(nodes, cmat, beta=beta))
        return len(self.cap) - 1

    def add_coupled_cap(self, nodes, cmat, beta: float = 0.0) -> int:
        self.cap.append(
            _CapBranch(np.asarray(nodes), np.asarray(cmat, dtype=float), beta=beta)
        )
        return len(self.cap) - 1

    def add_injection(self, node: int) -> int:
        """Current-source channel injecting into one node (motor, CC loads)."""
        self.injection_nodes.append(node)
        return len(self.injection_nodes) - 1

    def set_branch_enabled(self, family: str, row: int, enabled: bool) -> bool:
        branches = getattr(self, family)
        if branches[row].enabled == bool(enabled):
            return False
        branches[row].enabled = bool(enabled)
        return True


# --------------------------------------------------------------------------
# Assembled nodal system
# --------------------------------------------------------------------------

class NodalSystem:
    """Packed, factorized realization of a NetworkModel at a fixed dt.

    Owns the per-branch history state, which survives refactorization so
    that switch events do not reset the electrical past.
    """

    def __init__(self, model: NetworkModel, dt: float, allow_dead_islands=False,
                 track_residual=False):
        if dt <= 0:
            raise InvalidElementError("dt must be positive")
        self.model = model
        self.dt = dt
        self.allow_dead_islands = allow_dead_islands
        self.track_residual = track_residual
        self.refactor_count = 0
        self.last_rel_residual = 0.0
        self._dirty = True

        n = model.n_nodes
        # flat voltage vector; trailing slot is ground (pinned 0)
        self.v_full = np.zeros(n + 1)

        self._pack()
        self.refactor()

    # -- packing (once; branch population is fixed) -------------------------

    def _slot(self, nid: int) -> int:
        return self.model.n_nodes if nid == GND else nid

    def _pack(self):
        m = self.model
        dt = self.dt

        srl = m.srl
        nb = len(srl)
        self.srl_pp = np.array([self._slot(b.p_plus) for b in srl], dtype=np.intp)
        self.srl_pm = np.array([self._slot(b.p_minus) for b in srl], dtype=np.intp)
        self.srl_sp = np.array([self._slot(b.s_plus) for b in srl], dtype=np.intp)
        self.srl_sm = np.array([self._slot(b.s_minus) for b in srl], dtype=np.intp)
        self.srl_n = np.array([b.ratio for b in srl])
        self.srl_g0 = np.empty(nb)
        self.srl_a0 = np.empty(nb)
        for k, b in enumerate(srl):
            if b.l > 0:
                st = companion_stamp(Inductor(b.l, b.r), dt)
            else:
                st = companion_stamp(Resistor(b.r), dt)
            self.srl_g0[k] = st.conductance
            self.srl_a0[k] = st.history_coeff
        self.srl_h = np.zeros(nb)
        self.srl_i = np.zeros(nb)
        self._srl_u = np.zeros(nb)
        src_rows = [k for k, b in enumerate(srl) if b.src_channel >= 0]
        self.src_rows = np.array(src_rows, dtype=np.intp)
        self.src_ch = np.array([srl[k].src_channel for k in src_rows], dtype=np.intp)

        crl = m.crl
        self.crl_from = (
            np.array([[self._slot(x) for x in b.from_nodes] for b in crl], dtype=np.intp)
            if crl else np.zeros((0, 3), dtype=np.intp)
        )
        self.crl_to = (
            np.array([[self._slot(x) for x in b.to_nodes] for b in crl], dtype=np.intp)
            if crl else np.zeros((0, 3), dtype=np.intp)
        )
        self.crl_g0 = np.zeros((len(crl), 3, 3))
        self.crl_a0 = np.zeros((len(crl), 3, 3))
        for k, b in enumerate(crl):
            st = companion_stamp(CoupledRL(b.rmat, b.lmat), dt)
            self.crl_g0[k] = st.conductance
            self.crl_a0[k] = st.history_coeff
        self.crl_h = np.zeros((len(crl), 3))
        self.crl_i = np.zeros((len(crl), 3))

        cap = m.cap
        self.cap_nodes = (
            np.array([[self._slot(x) for x in b.nodes] for b in cap], dtype=np.intp)
            if cap else np.zeros((0, 3), dtype=np.intp)
        )
        self.cap_g0 = np.array(
            [2.0 / dt * b.cmat / (1.0 + b.beta) for b in cap]
        ).reshape(len(cap), 3, 3)
        self.cap_kappa = np.array(
            [(1.0 - b.beta) / (1.0 + b.beta) for b in cap]
        ).reshape(len(cap), 1)
        self.cap_h = np.zeros((len(cap), 3))
        self.cap_i = np.zeros((len(cap), 3))

        self.n_src = m.n_sources
        self._src_v = np.zeros(self.n_src)
        self.n_inj = len(m.injection_nodes)
        self._inj = np.zeros(self.n_inj)

    # -- assembly / refactorization -----------------------------------------

    def mark_dirty(self):
        self._dirty = True

    def _find_islands(self):
        m = self.model
        n = m.n_nodes
        parent = list(range(n + 1))  # last = ground

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

        gnd = n
        for b in m.srl:
            if not b.enabled:
                continue
            sp, sm = self._slot(b.s_plus), self._slot(b.s_minus)
            if b.src_channel >= 0:
                union(sp, gnd)   # known-voltage source grounds its branch
            elif b.plain:
                union(self._slot(b.p_plus), sp)
            else:
                union(sp, sm)
                union(self._slot(b.p_plus), self._slot(b.p_minus))
        for b in m.crl:
            if not b.enabled:
                continue
            z = np.abs(b.rmat) + np.abs(b.lmat)
            for j in range(3):
                if z[j].sum() > 0:
                    union(self._slot(b.from_nodes[j]), self._slot(b.to_nodes[j]))
        for b in m.cap:
            if not b.enabled:
                continue
            for j in range(3):
                if b.cmat[j, j] > 0:
                    union(self._slot(b.nodes[j]), gnd)

        groot = find(gnd)
        dead = [k for k in range(n) if find(k) != groot]
        return dead

    def refactor(self):
        """Re-assemble the conductance matrix for the current topology."""
        m = self.model
        n = m.n_nodes
        dead = self._find_islands()
        if dead and not self.allow_dead_islands:
            raise TopologyError([m.node_name(k) for k in dead])
        self.dead_nodes = dead
        self.v_full[dead] = 0.0

        active = [k for k in range(n) if k not in set(dead)]
        self.active = np.array(active, dtype=np.intp)
        na = len(active)
        row_of = np.full(n + 1, -1, dtype=np.intp)
        row_of[self.active] = np.arange(na)

        # runtime branch coefficients with enable masks applied
        srl_en = np.array([b.enabled for b in m.srl], dtype=bool)
        self.srl_g = np.where(srl_en, self.srl_g0, 0.0)
        self.srl_a = np.where(srl_en, self.srl_a0, 0.0)
        self.srl_h[~srl_en] = 0.0
        crl_en = np.array([b.enabled for b in m.crl], dtype=bool)
        self.crl_g = self.crl_g0 * crl_en[:, None, None] if len(m.crl) else self.crl_g0
        self.crl_a = self.crl_a0 * crl_en[:, None, None] if len(m.crl) else self.crl_a0
        if len(m.crl):
            self.crl_h[~crl_en] = 0.0
        cap_en = np.array([b.enabled for b in m.cap], dtype=bool)
        self.cap_g = self.cap_g0 * cap_en[:, None, None] if len(m.cap) else self.cap_g0
        if len(m.cap):
            self.cap_h[~cap_en] = 0.0

        G = np.zeros((na, na))

        def stamp(i, j, g):
            ri, rj = row_of[i], row_of[j]
            if ri >= 0 and rj >= 0:
                G[ri, rj] += g

        # scalar branches: current i = g*(n*u1 - u2) into s_plus,
        # n*i drawn from the primary port
        for k, b in enumerate(m.srl):
            g = self.srl_g[k]
            if g == 0.0:
                continue
            nr = b.ratio
            sp, sm = self._slot(b.s_plus), self._slot(b.s_minus)
            terms_dep = [(sp, -g), (sm, g)]
            if b.src_channel < 0:
                pp, pm = self._slot(b.p_plus), self._slot(b.p_minus)
                terms_dep += [(pp, g * nr), (pm, -g * nr)]
                inj = [(sp, 1.0), (sm, -1.0), (pp, -nr), (pm, nr)]
            else:
                inj = [(sp, 1.0), (sm, -1.0)]
            for node_i, sigma in inj:
                for node_m, c in terms_dep:
                    stamp(node_i, node_m, -sigma * c)

        for k in range(len(m.crl)):
            gm = self.crl_g[k]
            for j in range(3):
                for l in range(3):
                    g = gm[j, l]
                    if g == 0.0:
                        continue
                    fj, tj = self.crl_from[k, j], self.crl_to[k, j]
                    fl, tl = self.crl_from[k, l], self.crl_to[k, l]
                    stamp(fj, fl, g)
                    stamp(fj, tl, -g)
                    stamp(tj, fl, -g)
                    stamp(tj, tl, g)

        for k in range(len(m.cap)):
            gm = self.cap_g[k]
            for j in range(3):
                for l in range(3):
                    g = gm[j, l]
                    if g != 0.0:
                        stamp(self.cap_nodes[k, j], self.cap_nodes[k, l], g)

        if na:
            diag = np.diag(G).copy()
            zero_diag = np.where(diag <= 0.0)[0]
            if zero_diag.size:
                names = [m.node_name(self.active[r]) for r in zero_diag]
                raise TopologyError(names)
            self._G = G
            self._D = 1.0 / np.sqrt(diag)
            Gs = G * self._D[:, None] * self._D[None, :]
            self._lu = lu_factor(Gs, check_finite=False)
        else:
            self._G = G
            self._D = np.zeros(0)
            self._lu = None

        # RHS scatter matrices (history + source + injection terms)
        nb = len(m.srl)
        P = np.zeros((na, nb))
        for k, b in enumerate(m.srl):
            if self.srl_g[k] == 0.0 and self.srl_a[k] == 0.0:
                continue
            sp, sm = row_of[self._slot(b.s_plus)], row_of[self._slot(b.s_minus)]
            if sp >= 0:
                P[sp, k] += 1.0
            if sm >= 0:
                P[sm, k] -= 1.0
            if b.src_channel < 0:
                pp, pm = row_of[self._slot(b.p_plus)], row_of[self._slot(b.p_minus)]
                if pp >= 0:
                    P[pp, k] -= b.ratio
                if pm >= 0:
                    P[pm, k] += b.ratio
        self._P_srl = P

        Pc = np.zeros((na, 3 * len(m.crl)))
        for k in range(len(m.crl)):
            for j in range(3):
                f, t = row_of[self.crl_from[k, j]], row_of[self.crl_to[k, j]]
                if f >= 0:
                    Pc[f, 3 * k + j] -= 1.0
                if t >= 0:
                    Pc[t, 3 * k + j] += 1.0
        self._P_crl = Pc

        Pk = np.zeros((na, 3 * len(m.cap)))
        for k in range(len(m.cap)):
            for j in range(3):
                r = row_of[self.cap_nodes[k, j]]
                if r >= 0:
                    Pk[r, 3 * k + j] += 1.0
        self._P_cap = Pk

        Pi = np.zeros((na, self.n_inj))
        for ch, node in enumerate(m.injection_nodes):
            r = row_of[node]
            if r >= 0:
                Pi[r, ch] += 1.0
        self._P_inj = Pi

        self._heff = np.zeros(nb)
        self.refactor_count += 1
        self._dirty = False

    # -- time step -----------------------------------------------------------

    def step(self, source_v=None, injections=None, step_index=0):
        """Advance the network one dt: solve G v = i, update histories."""
        if self._dirty:
            self.refactor()
        if source_v is not None:
            self._src_v[:] = source_v
        if injections is not None:
            self._inj[:] = injections

        heff = self._heff
        np.copyto(heff, self.srl_h)
        if self.src_rows.size:
            heff[self.src_rows] += (
                self.srl_g[self.src_rows]
                * self.srl_n[self.src_rows]
                * self._src_v[self.src_ch]
            )
        rhs = self._P_srl @ heff
        if self.crl_h.size:
            rhs += self._P_crl @ self.crl_h.ravel()
        if self.cap_h.size:
            rhs += self._P_cap @ self.cap_h.ravel()
        if self.n_inj:
            rhs += self._P_inj @ self._inj

        if self._lu is not None:
            D = self._D
            x = D * lu_solve(self._lu, D * rhs, check_finite=False)
            # one iterative-refinement pass keeps the residual near roundoff
            r = rhs - self._G @ x
            x += D * lu_solve(self._lu, D * r, check_finite=False)
            if not np.isfinite(x).all():
                raise NumericalError("non-finite node voltages", step_index)
            if self.track_residual:
                rr = rhs - self._G @ x
                nrm = np.linalg.norm(rhs)
                self.last_rel_residual = (
                    np.linalg.norm(rr) / nrm if nrm > 0 else np.linalg.norm(rr)
                )
            self.v_full[self.active] = x

        v = self.v_full
        u1 = v[self.srl_pp] - v[self.srl_pm]
        if self.src_rows.size:
            u1[self.src_rows] = self._src_v[self.src_ch]
        u = self.srl_n * u1 - (v[self.srl_sp] - v[self.srl_sm])
        gu = self.srl_g * u
        np.add(gu, self.srl_h, out=self.srl_i)
        self.srl_h[:] = gu + self.srl_a * self.srl_i

        if self.crl_h.size:
            U = v[self.crl_from] - v[self.crl_to]
            GU = np.einsum("kij,kj->ki", self.crl_g, U)
            np.add(GU, self.crl_h, out=self.crl_i)
            self.crl_h[:] = GU + np.einsum("kij,kj->ki", self.crl_a, self.crl_i)

        if self.cap_h.size:
            Vc = v[self.cap_nodes]
            GV = np.einsum("kij,kj->ki", self.cap_g, Vc)
            np.subtract(GV, self.cap_h, out=self.cap_i)
            self.cap_h[:] = GV + self.cap_kappa * self.cap_i

        return v

    def snapshot_history(self, source_v=None, injections=None):
        """Seed branch histories from an instantaneous solve at the current
        sources, keeping the stored branch currents as the t=0 state.

        Use before the first step when a source is already energized at t=0;
        otherwise the trapezoidal rule sees the turn-on as happening half a
        step late.
        """
        if self._dirty:
            self.refactor()
        if source_v is not None:
            self._src_v[:] = source_v
        if injections is not None:
            self._inj[:] = injections

        heff = self._heff
        np.copyto(heff, self.srl_h)
        if self.src_rows.size:
            heff[self.src_rows] += (
                self.srl_g[self.src_rows]
                * self.srl_n[self.src_rows]
                * self._src_v[self.src_ch]
            )
        rhs = self._P_srl @ heff
        if self.crl_h.size:
            rhs += self._P_crl @ self.crl_h.ravel()
        if self.cap_h.size:
            rhs += self._P_cap @ self.cap_h.ravel()
        if self.n_inj:
            rhs += self._P_inj @ self._inj
        if self._lu is not None:
            D = self._D
            x = D * lu_solve(self._lu, D * rhs, check_finite=False)
            self.v_full[self.active] = x

        v = self.v_full
        u1 = v[self.srl_pp] - v[self.srl_pm]
        if self.src_rows.size:
            u1[self.src_rows] = self._src_v[self.src_ch]
        u = self.srl_n * u1 - (v[self.srl_sp] - v[self.srl_sm])
        self.srl_h[:] = self.srl_g * u + self.srl_a * self.srl_i
        if self.crl_h.size:
            U = v[self.crl_from] - v[self.crl_to]
            GU = np.einsum("kij,kj->ki", self.crl_g, U)
            self.crl_h[:] = GU + np.einsum("kij,kj->ki", self.crl_a, self.crl_i)
        if self.cap_h.size:
            Vc = v[self.cap_nodes]
            GV = np.einsum("kij,kj->ki", self.cap_g, Vc)
            self.cap_h[:] = GV + self.cap_kappa * self.cap_i
        return v

    # -- event entry point ----------------------------------------------------

    def on_switch_event(self, name: str, closed: bool):
        """Apply a breaker/switch position change; takes effect next step."""
        if self.model.set_switch(name, closed):
            for row in self.model.switches[name].poles:
                self.srl_h[row] = 0.0
            self._dirty = True

    def set_branch_enabled(self, family: str, row: int, enabled: bool):
        if self.model.set_branch_enabled(family, row, enabled):
            if family == "srl":
                self.srl_h[row] = 0.0
            elif family == "crl":
                self.crl_h[row] = 0.0
            elif family == "cap":
                self.cap_h[row] = 0.0
            self._dirty = True
