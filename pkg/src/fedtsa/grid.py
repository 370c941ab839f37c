"""Static grid model: data file parsing, power flow, and network reduction.

The grid is described by a sectioned text file (see ``docs/grid-format.md``)
holding buses, transmission lines, transformers, and classical-model
generators (constant EMF behind transient reactance). Loads are converted to
constant admittances at the solved pre-fault voltage, generator internal
nodes are appended, and every passive node is eliminated by Kron reduction,
yielding the dense internal-node admittance matrix used by the swing model.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve

BUS_KINDS = ("slack", "PV", "PQ")

PRE_FAULT = "pre-fault"
FAULT_ON = "fault-on"
POST_FAULT = "post-fault"
TOPOLOGIES = (PRE_FAULT, FAULT_ON, POST_FAULT)

#: Impedance (p.u.) tying the faulted node to ground; an exact zero would make
#: the unreduced fault-on matrix singular at that node.
FAULT_IMPEDANCE = 1e-6

#: Admissible line-fault position fractions.
LINE_FAULT_POSITIONS = (0.25, 0.5, 0.75)

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 50


class GridDataError(ValueError):
    """Malformed or inconsistent grid data."""


class PowerFlowError(RuntimeError):
    """Newton-Raphson failed to converge; the load level is infeasible."""


class ReductionError(RuntimeError):
    """Kron reduction hit a singular sub-matrix (isolated node)."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    vset: float
    pload_mw: float
    qload_mvar: float

    @property
    def has_load(self) -> bool:
        return self.pload_mw != 0.0 or self.qload_mvar != 0.0


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float


@dataclass(frozen=True)
class Transformer:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    tap: float


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    h_s: float
    xdp: float
    pgen_mw: float


@dataclass(frozen=True)
class FaultSpec:
    """A three-phase fault at a bus or at a fractional position on a line."""

    bus: int | None = None
    line: int | None = None
    position: float | None = None

    @classmethod
    def at_bus(cls, bus_id: int) -> "FaultSpec":
        return cls(bus=bus_id)

    @classmethod
    def on_line(cls, line_id: int, position: float) -> "FaultSpec":
        return cls(line=line_id, position=position)

    @property
    def is_line_fault(self) -> bool:
        return self.line is not None

    def __post_init__(self):
        if (self.bus is None) == (self.line is None):
            raise ValueError("fault must name exactly one of bus or line")
        if self.line is not None:
            if self.position not in LINE_FAULT_POSITIONS:
                raise ValueError(
                    f"line-fault position must be one of {LINE_FAULT_POSITIONS}, "
                    f"got {self.position}"
                )
        elif self.position is not None:
            raise ValueError("bus faults take no position")

    def describe(self) -> str:
        if self.is_line_fault:
            return f"line {self.line} @ {self.position:.0%}"
        return f"bus {self.bus}"


@dataclass(frozen=True)
class BusSystem:
    """Immutable static description of a power system."""

    name: str
    base_mva: float
    frequency_hz: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    transformers: tuple[Transformer, ...] = ()
    generators: tuple[Generator, ...] = ()

    def __post_init__(self):
        _validate(self)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    def bus_index(self) -> dict[int, int]:
        """Bus id -> position in ``buses``."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def line_by_id(self, line_id: int) -> Line:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise GridDataError(f"no line with id {line_id}")

    def inertia(self) -> np.ndarray:
        return np.array([g.h_s for g in self.generators])

    def omega_s(self) -> float:
        return 2.0 * math.pi * self.frequency_hz


@dataclass(frozen=True)
class PowerFlowSolution:
    """Converged Newton-Raphson solution (all quantities p.u.)."""

    v: np.ndarray           # complex bus voltages, in BusSystem.buses order
    gen_p: np.ndarray       # generator active injections
    gen_q: np.ndarray       # generator reactive injections
    load_scale: float
    iterations: int
    max_mismatch: float


# ---------------------------------------------------------------------------
# Data file parsing
# ---------------------------------------------------------------------------

_SECTION_FIELDS = {
    "bus": 5,
    "line": 6,
    "transformer": 7,
    "generator": 5,
}


def default_grid_path() -> Path:
    """Path of the bundled IEEE 39-bus file, or the FEDTSA_GRID_DATA override."""
    override = os.environ.get("FEDTSA_GRID_DATA")
    if override:
        return Path(override)
    return Path(__file__).parent / "data" / "ieee39.grid"


def load_system(path: str | Path) -> BusSystem:
    """Parse and validate a grid data file."""
    path = Path(path)
    if not path.exists():
        raise GridDataError(f"grid data file not found: {path}")

    system_kv: dict[str, str] = {}
    rows: dict[str, list[list[str]]] = {name: [] for name in _SECTION_FIELDS}
    section = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            section = text[1:-1].strip()
            if section != "system" and section not in _SECTION_FIELDS:
                raise GridDataError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if section is None:
            raise GridDataError(f"{path}:{lineno}: data before any section header")
        if section == "system":
            if "=" not in text:
                raise GridDataError(f"{path}:{lineno}: expected key = value")
            key, _, value = text.partition("=")
            system_kv[key.strip()] = value.strip()
        else:
            fields = text.split()
            if len(fields) != _SECTION_FIELDS[section]:
                raise GridDataError(
                    f"{path}:{lineno}: [{section}] rows need "
                    f"{_SECTION_FIELDS[section]} fields, got {len(fields)}"
                )
            rows[section].append(fields)

    def num(section: str, fields: list[str], idx: int) -> float:
        try:
            return float(fields[idx])
        except ValueError:
            raise GridDataError(
                f"non-numeric value {fields[idx]!r} in [{section}] row {fields}"
            ) from None

    try:
        base_mva = float(system_kv["base_mva"])
        frequency = float(system_kv["frequency_hz"])
        name = system_kv.get("name", path.stem)
    except KeyError as missing:
        raise GridDataError(f"[system] section missing key {missing}") from None

    buses = tuple(
        Bus(
            id=int(num("bus", f, 0)),
            kind=f[1],
            vset=num("bus", f, 2),
            pload_mw=num("bus", f, 3),
            qload_mvar=num("bus", f, 4),
        )
        for f in rows["bus"]
    )
    lines = tuple(
        Line(
            id=int(num("line", f, 0)),
            from_bus=int(num("line", f, 1)),
            to_bus=int(num("line", f, 2)),
            r=num("line", f, 3),
            x=num("line", f, 4),
            b=num("line", f, 5),
        )
        for f in rows["line"]
    )
    transformers = tuple(
        Transformer(
            id=int(num("transformer", f, 0)),
            from_bus=int(num("transformer", f, 1)),
            to_bus=int(num("transformer", f, 2)),
            r=num("transformer", f, 3),
            x=num("transformer", f, 4),
            b=num("transformer", f, 5),
            tap=num("transformer", f, 6),
        )
        for f in rows["transformer"]
    )
    generators = tuple(
        Generator(
            id=int(num("generator", f, 0)),
            bus=int(num("generator", f, 1)),
            h_s=num("generator", f, 2),
            xdp=num("generator", f, 3),
            pgen_mw=num("generator", f, 4),
        )
        for f in rows["generator"]
    )

    sys = BusSystem(
        name=name,
        base_mva=base_mva,
        frequency_hz=frequency,
        buses=buses,
        lines=lines,
        transformers=transformers,
        generators=generators,
    )

    # Files declare their own expected counts; reject silent truncation.
    declared = {
        "bus_count": sys.n_buses,
        "generator_count": sys.n_generators,
        "line_count": len(sys.lines),
        "load_count": sum(1 for b in sys.buses if b.has_load),
    }
    for key, actual in declared.items():
        if key in system_kv and int(system_kv[key]) != actual:
            raise GridDataError(
                f"{path}: declared {key} = {system_kv[key]} but file has {actual}"
            )
    return sys


def _validate(sys: BusSystem) -> None:
    ids = [b.id for b in sys.buses]
    if len(set(ids)) != len(ids):
        raise GridDataError("duplicate bus ids")
    known = set(ids)
    if sys.base_mva <= 0 or sys.frequency_hz <= 0:
        raise GridDataError("base MVA and frequency must be positive")

    slack = [b for b in sys.buses if b.kind == "slack"]
    for b in sys.buses:
        if b.kind not in BUS_KINDS:
            raise GridDataError(f"bus {b.id}: unknown kind {b.kind!r}")
        if b.vset <= 0:
            raise GridDataError(f"bus {b.id}: voltage setpoint must be positive")
    if len(slack) != 1:
        raise GridDataError(f"need exactly one slack bus, found {len(slack)}")

    branches: list[tuple[int, int]] = []
    line_ids = [ln.id for ln in sys.lines]
    if len(set(line_ids)) != len(line_ids):
        raise GridDataError("duplicate line ids")
    for br in list(sys.lines) + list(sys.transformers):
        if br.from_bus not in known or br.to_bus not in known:
            raise GridDataError(f"branch {br.from_bus}-{br.to_bus}: unknown bus")
        if br.from_bus == br.to_bus:
            raise GridDataError(f"branch at bus {br.from_bus} loops onto itself")
        if br.x <= 0:
            raise GridDataError(f"branch {br.from_bus}-{br.to_bus}: reactance must be > 0")
        if br.r < 0 or br.b < 0:
            raise GridDataError(f"branch {br.from_bus}-{br.to_bus}: negative R or B")
        branches.append((br.from_bus, br.to_bus))
    for tr in sys.transformers:
        if tr.tap <= 0:
            raise GridDataError(f"transformer {tr.id}: tap must be positive")

    gen_buses = [g.bus for g in sys.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise GridDataError("multiple generators on one bus")
    kind_of = {b.id: b.kind for b in sys.buses}
    for g in sys.generators:
        if g.bus not in known:
            raise GridDataError(f"generator {g.id}: bus {g.bus} does not exist")
        if kind_of[g.bus] == "PQ":
            raise GridDataError(f"generator {g.id}: bus {g.bus} must be PV or slack")
        if g.h_s <= 0:
            raise GridDataError(f"generator {g.id}: inertia must be > 0")
        if g.xdp <= 0:
            raise GridDataError(f"generator {g.id}: transient reactance must be > 0")
    for b in sys.buses:
        if b.kind in ("PV", "slack") and b.id not in set(gen_buses):
            raise GridDataError(f"bus {b.id} is {b.kind} but hosts no generator")

    if sys.buses and not _connected(known, branches):
        raise GridDataError("branch graph is not connected")


def _connected(nodes: set[int], edges: list[tuple[int, int]]) -> bool:
    if not nodes:
        return True
    adj: dict[int, list[int]] = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = set()
    stack = [next(iter(nodes))]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(adj[n])
    return seen == nodes


# ---------------------------------------------------------------------------
# Admittance assembly and power flow
# ---------------------------------------------------------------------------

def bus_admittance(sys: BusSystem) -> np.ndarray:
    """Dense bus admittance matrix in BusSystem.buses order."""
    idx = sys.bus_index()
    n = sys.n_buses
    y = np.zeros((n, n), dtype=complex)
    for ln in sys.lines:
        _stamp_branch(y, idx[ln.from_bus], idx[ln.to_bus], ln.r, ln.x, ln.b, 1.0)
    for tr in sys.transformers:
        _stamp_branch(y, idx[tr.from_bus], idx[tr.to_bus], tr.r, tr.x, tr.b, tr.tap)
    return y


def _stamp_branch(y, f, t, r, x, b, tap):
    ys = 1.0 / complex(r, x)
    bsh = 1j * b / 2.0
    y[f, f] += (ys + bsh) / (tap * tap)
    y[t, t] += ys + bsh
    y[f, t] -= ys / tap
    y[t, f] -= ys / tap


def solve_power_flow(
    sys: BusSystem,
    load_scale: float = 1.0,
    tol: float = PF_TOLERANCE,
    max_iter: int = PF_MAX_ITER,
) -> PowerFlowSolution:
    """Newton-Raphson power flow with a flat start.

    ``load_scale`` multiplies every load; the slack bus absorbs the imbalance.
    """
    if not 0.9 <= load_scale <= 1.1:
        raise ValueError(f"load_scale must lie in [0.9, 1.1], got {load_scale}")

    idx = sys.bus_index()
    n = sys.n_buses
    y = bus_admittance(sys)

    kinds = np.array([b.kind for b in sys.buses])
    slack = int(np.flatnonzero(kinds == "slack")[0])
    pv = np.flatnonzero(kinds == "PV")
    pq = np.flatnonzero(kinds == "PQ")
    pvpq = np.concatenate([pv, pq])

    s_load = np.array(
        [complex(b.pload_mw, b.qload_mvar) for b in sys.buses]
    ) * (load_scale / sys.base_mva)
    p_gen = np.zeros(n)
    for g in sys.generators:
        p_gen[idx[g.bus]] += g.pgen_mw / sys.base_mva

    p_spec = p_gen - s_load.real
    q_spec = -s_load.imag

    vm = np.ones(n)
    for b in sys.buses:
        if b.kind in ("PV", "slack"):
            vm[idx[b.id]] = b.vset
    va = np.zeros(n)

    def mismatch(v):
        s = v * np.conj(y @ v)
        return np.concatenate([p_spec[pvpq] - s.real[pvpq], q_spec[pq] - s.imag[pq]])

    iterations = 0
    v = vm * np.exp(1j * va)
    f = mismatch(v)
    while np.max(np.abs(f)) >= tol:
        if iterations >= max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations "
                f"(load_scale={load_scale}, mismatch={np.max(np.abs(f)):.3e})"
            )
        i_bus = y @ v
        diag_v = np.diag(v)
        diag_i = np.diag(i_bus)
        diag_vn = np.diag(v / np.abs(v))
        ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
        ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn
        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}") from exc
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        iterations += 1

    s_inj = v * np.conj(y @ v)
    gen_p = np.empty(sys.n_generators)
    gen_q = np.empty(sys.n_generators)
    for k, g in enumerate(sys.generators):
        s_gen = s_inj[idx[g.bus]] + s_load[idx[g.bus]]
        gen_p[k] = s_gen.real
        gen_q[k] = s_gen.imag
    return PowerFlowSolution(
        v=v,
        gen_p=gen_p,
        gen_q=gen_q,
        load_scale=load_scale,
        iterations=iterations,
        max_mismatch=float(np.max(np.abs(mismatch(v)))),
    )


# ---------------------------------------------------------------------------
# Kron reduction to generator internal nodes
# ---------------------------------------------------------------------------

def kron_reduce(y: np.ndarray, keep: list[int] | np.ndarray) -> np.ndarray:
    """Eliminate all nodes not in ``keep``: Yaa - Yab Ybb^-1 Yba."""
    keep = np.asarray(keep, dtype=int)
    elim = np.array([i for i in range(y.shape[0]) if i not in set(keep.tolist())])
    if elim.size == 0:
        return y[np.ix_(keep, keep)].copy()
    yaa = y[np.ix_(keep, keep)]
    yab = y[np.ix_(keep, elim)]
    yba = y[np.ix_(elim, keep)]
    ybb = y[np.ix_(elim, elim)]
    try:
        x = np.linalg.solve(ybb, yba)
    except np.linalg.LinAlgError as exc:
        raise ReductionError(f"singular reduction sub-matrix: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise ReductionError("reduction produced non-finite entries")
    residual = np.max(np.abs(ybb @ x - yba))
    if residual > 1e-6 * max(1.0, np.max(np.abs(yba))):
        raise ReductionError(f"ill-conditioned reduction (residual {residual:.2e})")
    return yaa - yab @ x


class ReducedNetwork:
    """Admittance view of one fault stage, reduced to generator internal nodes.

    Retains the factored full network so generator terminal voltages and
    currents can be recovered from internal EMF phasors at any instant.
    """

    def __init__(self, sys: BusSystem, y_aug: np.ndarray, topology: str,
                 emf: np.ndarray, term_positions: np.ndarray):
        n_gen = sys.n_generators
        n_other = y_aug.shape[0] - n_gen
        gen_nodes = np.arange(n_other, n_other + n_gen)
        self.topology = topology
        self.emf = emf
        self.y_red = kron_reduce(y_aug, gen_nodes)
        self._emf_mag = np.abs(emf)
        self._xdp = np.array([g.xdp for g in sys.generators])
        self._y_og = y_aug[:n_other, n_other:]
        try:
            self._lu = lu_factor(y_aug[:n_other, :n_other])
        except ValueError as exc:
            raise ReductionError(f"singular network block: {exc}") from exc
        self._term_positions = term_positions

    @property
    def n_generators(self) -> int:
        return self.y_red.shape[0]

    def emf_phasors(self, delta: np.ndarray) -> np.ndarray:
        """Internal EMF phasors at rotor angles ``delta`` (rad)."""
        return self._emf_mag * np.exp(1j * delta)

    def electrical_power(self, delta: np.ndarray) -> np.ndarray:
        """Per-generator electrical power output (p.u.) at rotor angles delta."""
        e = self.emf_phasors(delta)
        return (e * np.conj(self.y_red @ e)).real

    def terminal_conditions(self, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Generator terminal voltage and current phasors for EMF phasors ``e``."""
        v_other = lu_solve(self._lu, -self._y_og @ e)
        v_term = v_other[self._term_positions]
        i_term = (e - v_term) / (1j * self._xdp)
        return v_term, i_term


def build_reduced(
    sys: BusSystem,
    pf: PowerFlowSolution,
    fault: FaultSpec | None = None,
    topology: str = PRE_FAULT,
) -> ReducedNetwork:
    """Build the reduced internal-node network for one fault stage.

    Loads become constant admittances at the pre-fault voltage. For the
    fault-on stage the faulted point is tied to ground through
    ``FAULT_IMPEDANCE``; for the post-fault stage a faulted line is removed
    while a bus fault simply disappears.
    """
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}")
    if topology != PRE_FAULT and fault is None:
        raise ValueError(f"{topology} topology requires a fault")

    idx = sys.bus_index()
    n = sys.n_buses
    n_gen = sys.n_generators

    faulted_line = None
    if fault is not None and fault.is_line_fault and topology != PRE_FAULT:
        faulted_line = sys.line_by_id(fault.line)
    if fault is not None and not fault.is_line_fault and fault.bus not in idx:
        raise GridDataError(f"fault bus {fault.bus} does not exist")

    # Node layout: physical buses, optional fault node, generator internal nodes.
    extra_fault_node = topology == FAULT_ON and faulted_line is not None
    n_other = n + (1 if extra_fault_node else 0)
    y = np.zeros((n_other + n_gen, n_other + n_gen), dtype=complex)

    for ln in sys.lines:
        if faulted_line is not None and ln.id == faulted_line.id:
            continue
        _stamp_branch(y, idx[ln.from_bus], idx[ln.to_bus], ln.r, ln.x, ln.b, 1.0)
    for tr in sys.transformers:
        _stamp_branch(y, idx[tr.from_bus], idx[tr.to_bus], tr.r, tr.x, tr.b, tr.tap)

    if extra_fault_node:
        p = fault.position
        fn = n
        f_idx, t_idx = idx[faulted_line.from_bus], idx[faulted_line.to_bus]
        _stamp_branch(y, f_idx, fn, faulted_line.r * p, faulted_line.x * p,
                      faulted_line.b * p, 1.0)
        _stamp_branch(y, fn, t_idx, faulted_line.r * (1 - p), faulted_line.x * (1 - p),
                      faulted_line.b * (1 - p), 1.0)
        y[fn, fn] += 1.0 / FAULT_IMPEDANCE
    elif topology == FAULT_ON:
        y[idx[fault.bus], idx[fault.bus]] += 1.0 / FAULT_IMPEDANCE

    # Loads as constant admittances at the solved pre-fault voltage.
    for k, b in enumerate(sys.buses):
        if b.has_load:
            s = complex(b.pload_mw, b.qload_mvar) * (pf.load_scale / sys.base_mva)
            y[k, k] += np.conj(s) / abs(pf.v[k]) ** 2

    # Generator internal nodes behind transient reactance.
    emf = np.empty(n_gen, dtype=complex)
    term_positions = np.empty(n_gen, dtype=int)
    for k, g in enumerate(sys.generators):
        b = idx[g.bus]
        node = n_other + k
        yg = 1.0 / (1j * g.xdp)
        y[node, node] += yg
        y[b, b] += yg
        y[node, b] -= yg
        y[b, node] -= yg
        i_gen = np.conj(complex(pf.gen_p[k], pf.gen_q[k]) / pf.v[b])
        emf[k] = pf.v[b] + 1j * g.xdp * i_gen
        term_positions[k] = b

    return ReducedNetwork(sys, y, topology, emf, term_positions)
