"""Multi-machine swing-equation simulation through a fault sequence.

Each generator is a constant EMF behind transient reactance; rotor dynamics
follow delta' = w_dev, (2H/w_s) w_dev' = Pm - Pe(delta) with Pe evaluated on
the reduced network of the active fault stage. Integration is classical RK4
with a fixed internal step, sampled once per recording interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import grid
from .grid import BusSystem, FaultSpec, ReducedNetwork

#: Order of the recorded per-generator parameters (the third axis of
#: Trajectory.series).
PARAMETERS = (
    "current_mag_pu",
    "voltage_mag_pu",
    "rotor_angle_deg",
    "voltage_angle_deg",
    "frequency_hz",
)

CURRENT_MAG, VOLTAGE_MAG, ROTOR_ANGLE, VOLTAGE_ANGLE, FREQUENCY = range(5)

#: First instant at which the maximum pairwise rotor-angle separation
#: crossing this many degrees flags loss of synchronism.
SEPARATION_LIMIT_DEG = 360.0


class SimulationError(RuntimeError):
    """Scenario could not be simulated."""


@dataclass(frozen=True)
class Scenario:
    """One contingency: a load level plus an optional timed three-phase fault."""

    client_id: int
    load_scale: float
    fault: FaultSpec | None
    t_fault_on: float = 1.0
    fault_cycles: int = 16
    dt: float = 1.0 / 60.0
    duration: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.client_id <= 4:
            raise ValueError(f"client_id must be 1..4, got {self.client_id}")
        if self.dt <= 0 or self.duration <= 0:
            raise ValueError("dt and duration must be positive")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("duration must be an integer number of samples")
        if self.fault is not None:
            on = self.t_fault_on / self.dt
            if abs(on - round(on)) > 1e-9:
                raise ValueError("fault must land on a sample instant")
            if self.fault_cycles < 0:
                raise ValueError("fault_cycles must be >= 0")
            if round(on) + self.fault_cycles >= round(steps):
                raise ValueError("fault clearance falls outside the simulation")

    @property
    def n_steps(self) -> int:
        return round(self.duration / self.dt)

    @property
    def fault_on_index(self) -> int | None:
        if self.fault is None:
            return None
        return round(self.t_fault_on / self.dt)

    @property
    def fault_clear_index(self) -> int | None:
        if self.fault is None:
            return None
        return self.fault_on_index + self.fault_cycles


@dataclass(frozen=True)
class Trajectory:
    """Sampled per-generator time series for one simulated scenario.

    ``series`` has shape (steps, generators, 5) in PARAMETERS order; rotor
    and voltage angles are reported in the center-of-inertia frame.
    """

    series: np.ndarray
    fault_on_index: int | None
    fault_clear_index: int | None
    instability_index: int | None
    scenario: Scenario

    @property
    def n_steps(self) -> int:
        return self.series.shape[0]

    @property
    def rotor_angles(self) -> np.ndarray:
        return self.series[:, :, ROTOR_ANGLE]


def detect_instability(rotor_angles_deg: np.ndarray) -> int | None:
    """First step at which any pairwise rotor-angle separation exceeds 360 deg.

    ``rotor_angles_deg`` is (steps, generators); a common reference shift
    cancels out of every pairwise difference.
    """
    separation = rotor_angles_deg.max(axis=1) - rotor_angles_deg.min(axis=1)
    over = np.flatnonzero(separation > SEPARATION_LIMIT_DEG)
    return int(over[0]) if over.size else None


def integrate_swing(
    delta: np.ndarray,
    omega_dev: np.ndarray,
    pm: np.ndarray,
    inertia: np.ndarray,
    omega_s: float,
    pe_func,
    h: float,
    n_steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the swing equations ``n_steps`` RK4 steps of size ``h``.

    ``h`` may be negative (time reversal). Returns the new (delta, omega_dev).
    """
    accel = omega_s / (2.0 * inertia)

    def rhs(d, w):
        return w, accel * (pm - pe_func(d))

    for _ in range(n_steps):
        k1d, k1w = rhs(delta, omega_dev)
        k2d, k2w = rhs(delta + 0.5 * h * k1d, omega_dev + 0.5 * h * k1w)
        k3d, k3w = rhs(delta + 0.5 * h * k2d, omega_dev + 0.5 * h * k2w)
        k4d, k4w = rhs(delta + h * k3d, omega_dev + h * k3w)
        delta = delta + (h / 6.0) * (k1d + 2 * k2d + 2 * k3d + k4d)
        omega_dev = omega_dev + (h / 6.0) * (k1w + 2 * k2w + 2 * k3w + k4w)
    return delta, omega_dev


def simulate(sys: BusSystem, scen: Scenario, substeps: int = 4) -> Trajectory:
    """Simulate one scenario and sample all five parameter series.

    The network topology switches exactly at the fault-on and fault-clear
    sample instants; each recording interval is integrated with ``substeps``
    internal RK4 steps.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    pf = grid.solve_power_flow(sys, scen.load_scale)
    pre = grid.build_reduced(sys, pf, None, grid.PRE_FAULT)
    if scen.fault is not None:
        fault_on_net = grid.build_reduced(sys, pf, scen.fault, grid.FAULT_ON)
        post_net = grid.build_reduced(sys, pf, scen.fault, grid.POST_FAULT)
    else:
        fault_on_net = post_net = pre

    on_idx = scen.fault_on_index
    clear_idx = scen.fault_clear_index

    def stage(k: int) -> ReducedNetwork:
        if on_idx is None or k < on_idx:
            return pre
        if k < clear_idx:
            return fault_on_net
        return post_net

    inertia = sys.inertia()
    omega_s = sys.omega_s()
    h = scen.dt / substeps
    n_steps = scen.n_steps

    delta = np.angle(pre.emf)
    omega_dev = np.zeros_like(delta)
    pm = pre.electrical_power(delta)

    f0 = sys.frequency_hz
    series = np.empty((n_steps, sys.n_generators, 5))
    _record(series, 0, stage(0), delta, omega_dev, inertia, f0)
    last_finite = 0
    for k in range(n_steps - 1):
        net = stage(k)
        delta, omega_dev = integrate_swing(
            delta, omega_dev, pm, inertia, omega_s, net.electrical_power, h, substeps
        )
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(omega_dev))):
            series[k + 1:] = series[last_finite]
            break
        _record(series, k + 1, stage(k + 1), delta, omega_dev, inertia, f0)
        last_finite = k + 1

    instability = detect_instability(series[:, :, ROTOR_ANGLE])
    if instability is None and last_finite < n_steps - 1:
        instability = last_finite
    return Trajectory(
        series=series,
        fault_on_index=on_idx,
        fault_clear_index=clear_idx,
        instability_index=instability,
        scenario=scen,
    )


def _record(series, k, net, delta, omega_dev, inertia, f0):
    coi = float(np.dot(inertia, delta) / inertia.sum())
    delta_rel = delta - coi
    v_term, i_term = net.terminal_conditions(net.emf_phasors(delta_rel))
    series[k, :, CURRENT_MAG] = np.abs(i_term)
    series[k, :, VOLTAGE_MAG] = np.abs(v_term)
    series[k, :, ROTOR_ANGLE] = np.degrees(delta_rel)
    series[k, :, VOLTAGE_ANGLE] = np.degrees(np.angle(v_term))
    series[k, :, FREQUENCY] = f0 + omega_dev / (2.0 * math.pi)
