"""Transient stability index and the five-class window labeling scheme."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .sim import Trajectory

#: Rotor-angle separation (degrees) at which the stability index crosses zero.
SEPARATION_REF_DEG = 360.0


class StabilityClass(IntEnum):
    STABLE = 1
    FAULT_OCCURRENCE = 2
    FAULT_DURATION = 3
    FAULT_CLEARANCE = 4
    UNSTABLE = 5


CLASS_NAMES = {
    StabilityClass.STABLE: "Stable",
    StabilityClass.FAULT_OCCURRENCE: "FaultOccurrence",
    StabilityClass.FAULT_DURATION: "FaultDuration",
    StabilityClass.FAULT_CLEARANCE: "FaultClearance",
    StabilityClass.UNSTABLE: "Unstable",
}


@dataclass(frozen=True)
class TsiResult:
    """Stability index eta = (360 - |dd|max) / (360 + |dd|max)."""

    delta_max_deg: float
    eta: float

    @property
    def stable(self) -> bool:
        return self.eta > 0.0


def tsi(delta_max_deg: float) -> TsiResult:
    """Stability index for a maximum pairwise rotor-angle separation."""
    if not math.isfinite(delta_max_deg) or delta_max_deg < 0:
        raise ValueError(f"delta_max must be finite and >= 0, got {delta_max_deg}")
    eta = (SEPARATION_REF_DEG - delta_max_deg) / (SEPARATION_REF_DEG + delta_max_deg)
    return TsiResult(delta_max_deg=delta_max_deg, eta=eta)


def scenario_tsi(traj: Trajectory) -> TsiResult:
    """Trajectory-level stability index from the post-disturbance separation."""
    start = traj.fault_on_index if traj.fault_on_index is not None else 0
    angles = traj.rotor_angles[start:]
    separation = angles.max(axis=1) - angles.min(axis=1)
    return tsi(float(separation.max()))


def label_window(
    window_start: int,
    window_len: int,
    fault_on_index: int | None,
    fault_clear_index: int | None,
    instability_index: int | None = None,
    n_steps: int = 1200,
) -> StabilityClass:
    """Class of the observation window covering steps [start, start+len-1].

    Precedence when clauses overlap: Unstable > FaultClearance >
    FaultOccurrence > FaultDuration > Stable, so no unstable instant is ever
    labeled stable.
    """
    end = window_start + window_len - 1
    if window_start < 0 or end >= n_steps:
        raise ValueError(
            f"window [{window_start}, {end}] out of range [0, {n_steps})"
        )
    if (fault_on_index is None) != (fault_clear_index is None):
        raise ValueError("fault-on and fault-clear indices must be given together")
    if fault_on_index is not None and fault_on_index >= fault_clear_index:
        raise ValueError("fault_on_index must precede fault_clear_index")

    if instability_index is not None and end >= instability_index:
        return StabilityClass.UNSTABLE
    if fault_on_index is None:
        return StabilityClass.STABLE
    if window_start <= fault_clear_index <= end:
        return StabilityClass.FAULT_CLEARANCE
    if window_start <= fault_on_index <= end:
        return StabilityClass.FAULT_OCCURRENCE
    if window_start > fault_on_index and end < fault_clear_index:
        return StabilityClass.FAULT_DURATION
    return StabilityClass.STABLE


def label_trajectory(traj: Trajectory, window_len: int = 5) -> np.ndarray:
    """Labels of every sliding window of ``traj``, stride 1."""
    n = traj.n_steps - window_len + 1
    if n <= 0:
        raise ValueError("trajectory shorter than one window")
    return np.array(
        [
            label_window(
                k,
                window_len,
                traj.fault_on_index,
                traj.fault_clear_index,
                traj.instability_index,
                traj.n_steps,
            )
            for k in range(n)
        ],
        dtype=np.uint8,
    )
