"""Stability index arithmetic and window labeling against a literal oracle.

The oracle enumerates every step of a window and applies the five class
clauses verbatim (membership tests over explicit step lists), independent of
the library's arithmetic shortcuts.
"""

import numpy as np
import pytest

from fedtsa import grid, labels, sim
from fedtsa.labels import StabilityClass


def oracle_label(start, length, fault_on, fault_clear, instability, n_steps):
    """Clause-by-clause reading of the five class definitions.

    Precedence: Unstable > FaultClearance > FaultOccurrence > FaultDuration >
    Stable (higher severity wins on overlap).
    """
    steps = list(range(start, start + length))
    assert 0 <= start and steps[-1] < n_steps
    if instability is not None and any(t >= instability for t in steps):
        return StabilityClass.UNSTABLE
    if fault_clear is not None and fault_clear in steps:
        return StabilityClass.FAULT_CLEARANCE
    if fault_on is not None and fault_on in steps:
        return StabilityClass.FAULT_OCCURRENCE
    if fault_on is not None and all(fault_on < t < fault_clear for t in steps):
        return StabilityClass.FAULT_DURATION
    return StabilityClass.STABLE


# ---------------------------------------------------------------------------
# TSI
# ---------------------------------------------------------------------------

def test_tsi_reference_points():
    assert labels.tsi(0.0).eta == 1.0
    assert labels.tsi(0.0).stable
    assert labels.tsi(360.0).eta == 0.0
    assert not labels.tsi(360.0).stable  # boundary counts as unstable
    assert labels.tsi(120.0).eta == 0.5
    assert labels.tsi(120.0).stable


def test_tsi_rejects_bad_input():
    with pytest.raises(ValueError):
        labels.tsi(-1.0)
    with pytest.raises(ValueError):
        labels.tsi(float("nan"))
    with pytest.raises(ValueError):
        labels.tsi(float("inf"))


def test_tsi_strictly_decreasing():
    rng = np.random.default_rng(5)
    values = np.sort(rng.uniform(0.0, 2000.0, 1000))
    etas = np.array([labels.tsi(v).eta for v in values])
    assert np.all(np.diff(etas) < 0)
    assert np.all(etas > -1.0)
    assert np.all(etas <= 1.0)


# ---------------------------------------------------------------------------
# Window labeling
# ---------------------------------------------------------------------------

def test_label_window_spec_cases():
    # fault_on=60, clear=76
    assert labels.label_window(56, 5, 60, 76) == StabilityClass.FAULT_OCCURRENCE
    assert labels.label_window(61, 5, 60, 76) == StabilityClass.FAULT_DURATION
    assert labels.label_window(0, 5, 60, 76) == StabilityClass.STABLE
    assert labels.label_window(72, 5, 60, 76) == StabilityClass.FAULT_CLEARANCE
    assert labels.label_window(798, 5, 60, 76, 800) == StabilityClass.UNSTABLE


def test_label_window_bounds():
    with pytest.raises(ValueError):
        labels.label_window(1196, 5, 60, 76)
    with pytest.raises(ValueError):
        labels.label_window(-1, 5, 60, 76)


def test_label_window_matches_oracle_randomized():
    rng = np.random.default_rng(23)
    n_steps, window = 1200, 5
    for _ in range(50):
        fault_on = int(rng.integers(10, 1000))
        fault_clear = fault_on + int(rng.integers(1, 80))
        instability = None
        if rng.random() < 0.6:
            instability = int(rng.integers(fault_on, n_steps))
        for start in range(n_steps - window + 1):
            got = labels.label_window(start, window, fault_on, fault_clear,
                                      instability, n_steps)
            want = oracle_label(start, window, fault_on, fault_clear,
                                instability, n_steps)
            assert got == want, (start, fault_on, fault_clear, instability)


def _runs(seq):
    out = []
    for v in seq:
        if not out or out[-1][0] != v:
            out.append([v, 0])
        out[-1][1] += 1
    return [tuple(r) for r in out]


def test_label_pattern_stable_trajectory():
    seq = [labels.label_window(k, 5, 60, 76, None, 1200) for k in range(1196)]
    runs = _runs(seq)
    assert [r[0] for r in runs] == [1, 2, 3, 4, 1]
    assert runs[1] == (2, 5)    # five windows contain the fault-on instant
    assert runs[3] == (4, 5)    # five windows contain the clearance instant
    assert runs[2] == (3, 76 - 60 - 5)  # windows strictly inside the fault


def test_label_pattern_unstable_trajectory():
    seq = [labels.label_window(k, 5, 60, 76, 500, 1200) for k in range(1196)]
    runs = _runs(seq)
    assert [r[0] for r in runs] == [1, 2, 3, 4, 1, 5]
    assert runs[-1][1] == 1196 - (500 - 4)  # every window touching >= 496


def test_label_unstable_during_fault_precedence():
    # Divergence inside the fault window: class 5 silences 3 and 4.
    seq = [labels.label_window(k, 5, 60, 76, 70, 1200) for k in range(1196)]
    runs = _runs(seq)
    assert [r[0] for r in runs] == [1, 2, 3, 5]
    for k in range(66, 1192):
        assert seq[k] == 5


def test_partition_every_window_has_one_label():
    rng = np.random.default_rng(9)
    for _ in range(10):
        fault_on = int(rng.integers(6, 1100))
        fault_clear = fault_on + 16
        instability = int(rng.integers(fault_on, 1200)) if rng.random() < 0.5 else None
        for k in range(1196):
            lab = labels.label_window(k, 5, fault_on, fault_clear,
                                      instability, 1200)
            assert lab in StabilityClass


def test_scenario_tsi_consistency(ieee39):
    stable = sim.simulate(ieee39, sim.Scenario(
        client_id=1, load_scale=1.0, fault=grid.FaultSpec.at_bus(1)))
    unstable = sim.simulate(ieee39, sim.Scenario(
        client_id=1, load_scale=1.0, fault=grid.FaultSpec.at_bus(4)))
    assert stable.instability_index is None
    assert labels.scenario_tsi(stable).eta > 0
    assert unstable.instability_index is not None
    assert labels.scenario_tsi(unstable).eta <= 0
