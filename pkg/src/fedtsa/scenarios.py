"""Per-client contingency grids: load levels crossed with fault locations.

Client 1 applies bus faults at every bus under base and +1% load; clients
2-4 apply line faults at 25%, 50%, and 75% of every line under their own
load pairs. Scenario indices enumerate fault locations in data-file order,
load levels innermost, so index subsets stay meaningful across runs.
"""

from __future__ import annotations

from .grid import BusSystem, FaultSpec
from .sim import Scenario

#: Load-scale pairs per client.
CLIENT_LOAD_LEVELS: dict[int, tuple[float, float]] = {
    1: (1.00, 1.01),
    2: (0.97, 1.05),
    3: (0.98, 1.03),
    4: (0.99, 1.02),
}

#: Line-fault position fraction per client (client 1 uses bus faults).
CLIENT_LINE_POSITION: dict[int, float] = {2: 0.25, 3: 0.50, 4: 0.75}


def client_faults(sys: BusSystem, client_id: int) -> list[FaultSpec]:
    if client_id == 1:
        return [FaultSpec.at_bus(b.id) for b in sys.buses]
    position = CLIENT_LINE_POSITION[client_id]
    return [FaultSpec.on_line(ln.id, position) for ln in sys.lines]


def client_scenarios(sys: BusSystem, client_id: int,
                     fault_cycles: int = 16, seed: int = 0) -> list[Scenario]:
    """The full contingency grid for one client."""
    if client_id not in CLIENT_LOAD_LEVELS:
        raise ValueError(f"client_id must be 1..4, got {client_id}")
    scenarios = []
    for fault in client_faults(sys, client_id):
        for load_scale in CLIENT_LOAD_LEVELS[client_id]:
            scenarios.append(Scenario(
                client_id=client_id,
                load_scale=load_scale,
                fault=fault,
                fault_cycles=fault_cycles,
                seed=seed,
            ))
    return scenarios


def parse_scenario_subset(spec: str, total: int) -> list[int]:
    """Parse ``"0..9"`` / ``"3,7,12"`` / mixes of both into sorted indices."""
    picked: set[int] = set()
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, _, hi = part.partition("..")
            picked.update(range(int(lo), int(hi) + 1))
        else:
            picked.add(int(part))
    bad = [i for i in picked if i < 0 or i >= total]
    if bad:
        raise ValueError(f"scenario indices {bad} outside 0..{total - 1}")
    return sorted(picked)
