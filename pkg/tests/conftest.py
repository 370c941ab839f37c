import numpy as np
import pytest

from fedtsa import grid


@pytest.fixture(scope="session")
def ieee39():
    return grid.load_system(grid.default_grid_path())


@pytest.fixture(scope="session")
def ieee39_pf(ieee39):
    return grid.solve_power_flow(ieee39, 1.0)


def make_bus(bus_id, kind="PQ", vset=1.0, p=0.0, q=0.0):
    return grid.Bus(id=bus_id, kind=kind, vset=vset, pload_mw=p, qload_mvar=q)


def toy_system(buses, lines, generators, base_mva=100.0, name="toy"):
    return grid.BusSystem(
        name=name,
        base_mva=base_mva,
        frequency_hz=60.0,
        buses=tuple(buses),
        lines=tuple(lines),
        generators=tuple(generators),
    )


def smib_system(x_line=0.4, xdp=0.15, h=3.0, pgen_mw=80.0, r_line=0.0):
    """Single machine (bus 2) against a near-infinite bus (bus 1)."""
    return toy_system(
        buses=[
            make_bus(1, "slack", 1.0),
            make_bus(2, "PV", 1.0),
        ],
        lines=[grid.Line(id=1, from_bus=1, to_bus=2, r=r_line, x=x_line, b=0.0)],
        generators=[
            grid.Generator(id=1, bus=1, h_s=1e7, xdp=1e-4, pgen_mw=0.0),
            grid.Generator(id=2, bus=2, h_s=h, xdp=xdp, pgen_mw=pgen_mw),
        ],
        name="smib",
    )
