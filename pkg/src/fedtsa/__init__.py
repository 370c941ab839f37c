"""Federated transient stability assessment toolkit.

Pipeline: simulate multi-machine swing-equation contingencies on the bundled
IEEE 39-bus system, cut the trajectories into labeled sliding-window samples,
train per-client CNN classifiers from scratch, and aggregate them with
federated averaging over an in-process or TCP transport.
"""

__version__ = "0.1.0"

from .grid import (BusSystem, FaultSpec, GridDataError, PowerFlowError,
                   ReductionError, build_reduced, default_grid_path,
                   kron_reduce, load_system, solve_power_flow)
from .sim import Scenario, Trajectory, detect_instability, simulate
from .labels import StabilityClass, TsiResult, label_window, scenario_tsi, tsi
from .dataset import ClientDataset, WindowSample, load, normalize, save, split, windowize
from .neural import (ModelArch, ModelParams, TrainConfig, backward, evaluate,
                     forward, init_params, load_checkpoint, loss,
                     save_checkpoint, sgd_step, train_local)
from .federation import (FedConfig, FedRunResult, RoundReport, fed_avg,
                         initialize, join_federation, run_centralized,
                         run_federated, FedAvgServer)

__all__ = [name for name in dir() if not name.startswith("_")]
