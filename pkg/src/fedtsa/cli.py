"""Command-line entry points: dataset generation, training, serving, reports.

Exit codes: 0 success, 1 usage, 2 data error, 3 protocol error,
4 convergence/simulation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import subprocess
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__, dataset, federation, grid, neural, scenarios, sim, transport
from .federation import FedConfig
from .labels import CLASS_NAMES, StabilityClass
from .neural import ModelArch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROTOCOL = 3
EXIT_CONVERGENCE = 4

_DATA_ERRORS = (grid.GridDataError, dataset.DatasetFormatError,
                neural.CheckpointError, federation.FederationError,
                FileNotFoundError, ValueError)
_PROTOCOL_ERRORS = (transport.ProtocolViolation, ConnectionError,
                    transport.FederationTimeout,
                    federation.FederationTimeoutError)
_CONVERGENCE_ERRORS = (grid.PowerFlowError, grid.ReductionError,
                       sim.SimulationError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["software_version"] = __version__
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _load_grid(args) -> grid.BusSystem:
    path = Path(args.grid) if getattr(args, "grid", None) else grid.default_grid_path()
    return grid.load_system(path), path


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    system, grid_path = _load_grid(args)
    grid_hash = _sha256(grid_path)
    all_scens = scenarios.client_scenarios(system, args.client,
                                           fault_cycles=args.fault_cycles)
    if args.scenarios:
        picked = scenarios.parse_scenario_subset(args.scenarios, len(all_scens))
    else:
        picked = list(range(len(all_scens)))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_dir = Path(args.dump_traj) if args.dump_traj else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    simulated, skipped = [], []
    for idx in picked:
        scen = all_scens[idx]
        try:
            traj = sim.simulate(system, scen)
        except _CONVERGENCE_ERRORS as exc:
            print(f"[gen] scenario {idx} ({scen.fault.describe()}) skipped: {exc}",
                  file=sys.stderr)
            skipped.append(idx)
            continue
        samples.extend(dataset.windowize(traj, scenario_id=idx))
        simulated.append(idx)
        if dump_dir:
            _dump_trajectory_csv(dump_dir / f"scenario_{idx:04d}.csv", traj)

    if not simulated:
        raise grid.PowerFlowError("no scenario could be simulated")

    ds = dataset.from_samples(args.client, samples)
    census = ds.class_census()
    for cls in (StabilityClass.FAULT_OCCURRENCE, StabilityClass.FAULT_DURATION,
                StabilityClass.FAULT_CLEARANCE):
        if census.get(int(cls), 0) == 0:
            raise sim.SimulationError(
                f"class census lacks {CLASS_NAMES[cls]}; fault timing is off"
            )
    ds = dataset.split(ds, seed=args.seed)
    ds = dataset.normalize(ds)

    data_path = out_dir / f"client{args.client}.ftsa"
    dataset.save(ds, data_path)
    manifest = {
        "command": "gen",
        "client": args.client,
        "seed": args.seed,
        "fault_cycles": args.fault_cycles,
        "grid_data": str(grid_path),
        "grid_data_sha256": grid_hash,
        "scenarios_requested": picked,
        "scenarios_simulated": simulated,
        "scenarios_skipped": skipped,
        "class_census": census,
        "samples": len(ds),
        "artifacts": {"dataset": str(data_path)},
        "dataset_sha256": _sha256(data_path),
    }
    _write_manifest(out_dir / f"client{args.client}.manifest.json", manifest)
    print(f"[gen] client {args.client}: {len(simulated)} scenarios, "
          f"{len(ds)} windows -> {data_path}")
    print(f"[gen] class census: "
          + ", ".join(f"{CLASS_NAMES[StabilityClass(c)]}={n}"
                      for c, n in sorted(census.items())))
    return EXIT_OK


def _dump_trajectory_csv(path: Path, traj: sim.Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "generator", *sim.PARAMETERS])
        for k in range(traj.n_steps):
            for g in range(traj.series.shape[1]):
                writer.writerow([k, g + 1, *traj.series[k, g].tolist()])


# ---------------------------------------------------------------------------
# train-fed / train-central
# ---------------------------------------------------------------------------

def _load_datasets(paths) -> list[dataset.ClientDataset]:
    out = []
    for p in paths:
        ds = dataset.load(p)
        if not ds.splits or not ds.normalized:
            raise dataset.DatasetFormatError(
                f"{p}: dataset must be split and normalized (sidecar missing?)"
            )
        out.append(ds)
    return out


def _fed_config(args, n_clients, transport_name) -> FedConfig:
    return FedConfig(
        n_clients=n_clients,
        rounds=args.rounds,
        local_epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        transport=transport_name,
        early_accept_accuracy=args.early_accept,
        timeout_s=args.timeout,
        use_class_weights=args.class_weights,
    )


def _write_loss_csv(path: Path, curves: dict[int, tuple[list, list]],
                    epochs_per_round: int) -> None:
    """curves: client_id -> (train per global epoch, val per global epoch)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "epoch", "client", "train_loss", "val_loss"])
        for cid in sorted(curves):
            train, val = curves[cid]
            for e, (tl, vl) in enumerate(zip(train, val)):
                writer.writerow([e // epochs_per_round + 1,
                                 e % epochs_per_round + 1, cid,
                                 repr(tl), repr(vl)])


def _write_confusion_csv(path: Path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "true_class", "predicted_class",
                         "count"])
        for rep in reports:
            for cid, stats in sorted(rep.clients.items()):
                for i in range(5):
                    for j in range(5):
                        writer.writerow([rep.round, cid, i + 1, j + 1,
                                         int(stats.confusion[i, j])])


def _report_json(reports) -> list[dict]:
    out = []
    for rep in reports:
        out.append({
            "round": rep.round,
            "wall_time_s": rep.wall_time_s,
            "bytes_in": rep.bytes_in,
            "bytes_out": rep.bytes_out,
            "clients": {
                str(cid): {
                    "train_loss": stats.final_train_loss,
                    "val_loss": stats.final_val_loss,
                    "test_accuracy": stats.test_accuracy,
                    "confusion": stats.confusion.tolist(),
                }
                for cid, stats in sorted(rep.clients.items())
            },
        })
    return out


def cmd_train_fed(args) -> int:
    datasets = _load_datasets(args.datasets)
    config = _fed_config(args, len(datasets), args.transport)
    arch = ModelArch()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.transport == federation.IN_PROCESS:
        result = federation.run_federated(config, datasets, arch=arch)
        reports = result.reports
        final = result.final_params
        curves = {
            cid: (
                [v for rep in reports for v in rep.clients[cid].train_losses],
                [v for rep in reports for v in rep.clients[cid].val_losses],
            )
            for cid in reports[0].clients
        }
    else:
        final, reports, curves = _run_tcp_session(args, config, datasets,
                                                  arch, out_dir)

    ckpt = out_dir / "global_final.ftsm"
    neural.save_checkpoint(final, ckpt)
    loss_csv = out_dir / "loss_curves.csv"
    _write_loss_csv(loss_csv, curves, config.local_epochs)
    confusion_csv = out_dir / "confusion.csv"
    _write_confusion_csv(confusion_csv, reports)
    report_path = out_dir / "run_report.json"
    report_path.write_text(json.dumps(_report_json(reports), indent=1))

    manifest = {
        "command": "train-fed",
        "config": {
            "n_clients": config.n_clients,
            "rounds": config.rounds,
            "local_epochs": config.local_epochs,
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "seed": config.seed,
            "transport": config.transport,
            "early_accept_accuracy": config.early_accept_accuracy,
            "use_class_weights": config.use_class_weights,
        },
        "datasets": [
            {"path": str(p), "sha256": _sha256(Path(p)), "client_id": ds.client_id}
            for p, ds in zip(args.datasets, datasets)
        ],
        "arch_hash": f"{arch.arch_hash():#x}",
        "artifacts": {
            "final_checkpoint": str(ckpt),
            "loss_csv": str(loss_csv),
            "confusion_csv": str(confusion_csv),
            "report_json": str(report_path),
        },
    }
    _write_manifest(out_dir / "manifest.json", manifest)
    last = reports[-1]
    print(f"[train-fed] {config.transport} run finished after "
          f"{last.round} rounds; mean test accuracy "
          f"{last.mean_accuracy():.4f} -> {ckpt}")
    return EXIT_OK


def _run_tcp_session(args, config, datasets, arch, out_dir):
    """One server thread plus one client subprocess per dataset."""
    server = federation.FedAvgServer(config, arch=arch, host=args.host,
                                     port=args.port,
                                     capture_path=args.capture)
    box = {}

    def serve():
        box["result"] = server.run()

    thread = threading.Thread(target=serve)
    thread.start()
    procs = []
    for path, ds in zip(args.datasets, datasets):
        cmd = [sys.executable, "-m", "fedtsa.cli", "client",
               "--server", f"{server.host}:{server.port}",
               "--client-id", str(ds.client_id),
               "--dataset", str(path),
               "--batch-size", str(config.batch_size),
               "--out", str(out_dir)]
        if config.use_class_weights:
            cmd.append("--class-weights")
        procs.append(subprocess.Popen(cmd))
    failures = [p.wait() for p in procs]
    thread.join(timeout=config.timeout_s * (config.rounds + 2))
    if any(failures):
        raise federation.FederationError(
            f"client processes exited with {failures}")
    if "result" not in box:
        raise federation.FederationTimeoutError("server did not finish")
    result = box["result"]

    curves = {}
    for ds in datasets:
        curve_file = out_dir / f"client{ds.client_id}_curves.json"
        payload = json.loads(curve_file.read_text())
        curves[ds.client_id] = (
            [v for rnd in payload["train"] for v in rnd],
            [v for rnd in payload["val"] for v in rnd],
        )
    return result.final_params, result.reports, curves


def cmd_train_central(args) -> int:
    datasets = _load_datasets(args.datasets)
    config = _fed_config(args, len(datasets), federation.IN_PROCESS)
    arch = ModelArch()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, report = federation.run_centralized(datasets, config, arch=arch)
    ckpt = out_dir / "central_final.ftsm"
    neural.save_checkpoint(params, ckpt)
    payload = {
        "train_samples": report["train_samples"],
        "train_losses": report["train_losses"],
        "val_losses": report["val_losses"],
        "test_accuracy": report["test_accuracy"],
        "test_loss": report["test_loss"],
        "confusion": report["confusion"].tolist(),
    }
    (out_dir / "central_report.json").write_text(json.dumps(payload, indent=1))
    _write_manifest(out_dir / "central_manifest.json", {
        "command": "train-central",
        "epochs_total": config.rounds * config.local_epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "seed": config.seed,
        "datasets": [str(p) for p in args.datasets],
        "artifacts": {"checkpoint": str(ckpt)},
    })
    print(f"[train-central] accuracy {report['test_accuracy']:.4f} on "
          f"{report['train_samples']} training windows -> {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve / client
# ---------------------------------------------------------------------------

def cmd_serve(args) -> int:
    config = _fed_config(args, args.n_clients, federation.TCP)
    server = federation.FedAvgServer(config, arch=ModelArch(), host=args.host,
                                     port=args.port, capture_path=args.capture)
    print(f"[serve] listening on {server.host}:{server.port} for "
          f"{config.n_clients} clients")
    result = server.run()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "global_final.ftsm"
    neural.save_checkpoint(result.final_params, ckpt)
    _write_confusion_csv(out_dir / "confusion.csv", result.reports)
    (out_dir / "run_report.json").write_text(
        json.dumps(_report_json(result.reports), indent=1))
    print(f"[serve] done; {result.bytes_in} bytes in / "
          f"{result.bytes_out} bytes out -> {ckpt}")
    return EXIT_OK


def cmd_client(args) -> int:
    host, _, port = args.server.partition(":")
    if not port:
        raise _UsageError("--server must be HOST:PORT")
    ds = dataset.load(args.dataset)
    if not ds.splits or not ds.normalized:
        raise dataset.DatasetFormatError(
            f"{args.dataset}: dataset must be split and normalized")
    result = federation.join_federation(
        host, int(port), args.client_id, ds, arch=ModelArch(),
        batch_size=args.batch_size, use_class_weights=args.class_weights,
        capture_path=args.capture)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "client_id": result.client_id,
            "train": result.train_curves,
            "val": result.val_curves,
            "accuracies": result.accuracies,
        }
        (out_dir / f"client{result.client_id}_curves.json").write_text(
            json.dumps(payload, indent=1))
    print(f"[client {args.client_id}] finished "
          f"{len(result.train_curves)} rounds")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / report
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    arch = ModelArch()
    params = neural.load_checkpoint(args.model, arch)
    ds = dataset.load(args.dataset)
    if not ds.splits:
        raise dataset.DatasetFormatError(
            f"{args.dataset}: dataset has no split assignments")
    ev = neural.evaluate(params, ds, args.split)
    print(f"accuracy {ev.accuracy:.4f}  loss {ev.loss:.4f}  "
          f"({args.split} split, {int(ev.confusion.sum())} windows)")
    _print_confusion(ev.confusion)
    if args.out:
        Path(args.out).write_text(json.dumps({
            "accuracy": ev.accuracy,
            "loss": ev.loss,
            "split": args.split,
            "confusion": ev.confusion.tolist(),
        }, indent=1))
    return EXIT_OK


def _print_confusion(confusion) -> None:
    names = [CLASS_NAMES[StabilityClass(i)] for i in range(1, 6)]
    width = max(len(n) for n in names) + 2
    print(" " * width + "".join(f"{n:>{width}}" for n in names))
    for i, name in enumerate(names):
        row = "".join(f"{int(v):>{width}}" for v in confusion[i])
        print(f"{name:>{width}}" + row)


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    report_path = run_dir / "run_report.json"
    if not report_path.exists():
        raise FileNotFoundError(f"{report_path} not found; is this a run dir?")
    rounds = json.loads(report_path.read_text())
    if not rounds:
        raise ValueError("run report is empty")
    first, last = rounds[0], rounds[-1]
    print(f"run: {run_dir}  rounds: {len(rounds)}")
    summary = {"rounds": len(rounds), "clients": {}}
    for cid in sorted(last["clients"], key=int):
        v0 = first["clients"][cid]["val_loss"]
        v1 = last["clients"][cid]["val_loss"]
        acc = last["clients"][cid]["test_accuracy"]
        flag = "no overfitting signal" if v1 < v0 else "val loss not improved"
        print(f"client {cid}: val loss {v0:.4f} -> {v1:.4f} ({flag}); "
              f"test accuracy {acc:.4f}")
        confusion = np.array(last["clients"][cid]["confusion"])
        _print_confusion(confusion)
        recalls = {}
        for i in range(5):
            total = confusion[i].sum()
            recalls[str(i + 1)] = float(confusion[i, i] / total) if total else None
        summary["clients"][cid] = {
            "first_val_loss": v0,
            "final_val_loss": v1,
            "improved": v1 < v0,
            "test_accuracy": acc,
            "recalls": recalls,
        }
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="fedtsa",
                     description="Federated transient stability assessment")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate one client's contingency grid")
    p.add_argument("--client", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--out", required=True)
    p.add_argument("--scenarios", help="subset like '0..9' or '1,4,7'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault-cycles", type=int, default=16)
    p.add_argument("--grid", help="grid data file (default: bundled IEEE 39)")
    p.add_argument("--dump-traj", help="also write per-scenario debug CSVs here")
    p.set_defaults(func=cmd_gen)

    def add_train_args(p, transport_choice=False):
        p.add_argument("--datasets", nargs="+", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--rounds", type=int, default=5)
        p.add_argument("--epochs", type=int, default=8)
        p.add_argument("--lr", type=float, default=3e-4)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--class-weights", action="store_true",
                       help="inverse-frequency class weights in the loss")
        p.add_argument("--early-accept", type=float, default=None,
                       help="stop once mean client test accuracy reaches this")
        p.add_argument("--timeout", type=float, default=120.0)
        if transport_choice:
            p.add_argument("--transport", default="in-process",
                           choices=["in-process", "tcp"])
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=0)
            p.add_argument("--capture", help="record raw wire frames here")

    p = sub.add_parser("train-fed", help="federated training over N clients")
    add_train_args(p, transport_choice=True)
    p.set_defaults(func=cmd_train_fed)

    p = sub.add_parser("train-central", help="centralized baseline training")
    add_train_args(p)
    p.set_defaults(func=cmd_train_central)

    p = sub.add_parser("serve", help="run the aggregation server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7433)
    p.add_argument("--n-clients", type=int, default=4)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--early-accept", type=float, default=None)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--class-weights", action="store_true")
    p.add_argument("--capture", help="record raw wire frames here")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="join a federation as one client")
    p.add_argument("--server", required=True, help="HOST:PORT")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--class-weights", action="store_true")
    p.add_argument("--out", help="write per-round loss curves JSON here")
    p.add_argument("--capture", help="record raw wire frames here")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize a training run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--json", help="write the summary JSON here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _CONVERGENCE_ERRORS as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except _PROTOCOL_ERRORS as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
