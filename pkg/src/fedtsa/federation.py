"""Federated averaging orchestration over in-process and TCP transports.

Each communication round broadcasts the global parameters, runs local
training at every client, averages the uploads elementwise, re-broadcasts,
and evaluates the new global model on every client's local test split. The
in-process runner and the TCP server/client pair share the same seed
schedule and the same client-id-ordered aggregation, so both transports
produce bit-identical parameters.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataset as ds_mod
from . import neural, transport
from .dataset import ClientDataset
from .neural import (EvalResult, ModelArch, ModelParams, TrainConfig,
                     TrainResult, evaluate, init_params, train_local)

IN_PROCESS = "in-process"
TCP = "tcp"


class FederationError(RuntimeError):
    """Configuration or protocol failure during a federated run."""


class FederationTimeoutError(FederationError):
    """A client missed the synchronous round deadline."""


@dataclass(frozen=True)
class FedConfig:
    """Protocol settings shared by both transports."""

    n_clients: int = 4
    rounds: int = 5
    local_epochs: int = 8
    learning_rate: float = 3e-4
    batch_size: int = 64
    seed: int = 0
    transport: str = IN_PROCESS
    early_accept_accuracy: float | None = None
    timeout_s: float = 120.0
    use_class_weights: bool = False

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1:
            raise ValueError("need at least one client and one round")
        if self.transport not in (IN_PROCESS, TCP):
            raise ValueError(f"unknown transport {self.transport!r}")


@dataclass
class ClientRoundStats:
    """What one client contributed to and measured in one round."""

    client_id: int
    final_train_loss: float
    final_val_loss: float
    test_accuracy: float
    confusion: np.ndarray
    train_losses: list[float] | None = None
    val_losses: list[float] | None = None


@dataclass
class RoundReport:
    round: int
    clients: dict[int, ClientRoundStats]
    wall_time_s: float = 0.0
    bytes_in: int = 0
    bytes_out: int = 0

    def mean_accuracy(self) -> float:
        return float(np.mean([c.test_accuracy for c in self.clients.values()]))


@dataclass
class FedRunResult:
    final_params: ModelParams
    reports: list[RoundReport]


def initialize(arch: ModelArch, seed: int) -> ModelParams:
    """Seeded initial global parameters, identical for every client."""
    return init_params(arch, seed)


def fed_avg(params_list: list[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean of parameter vectors.

    Summation runs in list order; callers pass clients sorted by id so the
    floating-point result is identical on every transport.
    """
    if not params_list:
        raise ValueError("nothing to average")
    arch = params_list[0].arch
    if any(p.arch.arch_hash() != arch.arch_hash() for p in params_list):
        raise ValueError("cannot average parameters of different architectures")
    total = params_list[0].theta.copy()
    for p in params_list[1:]:
        total += p.theta
    return ModelParams(arch, total / len(params_list))


def fed_avg_weighted(params_list: list[ModelParams],
                     weights: list[float]) -> ModelParams:
    """Dataset-size-weighted mean; off the default path."""
    if len(params_list) != len(weights) or not params_list:
        raise ValueError("need one weight per parameter vector")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() == 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    arch = params_list[0].arch
    total = params_list[0].theta * w[0]
    for p, wi in zip(params_list[1:], w[1:]):
        total = total + p.theta * wi
    return ModelParams(arch, total)


def round_train_config(config: FedConfig, client_id: int,
                       round_index: int) -> TrainConfig:
    """TrainConfig for one client in one round (rounds count from 1).

    Epoch seed streams continue across rounds, so a C-round federated
    schedule equals one standalone run of C x local_epochs epochs.
    """
    return TrainConfig(
        learning_rate=config.learning_rate,
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        client_id=client_id,
        epoch_offset=(round_index - 1) * config.local_epochs,
    )


def _check_datasets(config: FedConfig, datasets: list[ClientDataset]) -> dict[int, ClientDataset]:
    if len(datasets) != config.n_clients:
        raise FederationError(
            f"config expects {config.n_clients} clients, got {len(datasets)} datasets"
        )
    by_id = {}
    for ds in datasets:
        if ds.client_id in by_id:
            raise FederationError(f"duplicate client id {ds.client_id}")
        if not ds.splits:
            raise FederationError(f"client {ds.client_id}: dataset is not split")
        if not ds.normalized:
            raise FederationError(f"client {ds.client_id}: dataset is not normalized")
        by_id[ds.client_id] = ds
    return by_id


def run_federated(config: FedConfig, datasets: list[ClientDataset],
                  arch: ModelArch | None = None) -> FedRunResult:
    """Synchronous FedAvg, entirely in-process."""
    arch = arch or ModelArch()
    by_id = _check_datasets(config, datasets)
    weights = {
        cid: ds_mod.class_weights(ds) if config.use_class_weights else None
        for cid, ds in by_id.items()
    }
    theta = initialize(arch, config.seed)
    reports: list[RoundReport] = []
    for rnd in range(1, config.rounds + 1):
        started = time.perf_counter()
        results: dict[int, TrainResult] = {}
        for cid in sorted(by_id):
            cfg = replace(round_train_config(config, cid, rnd),
                          class_weights=weights[cid])
            results[cid] = train_local(theta, by_id[cid], cfg)
        theta = fed_avg([results[cid].params for cid in sorted(by_id)])
        clients = {}
        for cid in sorted(by_id):
            ev = evaluate(theta, by_id[cid], "test")
            res = results[cid]
            clients[cid] = ClientRoundStats(
                client_id=cid,
                final_train_loss=res.train_losses[-1],
                final_val_loss=res.val_losses[-1],
                test_accuracy=ev.accuracy,
                confusion=ev.confusion,
                train_losses=res.train_losses,
                val_losses=res.val_losses,
            )
        report = RoundReport(round=rnd, clients=clients,
                             wall_time_s=time.perf_counter() - started)
        reports.append(report)
        if (config.early_accept_accuracy is not None
                and report.mean_accuracy() >= config.early_accept_accuracy):
            break
    return FedRunResult(final_params=theta, reports=reports)


def run_centralized(datasets: list[ClientDataset], config: FedConfig,
                    arch: ModelArch | None = None,
                    client_id: int = 0) -> tuple[ModelParams, dict]:
    """Train one model on the union of all client training splits.

    Runs rounds x local_epochs epochs with the same seed schedule a
    federated client would see, giving the comparison row for reports.
    """
    arch = arch or ModelArch()
    for ds in datasets:
        if not ds.splits or not ds.normalized:
            raise FederationError("datasets must be split and normalized")
    merged = ds_mod.merge(datasets, client_id=client_id)
    cfg = TrainConfig(
        learning_rate=config.learning_rate,
        local_epochs=config.rounds * config.local_epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        client_id=client_id,
        class_weights=ds_mod.class_weights(merged) if config.use_class_weights else None,
    )
    theta = initialize(arch, config.seed)
    result = train_local(theta, merged, cfg)
    ev = evaluate(result.params, merged, "test")
    report = {
        "train_samples": int(merged.indices("train").size),
        "train_losses": result.train_losses,
        "val_losses": result.val_losses,
        "test_accuracy": ev.accuracy,
        "test_loss": ev.loss,
        "confusion": ev.confusion,
    }
    return result.params, report


# ---------------------------------------------------------------------------
# TCP roles
# ---------------------------------------------------------------------------

@dataclass
class ServerRunResult:
    final_params: ModelParams
    reports: list[RoundReport]
    bytes_in: int = 0
    bytes_out: int = 0


class FedAvgServer:
    """Synchronous FedAvg coordinator for ``n_clients`` TCP peers.

    Each round blocks until every client's LOCAL upload for that round has
    arrived, averages in client-id order, broadcasts the new global model,
    and collects METRICS. The session ends with a DONE frame carrying the
    final parameters.
    """

    def __init__(self, config: FedConfig, arch: ModelArch | None = None,
                 host: str = "127.0.0.1", port: int = 0, capture_path=None):
        self.config = config
        self.arch = arch or ModelArch()
        self._capture = open(capture_path, "wb") if capture_path else None
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]

    def run(self) -> ServerRunResult:
        config = self.config
        readers: dict[int, transport._Reader] = {}
        try:
            self._accept_clients(readers)
            theta = initialize(self.arch, config.seed)
            for _, reader in sorted(readers.items()):
                reader.conn.send(transport.GlobalModel(0, theta.theta))

            reports: list[RoundReport] = []
            final = theta
            rnd = 0
            while rnd < config.rounds:
                rnd += 1
                started = time.perf_counter()
                deadline = time.monotonic() + config.timeout_s
                uploads: dict[int, transport.LocalUpdate] = {}
                for cid, reader in sorted(readers.items()):
                    msg = self._expect(reader, transport.LocalUpdate, rnd, deadline,
                                       readers)
                    uploads[cid] = msg
                final = fed_avg([
                    ModelParams(self.arch, uploads[cid].params)
                    for cid in sorted(uploads)
                ])
                for _, reader in sorted(readers.items()):
                    reader.conn.send(transport.GlobalModel(rnd, final.theta))
                clients = {}
                for cid, reader in sorted(readers.items()):
                    metrics = self._expect(reader, transport.MetricsFrame, rnd,
                                           deadline, readers)
                    clients[cid] = ClientRoundStats(
                        client_id=cid,
                        final_train_loss=uploads[cid].train_loss,
                        final_val_loss=uploads[cid].val_loss,
                        test_accuracy=metrics.test_accuracy,
                        confusion=metrics.confusion.astype(np.int64),
                    )
                report = RoundReport(
                    round=rnd,
                    clients=clients,
                    wall_time_s=time.perf_counter() - started,
                    bytes_in=sum(r.conn.bytes_in for r in readers.values()),
                    bytes_out=sum(r.conn.bytes_out for r in readers.values()),
                )
                reports.append(report)
                if (config.early_accept_accuracy is not None
                        and report.mean_accuracy() >= config.early_accept_accuracy):
                    break
            for _, reader in sorted(readers.items()):
                reader.conn.send(transport.DoneFrame(final.theta))
            return ServerRunResult(
                final_params=final,
                reports=reports,
                bytes_in=sum(r.conn.bytes_in for r in readers.values()),
                bytes_out=sum(r.conn.bytes_out for r in readers.values()),
            )
        finally:
            for reader in readers.values():
                reader.conn.close()
            self._listener.close()
            if self._capture is not None:
                self._capture.close()

    def _accept_clients(self, readers: dict[int, transport._Reader]) -> None:
        config = self.config
        self._listener.settimeout(config.timeout_s)
        capture_lock = threading.Lock() if self._capture else None
        deadline = time.monotonic() + config.timeout_s
        while len(readers) < config.n_clients:
            if time.monotonic() > deadline:
                raise FederationTimeoutError("not all clients joined in time")
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                raise FederationTimeoutError("not all clients joined in time") from None
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = transport.Connection(sock, capture=self._capture,
                                        capture_lock=capture_lock)
            try:
                hello = conn.recv(timeout=config.timeout_s)
            except Exception:
                conn.close()
                continue
            if not isinstance(hello, transport.Hello):
                conn.send(transport.ErrorFrame(transport.ERR_MALFORMED,
                                               "expected HELLO"))
                conn.close()
                continue
            if hello.protocol_version != transport.PROTOCOL_VERSION:
                conn.send(transport.ErrorFrame(
                    transport.ERR_VERSION,
                    f"protocol version {hello.protocol_version} unsupported"))
                conn.close()
                continue
            if hello.arch_hash != self.arch.arch_hash():
                conn.send(transport.ErrorFrame(
                    transport.ERR_ARCH_MISMATCH, "architecture hash mismatch"))
                conn.close()
                continue
            if hello.client_id in readers:
                conn.send(transport.ErrorFrame(
                    transport.ERR_DUPLICATE_CLIENT,
                    f"client id {hello.client_id} already registered"))
                conn.close()
                continue
            conn.send(transport.ConfigFrame(
                rounds=config.rounds,
                local_epochs=config.local_epochs,
                learning_rate=config.learning_rate,
                seed=config.seed,
            ))
            reader = transport._Reader(conn)
            reader.start()
            readers[hello.client_id] = reader

    def _expect(self, reader, want, rnd, deadline, readers):
        try:
            msg = reader.next_frame(deadline)
        except transport.FederationTimeout:
            self._abort(readers, transport.ERR_TIMEOUT,
                        f"timed out waiting for round {rnd}")
            raise FederationTimeoutError(
                f"client frame for round {rnd} did not arrive in time") from None
        if not isinstance(msg, want):
            self._abort(readers, transport.ERR_MALFORMED,
                        f"expected {want.__name__} for round {rnd}")
            raise transport.ProtocolViolation(
                f"expected {want.__name__}, got {type(msg).__name__}")
        if msg.round != rnd:
            self._abort(readers, transport.ERR_STALE_ROUND,
                        f"round tag {msg.round}, expected {rnd}")
            raise transport.ProtocolViolation(
                f"stale round tag {msg.round} (expected {rnd})",
                code=transport.ERR_STALE_ROUND)
        return msg

    @staticmethod
    def _abort(readers, code, message):
        for reader in readers.values():
            try:
                reader.conn.send(transport.ErrorFrame(code, message))
            except OSError:
                pass


@dataclass
class ClientRunResult:
    client_id: int
    final_params: ModelParams
    train_curves: list[list[float]]   # per round, per epoch
    val_curves: list[list[float]]
    accuracies: list[float]
    confusions: list[np.ndarray]


def join_federation(host: str, port: int, client_id: int, ds: ClientDataset,
                    arch: ModelArch | None = None, batch_size: int = 64,
                    use_class_weights: bool = False,
                    capture_path=None) -> ClientRunResult:
    """Run one client against a FedAvg server. Blocks until DONE."""
    arch = arch or ModelArch()
    if not ds.splits or not ds.normalized:
        raise FederationError("dataset must be split and normalized")
    capture = open(capture_path, "wb") if capture_path else None
    conn = transport.connect(host, port, capture=capture)
    try:
        conn.send(transport.Hello(client_id, arch.arch_hash()))
        msg = conn.recv(timeout=60.0)
        if isinstance(msg, transport.ErrorFrame):
            raise transport.ProtocolViolation(
                f"server rejected HELLO: {msg.message}", code=msg.code)
        if not isinstance(msg, transport.ConfigFrame):
            raise transport.ProtocolViolation(
                f"expected CONFIG, got {type(msg).__name__}")
        cfg = msg
        weights = ds_mod.class_weights(ds) if use_class_weights else None

        msg = conn.recv(timeout=None)
        theta = _expect_global(msg, 0, arch)

        train_curves, val_curves, accuracies, confusions = [], [], [], []
        final = theta
        for rnd in range(1, cfg.rounds + 1):
            tcfg = TrainConfig(
                learning_rate=cfg.learning_rate,
                local_epochs=cfg.local_epochs,
                batch_size=batch_size,
                seed=cfg.seed,
                client_id=client_id,
                epoch_offset=(rnd - 1) * cfg.local_epochs,
                class_weights=weights,
            )
            result = train_local(theta, ds, tcfg)
            conn.send(transport.LocalUpdate(
                round=rnd, client_id=client_id, params=result.params.theta,
                train_loss=result.train_losses[-1],
                val_loss=result.val_losses[-1]))
            train_curves.append(result.train_losses)
            val_curves.append(result.val_losses)

            msg = conn.recv(timeout=None)
            if isinstance(msg, transport.DoneFrame):
                final = ModelParams(arch, msg.params)
                return ClientRunResult(client_id, final, train_curves,
                                       val_curves, accuracies, confusions)
            theta = _expect_global(msg, rnd, arch)
            final = theta
            ev = evaluate(theta, ds, "test")
            accuracies.append(ev.accuracy)
            confusions.append(ev.confusion)
            conn.send(transport.MetricsFrame(
                round=rnd, client_id=client_id, test_accuracy=ev.accuracy,
                confusion=ev.confusion.astype(np.uint64)))
        msg = conn.recv(timeout=None)
        if isinstance(msg, transport.ErrorFrame):
            raise transport.ProtocolViolation(
                f"server error: {msg.message}", code=msg.code)
        if not isinstance(msg, transport.DoneFrame):
            raise transport.ProtocolViolation(
                f"expected DONE, got {type(msg).__name__}")
        return ClientRunResult(client_id, ModelParams(arch, msg.params),
                               train_curves, val_curves, accuracies, confusions)
    finally:
        conn.close()
        if capture is not None:
            capture.close()


def _expect_global(msg, rnd, arch) -> ModelParams:
    if isinstance(msg, transport.ErrorFrame):
        raise transport.ProtocolViolation(f"server error: {msg.message}",
                                          code=msg.code)
    if not isinstance(msg, transport.GlobalModel):
        raise transport.ProtocolViolation(
            f"expected GLOBAL, got {type(msg).__name__}")
    if msg.round != rnd:
        raise transport.ProtocolViolation(
            f"global round tag {msg.round}, expected {rnd}",
            code=transport.ERR_STALE_ROUND)
    return ModelParams(arch, msg.params)
