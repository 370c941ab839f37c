"""Wire framing, the TCP server/client pair, and the privacy boundary."""

import struct
import threading

import numpy as np
import pytest

from fedtsa import federation, transport
from fedtsa.federation import FedAvgServer, FedConfig, join_federation, run_federated
from fedtsa.neural import ModelArch
from test_federation import _client_dataset

ARCH = ModelArch(conv1_filters=2, conv2_filters=2, hidden_units=8)


# ---------------------------------------------------------------------------
# Frame encoding
# ---------------------------------------------------------------------------

def _round_trip(msg):
    frame_type, payload = transport.encode(msg)
    return frame_type, transport.decode(frame_type, payload)


def test_hello_round_trip():
    t, back = _round_trip(transport.Hello(3, 0xDEADBEEF12345678))
    assert t == transport.HELLO
    assert back == transport.Hello(3, 0xDEADBEEF12345678, 1)


def test_config_round_trip():
    t, back = _round_trip(transport.ConfigFrame(5, 8, 3e-4, 42))
    assert t == transport.CONFIG
    assert back.rounds == 5
    assert back.local_epochs == 8
    assert back.learning_rate == 3e-4
    assert back.seed == 42


def test_global_local_done_round_trip():
    params = np.random.default_rng(0).normal(size=33)
    _, g = _round_trip(transport.GlobalModel(2, params))
    assert g.round == 2 and np.array_equal(g.params, params)
    _, l = _round_trip(transport.LocalUpdate(3, 1, params, 0.5, 0.25))
    assert (l.round, l.client_id, l.train_loss, l.val_loss) == (3, 1, 0.5, 0.25)
    assert np.array_equal(l.params, params)
    _, d = _round_trip(transport.DoneFrame(params))
    assert np.array_equal(d.params, params)


def test_metrics_and_error_round_trip():
    confusion = np.arange(25, dtype=np.uint64).reshape(5, 5)
    _, m = _round_trip(transport.MetricsFrame(1, 4, 0.875, confusion))
    assert m.test_accuracy == 0.875
    assert np.array_equal(m.confusion, confusion)
    _, e = _round_trip(transport.ErrorFrame(transport.ERR_STALE_ROUND, "late"))
    assert e.code == transport.ERR_STALE_ROUND
    assert e.message == "late"


def test_decode_rejects_unknown_type_and_short_payload():
    with pytest.raises(transport.ProtocolViolation, match="unknown frame"):
        transport.decode(0x55, b"")
    with pytest.raises(transport.ProtocolViolation, match="malformed"):
        transport.decode(transport.HELLO, b"\x01\x02")


def test_encode_rejects_non_messages():
    with pytest.raises(TypeError, match="not a wire message"):
        transport.encode({"features": np.zeros((5, 10, 5))})


def test_length_prefix_counts_payload_bytes():
    params = np.zeros(7)
    frame_type, payload = transport.encode(transport.GlobalModel(1, params))
    blob = struct.pack("<IB", len(payload), frame_type) + payload
    length, ftype = struct.unpack_from("<IB", blob, 0)
    assert ftype == transport.GLOBAL
    assert length == len(blob) - 5 == 4 + 8 + 7 * 8


# ---------------------------------------------------------------------------
# Privacy boundary: the message vocabulary cannot express samples
# ---------------------------------------------------------------------------

def test_message_vocabulary_is_closed():
    assert set(transport.MESSAGE_TYPES) == set(transport.FRAME_TYPES)
    assert len(transport.MESSAGE_TYPES) == 7
    banned = ("feature", "sample", "window", "dataset", "series")
    for cls in transport.MESSAGE_TYPES.values():
        for field_name in cls.__dataclass_fields__:
            assert not any(b in field_name.lower() for b in banned), \
                f"{cls.__name__}.{field_name} looks like a data payload"


def _parse_capture(path):
    blob = open(path, "rb").read()
    types = []
    off = 0
    while off < len(blob):
        length, ftype = struct.unpack_from("<IB", blob, off)
        transport.decode(ftype, blob[off + 5 : off + 5 + length])
        types.append(ftype)
        off += 5 + length
    assert off == len(blob)
    return types


# ---------------------------------------------------------------------------
# End-to-end TCP session (threads; process-level runs live in acceptance)
# ---------------------------------------------------------------------------

def _run_tcp(config, datasets, capture_path=None, client_kw=None):
    server = FedAvgServer(config, arch=ARCH, capture_path=capture_path)
    server_out = {}

    def serve():
        server_out["result"] = server.run()

    t = threading.Thread(target=serve)
    t.start()
    client_threads = []
    client_out = {}

    def client(ds):
        client_out[ds.client_id] = join_federation(
            server.host, server.port, ds.client_id, ds, arch=ARCH,
            batch_size=config.batch_size, **(client_kw or {}))

    for ds in datasets:
        ct = threading.Thread(target=client, args=(ds,))
        ct.start()
        client_threads.append(ct)
    for ct in client_threads:
        ct.join(timeout=120)
    t.join(timeout=120)
    assert "result" in server_out, "server did not finish"
    return server_out["result"], client_out


def test_tcp_matches_in_process_bitwise(tmp_path):
    datasets = [_client_dataset(1), _client_dataset(2)]
    config = FedConfig(n_clients=2, rounds=2, local_epochs=2,
                       learning_rate=1e-3, batch_size=32, seed=13,
                       transport="tcp")
    capture = tmp_path / "wire.capture"
    tcp_result, clients = _run_tcp(config, datasets, capture_path=capture)
    in_proc = run_federated(config, datasets, arch=ARCH)

    assert np.array_equal(tcp_result.final_params.theta,
                          in_proc.final_params.theta)
    for ds in datasets:
        assert np.array_equal(clients[ds.client_id].final_params.theta,
                              in_proc.final_params.theta)
    assert len(tcp_result.reports) == len(in_proc.reports)
    for tcp_rep, ip_rep in zip(tcp_result.reports, in_proc.reports):
        for cid in tcp_rep.clients:
            a, b = tcp_rep.clients[cid], ip_rep.clients[cid]
            assert np.array_equal(a.confusion, b.confusion)
            assert a.test_accuracy == b.test_accuracy
            assert a.final_train_loss == b.final_train_loss
            assert a.final_val_loss == b.final_val_loss
    assert tcp_result.bytes_in > 0 and tcp_result.bytes_out > 0

    # wire capture holds only the seven protocol frame types
    types = _parse_capture(capture)
    assert set(types) <= set(transport.FRAME_TYPES)
    assert transport.LOCAL in types and transport.METRICS in types


def test_duplicate_client_id_rejected():
    datasets = [_client_dataset(1), _client_dataset(2)]
    config = FedConfig(n_clients=2, rounds=1, local_epochs=1,
                       learning_rate=1e-3, batch_size=32, seed=1,
                       transport="tcp", timeout_s=30)
    server = FedAvgServer(config, arch=ARCH)
    result_box = {}
    t = threading.Thread(target=lambda: result_box.update(r=server.run()))
    t.start()

    first = transport.connect(server.host, server.port)
    first.send(transport.Hello(3, ARCH.arch_hash()))
    assert isinstance(first.recv(timeout=10), transport.ConfigFrame)

    dup = transport.connect(server.host, server.port)
    dup.send(transport.Hello(3, ARCH.arch_hash()))
    answer = dup.recv(timeout=10)
    assert isinstance(answer, transport.ErrorFrame)
    assert answer.code == transport.ERR_DUPLICATE_CLIENT
    dup.close()

    # a distinct id still joins; finish the session properly
    errors = []

    def legit(ds):
        try:
            join_federation(server.host, server.port, ds.client_id, ds,
                            arch=ARCH, batch_size=32)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    lt = threading.Thread(target=legit, args=(datasets[1],))
    lt.start()

    # drive client 3 by hand
    g0 = first.recv(timeout=30)
    assert isinstance(g0, transport.GlobalModel)
    first.send(transport.LocalUpdate(1, 3, g0.params, 0.0, 0.0))
    g1 = first.recv(timeout=60)
    assert isinstance(g1, transport.GlobalModel)
    first.send(transport.MetricsFrame(1, 3, 1.0,
                                      np.zeros((5, 5), dtype=np.uint64)))
    done = first.recv(timeout=30)
    assert isinstance(done, transport.DoneFrame)
    first.close()
    lt.join(timeout=60)
    t.join(timeout=60)
    assert not errors
    assert "r" in result_box


def test_stale_round_aborts_session():
    config = FedConfig(n_clients=1, rounds=2, local_epochs=1,
                       learning_rate=1e-3, batch_size=32, seed=1,
                       transport="tcp", timeout_s=30)
    server = FedAvgServer(config, arch=ARCH)
    failure = {}

    def serve():
        try:
            server.run()
        except transport.ProtocolViolation as exc:
            failure["exc"] = exc

    t = threading.Thread(target=serve)
    t.start()
    conn = transport.connect(server.host, server.port)
    conn.send(transport.Hello(1, ARCH.arch_hash()))
    assert isinstance(conn.recv(timeout=10), transport.ConfigFrame)
    g0 = conn.recv(timeout=10)
    conn.send(transport.LocalUpdate(7, 1, g0.params, 0.0, 0.0))  # wrong round
    answer = conn.recv(timeout=10)
    assert isinstance(answer, transport.ErrorFrame)
    assert answer.code == transport.ERR_STALE_ROUND
    conn.close()
    t.join(timeout=30)
    assert isinstance(failure["exc"], transport.ProtocolViolation)


def test_arch_mismatch_rejected_at_hello():
    config = FedConfig(n_clients=1, rounds=1, local_epochs=1,
                       learning_rate=1e-3, batch_size=32, seed=1,
                       transport="tcp", timeout_s=15)
    server = FedAvgServer(config, arch=ARCH)
    t = threading.Thread(target=lambda: _swallow(server))
    t.start()
    conn = transport.connect(server.host, server.port)
    conn.send(transport.Hello(1, ModelArch().arch_hash()))
    answer = conn.recv(timeout=10)
    assert isinstance(answer, transport.ErrorFrame)
    assert answer.code == transport.ERR_ARCH_MISMATCH
    conn.close()
    t.join(timeout=30)


def _swallow(server):
    try:
        server.run()
    except Exception:
        pass


def test_server_times_out_on_silent_client():
    config = FedConfig(n_clients=1, rounds=1, local_epochs=1,
                       learning_rate=1e-3, batch_size=32, seed=1,
                       transport="tcp", timeout_s=2.0)
    server = FedAvgServer(config, arch=ARCH)
    failure = {}

    def serve():
        try:
            server.run()
        except federation.FederationTimeoutError as exc:
            failure["exc"] = exc

    t = threading.Thread(target=serve)
    t.start()
    conn = transport.connect(server.host, server.port)
    conn.send(transport.Hello(1, ARCH.arch_hash()))
    conn.recv(timeout=10)  # CONFIG
    conn.recv(timeout=10)  # GLOBAL 0, then stay silent
    answer = conn.recv(timeout=20)
    assert isinstance(answer, transport.ErrorFrame)
    assert answer.code == transport.ERR_TIMEOUT
    conn.close()
    t.join(timeout=30)
    assert "exc" in failure
