import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitlearn import model as M
from splitlearn import protocol as P
from splitlearn.client import SplitClient
from splitlearn.protocol import ErrorCode, Frame, FrameType
from splitlearn.server import CloudServer, ServerError, average_extractors
from splitlearn.tensor import ShapeError
from splitlearn.transport import inprocess_pair

from runner import make_configs, run


def _server(depth, clients=1, **kw):
    return CloudServer(M.reference_model(1, 28, 4), depth, 0.05, 0, clients, **kw)


def test_depth3_cloud_is_identity(rng):
    srv = _server(3)
    feats = rng.standard_normal((2, 64, 7, 7)).astype(np.float32)
    np.testing.assert_array_equal(srv.handle_feature_batch(1, 0, feats), feats)
    g = rng.standard_normal(feats.shape).astype(np.float32)
    np.testing.assert_array_equal(srv.handle_gradient_batch(1, 0, g), g)


def test_depth1_zero_input_matches_local_run():
    srv = _server(1)
    model = M.reference_model(1, 28, 4)
    full = M.init_model_params(model, 0)
    zeros = np.zeros((2, 16, 14, 14), np.float32)
    expected, _ = M.forward(model, full, zeros, range(3, 8))
    np.testing.assert_array_equal(srv.handle_feature_batch(1, 0, zeros), expected)
    assert not expected.any()   # zero biases keep the zero input at zero


def test_gradient_without_forward_is_rejected(rng):
    srv = _server(2)
    feats = rng.standard_normal((2, 32, 7, 7)).astype(np.float32)
    out = srv.handle_feature_batch(1, 5, feats)
    with pytest.raises(ServerError) as dup:
        srv.handle_feature_batch(1, 5, feats)
    assert dup.value.code == ErrorCode.BAD_STATE
    srv.handle_gradient_batch(1, 5, np.ones_like(out))
    with pytest.raises(ServerError) as replay:
        srv.handle_gradient_batch(1, 5, np.ones_like(out))
    assert replay.value.code == ErrorCode.NO_CACHE
    assert srv.pending == 0


def test_zero_gradient_leaves_params_unchanged(rng):
    srv = _server(1)
    before = {k: v.copy() for k, v in srv.params.items()}
    out = srv.handle_feature_batch(1, 0, rng.standard_normal((2, 16, 14, 14)).astype(np.float32))
    grad_in = srv.handle_gradient_batch(1, 0, np.zeros_like(out))
    assert not grad_in.any()
    assert all(np.array_equal(before[k], srv.params[k]) for k in before)


def test_feature_shape_mismatch_is_rejected():
    srv = _server(2)
    with pytest.raises(ServerError) as info:
        srv.handle_feature_batch(1, 0, np.zeros((2, 16, 14, 14), np.float32))
    assert info.value.code == ErrorCode.SHAPE_MISMATCH


def test_shape_mismatch_over_the_wire_gets_error_frame_and_close():
    srv = _server(2, barrier_timeout=5)
    client, server_end = inprocess_pair(5)
    t = threading.Thread(target=srv.serve_connection, args=(server_end,))
    t.start()
    client.send(Frame(FrameType.TRAIN_REQUEST, 1, 0))
    client.expect(FrameType.TRAIN_REQUEST)
    client.send(P.tensor_frame(FrameType.FEATURE_BATCH, np.zeros((1, 3, 3), np.float32), 1, 0, 0))
    with pytest.raises(P.RemoteError) as info:
        client.expect(FrameType.FEATURE_BATCH)
    assert info.value.code == ErrorCode.SHAPE_MISMATCH
    with pytest.raises(P.ConnectionClosed):
        client.recv()
    t.join(5)
    client.close()


def test_corrupt_frame_gets_crc_error():
    srv = _server(2, barrier_timeout=5)
    client, server_end = inprocess_pair(5)
    t = threading.Thread(target=srv.serve_connection, args=(server_end,))
    t.start()
    raw = bytearray(P.encode(Frame(FrameType.TRAIN_REQUEST, 1, 0, 0, b"abc")))
    raw[26] ^= 1
    client.sock.sendall(bytes(raw))
    with pytest.raises(P.RemoteError) as info:
        client.expect(FrameType.TRAIN_REQUEST)
    assert info.value.code == ErrorCode.CRC_MISMATCH
    t.join(5)
    client.close()


# averaging

def test_average_identical_uploads_is_idempotent(rng):
    w = {"0.weight": rng.standard_normal((4, 3)).astype(np.float32), "0.bias": rng.random(4, dtype=np.float32)}
    avg = average_extractors({1: w, 2: w, 3: w})
    assert all(avg[k].tobytes() == w[k].tobytes() for k in w)


def test_average_of_opposites_is_zero(rng):
    w = {"0.weight": rng.standard_normal((5, 2)).astype(np.float32)}
    neg = {"0.weight": -w["0.weight"]}
    assert not average_extractors({1: w, 2: neg})["0.weight"].any()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_average_equals_independent_mean(n_clients, seed):
    rng = np.random.default_rng(seed)
    ids = rng.choice(1000, n_clients, replace=False)
    uploads = {int(c): {"a": rng.standard_normal((3, 2)).astype(np.float32),
                        "b": rng.standard_normal(4).astype(np.float32)} for c in ids}
    avg = average_extractors(uploads)
    for name in ("a", "b"):
        total = np.zeros_like(uploads[int(ids[0])][name], dtype=np.float64)
        for c in sorted(int(c) for c in ids):
            total = total + uploads[c][name].astype(np.float64)
        assert avg[name].tobytes() == (total / n_clients).astype(np.float32).tobytes()
    same = average_extractors({c: uploads[int(ids[0])] for c in range(1, n_clients + 1)})
    assert all(same[k].tobytes() == uploads[int(ids[0])][k].tobytes() for k in same)


def test_average_rejects_mismatched_uploads():
    with pytest.raises(ShapeError):
        average_extractors({1: {"a": np.zeros(2, np.float32)}, 2: {"a": np.zeros(3, np.float32)}})
    with pytest.raises(ShapeError):
        average_extractors({1: {"a": np.zeros(2, np.float32)}, 2: {"b": np.zeros(2, np.float32)}})


# multi-client runs

def test_three_clients_share_one_extractor_after_each_barrier(tmp_path):
    configs = make_configs(3, epochs=2, max_batches=3)
    reports, server, errors = run(configs, run_log=tmp_path / "run.log")
    assert not errors and server.failure is None
    plan = M.split(configs[1].build_model(), 2)
    sums = {M.checksum(M.select(r.params, plan.extractor)) for r in reports.values()}
    assert len(sums) == 1
    assert server.pending == 0
    # round-robin: ascending client id, batch by batch
    assert server.order[:6] == [(0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 1, 1), (0, 1, 2), (0, 1, 3)]
    lines = (tmp_path / "run.log").read_text().splitlines()
    assert len(lines) == len(server.order) == 2 * 3 * 3


def test_round_robin_is_deterministic():
    a, sa, _ = run(make_configs(3, epochs=1, max_batches=4))
    b, sb, _ = run(make_configs(3, epochs=1, max_batches=4))
    assert sa.trace == sb.trace
    assert all(a[c].metrics_csv() == b[c].metrics_csv() for c in a)


def test_arrival_order_replays_exactly_under_script():
    arrival, sa, err = run(make_configs(3, epochs=2, max_batches=4), schedule="arrival")
    assert not err
    script = [cid for _, _, cid in sa.order]
    replay, sb, err = run(make_configs(3, epochs=2, max_batches=4), schedule="script", script=script)
    assert not err
    assert sb.order == sa.order and sb.trace == sa.trace
    assert all(arrival[c].metrics_csv() == replay[c].metrics_csv() for c in arrival)


def test_disconnect_mid_epoch_aborts_everyone():
    configs = make_configs(2, epochs=1)
    model = configs[1].build_model()
    srv = CloudServer(model, 2, 0.05, 0, 2, barrier_timeout=10)
    quitter, q_end = inprocess_pair(10)
    stayer_conn, s_end = inprocess_pair(10)
    threads = [threading.Thread(target=srv.serve_connection, args=(e,), daemon=True) for e in (q_end, s_end)]
    for t in threads:
        t.start()
    result = {}

    def stay():
        try:
            SplitClient(configs[2], stayer_conn).run()
        except Exception as exc:
            result["err"] = exc
    st_thread = threading.Thread(target=stay)
    st_thread.start()
    quitter.send(Frame(FrameType.TRAIN_REQUEST, 1, 0, 0, M.checksum(M.select(M.init_model_params(model, 0),
                                                                          range(0, 6))).encode()))
    quitter.expect(FrameType.TRAIN_REQUEST)
    quitter.close()
    st_thread.join(20)
    assert not st_thread.is_alive()
    assert "err" in result and srv.failure is not None


def test_mismatched_start_checksums_abort():
    configs = make_configs(2, epochs=1)
    srv = CloudServer(configs[1].build_model(), 2, 0.05, 0, 2, barrier_timeout=5)
    ends = [inprocess_pair(5) for _ in range(2)]
    for _, s in ends:
        threading.Thread(target=srv.serve_connection, args=(s,), daemon=True).start()
    for cid, (c, _) in enumerate(ends, 1):
        c.send(Frame(FrameType.TRAIN_REQUEST, cid, 0, 0, f"digest{cid}".encode()))
    for c, _ in ends:
        with pytest.raises(P.RemoteError) as info:
            c.expect(FrameType.TRAIN_REQUEST)
        assert info.value.code == ErrorCode.BARRIER
        c.close()
