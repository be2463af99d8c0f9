import hashlib
import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import SocketSession, toy_shards
from fedcausal.federation import (
    Message, ParameterVector, ProtocolError, RoundAborted, Session, TrainConfig, aggregate,
    central_train, register, run_training,
)
from fedcausal.federation import dedup, messages, transport
from fedcausal.federation.params import pack_array, unpack_array
from fedcausal.federation.selftest import QuadraticProblem

CENTERS = {"1": [1.0, 0.0, 2.0], "2": [3.0, -2.0, 0.0], "3": [-1.0, 5.0, 1.0]}


@register
class ExplodingProblem(QuadraticProblem):
    """Quadratic toy whose source 2 returns a NaN objective once theta leaves the origin."""

    name = "exploding"

    def local_objective(self, params, state, shared, round_seed):
        v, g = super().local_objective(params, state, shared, round_seed)
        if state.source_id == 2 and abs(params["theta"]).sum() > 0:
            return float("nan"), g
        return v, g


# ---------------------------------------------------------------------------
# parameter vectors and payloads


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_pack_round_trip_is_exact(a):
    back = unpack_array(pack_array(a), a.shape)
    assert back.tobytes() == a.astype(np.float64).tobytes()


def test_pack_rejects_non_finite_and_bad_length():
    with pytest.raises(ValueError):
        pack_array([1.0, np.nan])
    with pytest.raises(ValueError):
        unpack_array(pack_array([1.0, 2.0]), (3,))


def test_parameter_vector_layout():
    p = ParameterVector().add("a", np.zeros((2, 2))).add("b", [1.0, 2.0], part="source:1")
    assert p.size == 6 and p.names() == ["a", "b"] and p.part("b") == "source:1"
    q = p.with_flat(np.arange(6.0))
    np.testing.assert_array_equal(q["a"], [[0, 1], [2, 3]])
    back = ParameterVector.from_segments(q.to_segments())
    assert back.same_layout(q) and back.flat().tobytes() == q.flat().tobytes()
    with pytest.raises(ValueError):
        p.add("a", [0.0])
    with pytest.raises(ValueError):
        p["a"] = np.zeros(3)
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(5))


# ---------------------------------------------------------------------------
# messages


def test_no_message_kind_can_carry_record_fields():
    for kind, allowed in messages.REGISTRY.items():
        assert not allowed & messages.RECORD_FIELDS, kind
    with pytest.raises(ProtocolError):
        Message("GRAD", {"x": [1, 2]})
    with pytest.raises(ProtocolError):
        Message("NOPE")


def test_encode_decode_and_malformed():
    msg = Message("HELLO", {"source_id": 3, "version": 1})
    assert messages.decode(messages.encode(msg)) == msg
    for bad in (b"\xff\xfe", b"[1, 2]", b"{\"a\": 1}"):
        with pytest.raises(ProtocolError):
            messages.decode(bad)
    with pytest.raises(ProtocolError):
        messages.expect(Message("ERROR", {"source_id": 1, "reason": "boom"}), "GRAD")


# ---------------------------------------------------------------------------
# aggregation


def _grad(sid, vec, rnd=0, shape=None):
    vec = np.asarray(vec, dtype=np.float64)
    return Message("GRAD", {"round": rnd, "source_id": sid, "objective": 1.0,
                            "segments": {"theta": {"shape": list(shape or vec.shape), "data": pack_array(vec)}}})


def test_aggregate_sums_in_source_order():
    layout = ParameterVector().add("theta", np.zeros(2))
    total, obj = aggregate([_grad(2, [1.0, 2.0]), _grad(1, [0.5, -1.0])], layout)
    np.testing.assert_array_equal(total["theta"], [1.5, 1.0])
    assert obj == 2.0


@pytest.mark.parametrize("msgs", [
    [],
    [_grad(1, [1.0, 2.0]), _grad(2, [1.0, 2.0], rnd=1)],
    [_grad(1, [1.0, 2.0]), _grad(1, [1.0, 2.0])],
    [_grad(1, [1.0, 2.0, 3.0])],
    [_grad(1, [1.0, 2.0, 3.0], shape=[2])],
])
def test_aggregate_rejects_bad_rounds(msgs):
    with pytest.raises(ProtocolError):
        aggregate(msgs, ParameterVector().add("theta", np.zeros(2)))


# ---------------------------------------------------------------------------
# training runtime


def test_quadratic_converges_to_mean_center():
    shards = toy_shards()
    cfg = TrainConfig(max_rounds=300, learning_rate=0.1, tolerance=0.0)
    res = run_training(QuadraticProblem(centers=CENTERS), shards, cfg)
    np.testing.assert_allclose(res.params["theta"], np.mean(list(CENTERS.values()), axis=0), atol=1e-6)


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_central_and_federated_trajectories_agree(opt):
    shards = toy_shards()
    cfg = TrainConfig(max_rounds=20, learning_rate=0.05, optimizer=opt, tolerance=0.0)
    problem = QuadraticProblem(centers=CENTERS)
    fed = run_training(problem, shards, cfg)
    cen = central_train(problem, shards, cfg)
    for a, b in zip(fed.trajectory, cen.trajectory):
        assert a.tobytes() == b.tobytes()


def test_socket_transport_is_bitwise_identical():
    shards = toy_shards()
    cfg = TrainConfig(max_rounds=15, learning_rate=0.1, optimizer="adam")
    problem = QuadraticProblem(centers=CENTERS)
    ref = run_training(problem, shards, cfg)
    with SocketSession(shards, keep_trace=True) as session:
        res = session.train(problem, cfg)
        frames = [body for ch in session.channels.values() for _, body in ch.trace]
    assert [a.tobytes() for a in ref.trajectory] == [a.tobytes() for a in res.trajectory]
    assert frames  # the trace captured real traffic


def test_tolerance_stops_early():
    cfg = TrainConfig(max_rounds=10_000, learning_rate=0.5, tolerance=1e-9)
    res = run_training(QuadraticProblem(centers=CENTERS), toy_shards(), cfg)
    assert res.stopped == "tolerance" and len(res.log) < 10_000


def test_worker_failure_aborts_round():
    with pytest.raises(RoundAborted, match="source 2"):
        run_training(ExplodingProblem(centers=CENTERS), toy_shards(), TrainConfig(max_rounds=5, learning_rate=0.1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_rounds=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_params_before_setup_is_an_error():
    session = Session.inproc(toy_shards(1))
    ch = session.channels[1]
    ch.send(Message("PARAMS", {"round": 0, "seed": 0, "segments": {}}))
    reply = ch.recv()
    assert reply.kind == "ERROR" and "SETUP" in reply["reason"]


# ---------------------------------------------------------------------------
# socket handshake


def _hello(port, sid, version=1):
    s = socket.create_connection(("127.0.0.1", port))
    transport.send_frame(s, messages.encode(Message("HELLO", {"source_id": sid, "version": version})))
    return s, messages.decode(transport.recv_frame(s))


def test_handshake_refuses_duplicates_and_version_mismatch():
    srv = transport.listen()
    port = srv.getsockname()[1]
    replies = {}

    def clients():
        replies["bad_version"] = _hello(port, 1, version=99)[1].kind
        replies["unexpected"] = _hello(port, 7)[1].kind
        replies["first"] = _hello(port, 1)
        replies["dup"] = _hello(port, 1)[1].kind
        replies["second"] = _hello(port, 2)

    t = threading.Thread(target=clients)
    t.start()
    chans = transport.accept_workers(srv, [1, 2], timeout=10)
    t.join()
    srv.close()
    assert replies["bad_version"] == "REFUSE" and replies["unexpected"] == "REFUSE"
    assert replies["first"][1].kind == "WELCOME" and replies["second"][1].kind == "WELCOME"
    assert sorted(chans) == [1, 2]
    for ch in chans.values():
        ch.close()
    replies["first"][0].close()
    replies["second"][0].close()


def test_accept_times_out_without_workers():
    srv = transport.listen()
    with pytest.raises(transport.WorkerTimeout):
        transport.accept_workers(srv, [1], timeout=0.2)
    srv.close()


def test_worker_connect_fails_without_coordinator():
    srv = transport.listen()
    port = srv.getsockname()[1]
    srv.close()
    with pytest.raises(ProtocolError):
        transport.connect("127.0.0.1", port, 1, retries=2)


def test_silent_worker_times_out():
    a, b = socket.socketpair()
    ch = transport.SocketChannel(1, a)
    with pytest.raises(transport.WorkerTimeout):
        ch.recv(timeout=0.1)
    b.close()
    with pytest.raises(ProtocolError):
        ch.recv(timeout=0.1)
    ch.close()


def test_oversized_frame_rejected():
    a, b = socket.socketpair()
    b.sendall((transport.MAX_FRAME + 1).to_bytes(4, "big"))
    with pytest.raises(ProtocolError):
        transport.recv_frame(a)
    a.close()
    b.close()


# ---------------------------------------------------------------------------
# duplicate removal


def test_digest_is_salted_sha256():
    assert dedup.digest("abc", "s") == hashlib.sha256(b"sabc").digest()
    assert dedup.digest("abc", "s") != dedup.digest("abc", "t")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sets(st.integers(0, 30), max_size=15), min_size=1, max_size=5), st.integers(1, 3),
       st.integers(0, 100))
def test_plan_drops_keeps_exactly_limit(key_sets, keep, seed):
    salt = "x"
    by_source = {s + 1: [dedup.digest(str(k), salt) for k in sorted(ks)] for s, ks in enumerate(key_sets)}
    drops = dedup.plan_drops(by_source, keep_limit=keep, seed=seed)
    remaining = {}
    for sid, ds in by_source.items():
        dropped = set(drops.get(sid, []))
        for i, d in enumerate(ds):
            if i not in dropped:
                remaining[d] = remaining.get(d, 0) + 1
    held = {}
    for ds in by_source.values():
        for d in ds:
            held[d] = held.get(d, 0) + 1
    for d, count in held.items():
        assert remaining[d] == min(count, keep)


def test_plan_drops_rejects_bad_input():
    with pytest.raises(ValueError):
        dedup.plan_drops({1: []}, keep_limit=0)
    with pytest.raises(ProtocolError):
        dedup.plan_drops({1: [b"short"]})


def test_session_dedup_updates_shards():
    shards = toy_shards(2, 5)
    from fedcausal.dataset import SourceDataset
    keyed = {s: SourceDataset(s, d.w, d.y, d.x, pk=[f"p{i}" for i in range(5)]) for s, d in shards.items()}
    session = Session.inproc(keyed)
    drops = session.dedup(keep_limit=1, seed=0)
    sizes = [ch.worker.state.train.n for ch in session.channels.values()]
    assert sum(len(v) for v in drops.values()) == 5 and sum(sizes) == 5
    session.stop()
    missing = Session.inproc(shards)
    with pytest.raises(RoundAborted, match="primary-key"):
        missing.dedup()
