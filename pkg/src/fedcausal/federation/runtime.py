"""Synchronous federated training: broadcast parameters, collect one gradient
per source, sum, update, repeat.

The :class:`Session` drives a set of channels (in-process or socket). The
:class:`Worker` answers protocol messages for one private shard.
"""

import base64
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dedup
from .messages import Message, ProtocolError, expect
from .params import ParameterVector, pack_array, unpack_array
from .problem import LocalState, make_problem, round_seed
from .transport import InProcChannel

log = logging.getLogger(__name__)


class RoundAborted(ProtocolError):
    pass


class NumericalFailure(RoundAborted, ArithmeticError):
    """A worker hit a non-finite objective, gradient or query result."""


def _all_finite(v):
    if isinstance(v, dict):
        return all(_all_finite(x) for x in v.values())
    if isinstance(v, (list, tuple)):
        return all(_all_finite(x) for x in v)
    if isinstance(v, float):
        return np.isfinite(v)
    return True


@dataclass
class TrainConfig:
    max_rounds: int = 500
    learning_rate: float = 0.01
    tolerance: float = 1e-6
    window: int = 5
    optimizer: str = "sgd"  # "sgd" or "adam"
    master_seed: int = 0
    timeout: float = 120.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Sgd:
    def __init__(self, cfg, sign):
        self.lr = cfg.learning_rate
        self.sign = sign

    def step(self, theta, grad):
        return theta + self.sign * self.lr * grad


class Adam:
    def __init__(self, cfg, sign):
        self.cfg = cfg
        self.sign = sign
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad):
        c = self.cfg
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mh = self.m / (1 - c.beta1**self.t)
        vh = self.v / (1 - c.beta2**self.t)
        return theta + self.sign * c.learning_rate * mh / (np.sqrt(vh) + c.eps)


def make_optimizer(cfg, maximize):
    sign = 1.0 if maximize else -1.0
    return Adam(cfg, sign) if cfg.optimizer == "adam" else Sgd(cfg, sign)


@dataclass
class RoundLog:
    round: int
    objective: float
    grad_norm: float


@dataclass
class TrainResult:
    params: ParameterVector
    log: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    stopped: str = "max_rounds"
    shared: dict = None

    def objectives(self):
        return np.array([r.objective for r in self.log])


def aggregate(messages, layout):
    """Exact per-segment sum of GRAD messages, added in ascending source order."""
    if not messages:
        raise ProtocolError("no gradients to aggregate")
    rounds = {m["round"] for m in messages}
    if len(rounds) != 1:
        raise ProtocolError(f"gradients from different rounds {sorted(rounds)}")
    ids = [m["source_id"] for m in messages]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate source id in one round")
    total = layout.zeros_like()
    objective = 0.0
    for m in sorted(messages, key=lambda m: m["source_id"]):
        segs = m["segments"]
        if set(segs) != set(layout.names()):
            raise ProtocolError(f"source {m['source_id']}: segment names do not match")
        for name in layout.names():
            if list(segs[name]["shape"]) != list(layout[name].shape):
                raise ProtocolError(f"source {m['source_id']}: shape mismatch in {name!r}")
            try:
                g = unpack_array(segs[name]["data"], layout[name].shape)
            except (ValueError, KeyError, TypeError) as exc:
                raise ProtocolError(f"source {m['source_id']}: bad payload in {name!r}: {exc}") from None
            total[name] = total[name] + g
        objective += float(m["objective"])
    return total, objective


def _grad_segments(grads, params):
    return {
        k: {"shape": list(params[k].shape), "data": pack_array(grads[k])}
        for k in params.names()
    }


def _converged(objs, cfg):
    if len(objs) <= cfg.window:
        return False
    recent = np.abs(np.diff(objs[-(cfg.window + 1):]))
    return bool(np.all(recent < cfg.tolerance))


class Worker:
    """Protocol endpoint for one source. Holds the private shard and answers messages."""

    def __init__(self, source_id, train, eval=None):
        self.source_id = int(source_id)
        self.state = LocalState(self.source_id, train, eval)
        self.problem = None
        self.shared = None
        self._layout = None

    def handle(self, msg):
        try:
            return self._handle(msg)
        except ArithmeticError as exc:
            return Message("ERROR", {"source_id": self.source_id, "reason": str(exc), "numerical": True})
        except (ProtocolError, ValueError) as exc:
            return Message("ERROR", {"source_id": self.source_id, "reason": str(exc)})

    def _problem(self, spec):
        if self.problem is None or self.problem.spec() != spec:
            self.problem = make_problem(spec)
        return self.problem

    def _handle(self, msg):
        k = msg.kind
        if k == "STATS_REQUEST":
            prob = self._problem(msg["problem"])
            return Message("STATS", {"source_id": self.source_id, "stats": prob.local_stats(self.state)})
        if k == "SETUP":
            self._problem(msg["problem"])
            self.shared = msg["shared"]
            self._layout = None
            return Message("READY", {"source_id": self.source_id})
        if k == "PARAMS":
            if self.problem is None or self.shared is None:
                raise ProtocolError("PARAMS before SETUP")
            params = ParameterVector.from_segments(msg["segments"])
            if self._layout is None:
                self._layout = params.shapes()
            elif params.shapes() != self._layout:
                raise ProtocolError("parameter layout changed between rounds")
            value, grads = self.problem.local_objective(params, self.state, self.shared, msg["seed"])
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite local objective in round {msg['round']}")
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise FloatingPointError(f"non-finite local gradient in round {msg['round']}")
            return Message(
                "GRAD",
                {"round": msg["round"], "source_id": self.source_id,
                 "segments": _grad_segments(grads, params), "objective": float(value)},
            )
        if k == "QUERY":
            prob = self._problem(msg["problem"])
            params = ParameterVector.from_segments(msg["segments"]) if msg.get("segments") else None
            values = prob.query(msg["query"], params, self.state, self.shared, msg.get("seed"), msg.get("options") or {})
            if not _all_finite(values):
                raise FloatingPointError(f"non-finite result for query {msg['query']!r}")
            return Message("RESULT", {"source_id": self.source_id, "query": msg["query"], "values": values})
        if k == "DEDUP_REQUEST":
            keys = self.state.train.pk
            if keys is None:
                raise ProtocolError("source has no primary-key column")
            digests = [dedup.digest(key, msg["salt"]).hex() for key in keys]
            return Message("DEDUP_DIGESTS", {"source_id": self.source_id, "digests": digests})
        if k == "DEDUP_DROPS":
            drop = set(int(i) for i in msg["drops"])
            keep = [i for i in range(len(self.state.train)) if i not in drop]
            self.state.train = self.state.train.subset(keep)
            self.state.store["dedup_dropped"] = sorted(drop)
            return Message("ACK", {"source_id": self.source_id})
        if k == "STOP":
            return None
        raise ProtocolError(f"worker cannot handle {k}")


class Session:
    """Coordinator view over one channel per source, iterated in ascending source id."""

    def __init__(self, channels, timeout=120.0):
        self.channels = dict(sorted(channels.items()))
        self.timeout = timeout

    @classmethod
    def inproc(cls, datasets, evals=None, keep_trace=False):
        evals = evals or {}
        chans = {
            int(sid): InProcChannel(Worker(sid, ds, evals.get(sid)), keep_trace=keep_trace)
            for sid, ds in datasets.items()
        }
        return cls(chans)

    @property
    def source_ids(self):
        return list(self.channels)

    def _broadcast(self, msg):
        for ch in self.channels.values():
            ch.send(msg)

    def _gather(self, kind):
        out = []
        for sid, ch in self.channels.items():
            try:
                reply = ch.recv(self.timeout)
            except ProtocolError as exc:
                raise RoundAborted(f"source {sid}: {exc}") from None
            if reply.kind == "ERROR":
                cls = NumericalFailure if reply.get("numerical") else RoundAborted
                raise cls(f"source {sid}: {reply.get('reason')}")
            expect(reply, kind)
            if reply.get("source_id", sid) != sid:
                raise ProtocolError(f"reply from source {reply.get('source_id')} on the channel of {sid}")
            out.append(reply)
        return out

    def setup(self, problem, seed=0):
        spec = problem.spec()
        self._broadcast(Message("STATS_REQUEST", {"problem": spec}))
        stats = {m["source_id"]: m["stats"] for m in self._gather("STATS")}
        shared = problem.build_shared(stats, seed)
        self._broadcast(Message("SETUP", {"problem": spec, "shared": shared}))
        self._gather("READY")
        return shared

    def train(self, problem, cfg, params=None, shared=None, on_round=None):
        if shared is None:
            shared = self.setup(problem, cfg.master_seed)
        if params is None:
            params = problem.init_params(shared, cfg.master_seed)
        opt = make_optimizer(cfg, problem.maximize)
        res = TrainResult(params.copy(), shared=shared)
        objs = []
        for rnd in range(cfg.max_rounds):
            seed = round_seed(cfg.master_seed, rnd)
            self._broadcast(Message("PARAMS", {"round": rnd, "seed": seed, "segments": res.params.to_segments()}))
            msgs = self._gather("GRAD")
            grad, objective = aggregate(msgs, res.params)
            gflat = grad.flat()
            res.params = res.params.with_flat(opt.step(res.params.flat(), gflat))
            res.log.append(RoundLog(rnd, objective, float(np.linalg.norm(gflat))))
            res.trajectory.append(res.params.flat())
            objs.append(objective)
            if on_round is not None:
                on_round(rnd, objective, res.params)
            if _converged(objs, cfg):
                res.stopped = "tolerance"
                break
        return res

    def query(self, problem, kind, params=None, seed=0, options=None):
        fields = {"problem": problem.spec(), "query": kind, "seed": int(seed), "options": options or {}}
        if params is not None:
            fields["segments"] = params.to_segments()
        self._broadcast(Message("QUERY", fields))
        return {m["source_id"]: m["values"] for m in self._gather("RESULT")}

    def dedup(self, keep_limit=1, seed=0, salt=None):
        salt = salt or dedup.public_salt(seed)
        self._broadcast(Message("DEDUP_REQUEST", {"salt": salt}))
        digests = {m["source_id"]: m["digests"] for m in self._gather("DEDUP_DIGESTS")}
        drops = dedup.plan_drops(
            {sid: [bytes.fromhex(h) for h in d] for sid, d in digests.items()}, keep_limit, seed
        )
        for sid, ch in self.channels.items():
            ch.send(Message("DEDUP_DROPS", {"drops": drops.get(sid, [])}))
        self._gather("ACK")
        return drops

    def stop(self):
        for ch in self.channels.values():
            try:
                ch.send(Message("STOP", {}))
            except (ProtocolError, OSError):
                pass
            ch.close()


def run_training(problem, datasets, cfg, evals=None, params=None, session=None):
    """Train ``problem`` on ``{source_id: SourceDataset}`` with the in-process transport
    unless a session is given."""
    own = session is None
    session = session or Session.inproc(datasets, evals)
    try:
        return session.train(problem, cfg, params=params)
    finally:
        if own:
            session.stop()


def central_train(problem, datasets, cfg, evals=None, params=None):
    """Reference optimizer on pooled data: no messages, one objective evaluation per round."""
    states = {int(k): LocalState(int(k), v, (evals or {}).get(k)) for k, v in sorted(datasets.items())}
    stats = {sid: problem.local_stats(st) for sid, st in states.items()}
    shared = problem.build_shared(stats, cfg.master_seed)
    params = params if params is not None else problem.init_params(shared, cfg.master_seed)
    opt = make_optimizer(cfg, problem.maximize)
    res = TrainResult(params.copy(), shared=shared)
    objs = []
    for rnd in range(cfg.max_rounds):
        seed = round_seed(cfg.master_seed, rnd)
        value, grads = problem.pooled_objective(res.params, states, shared, seed)
        gflat = np.concatenate([np.asarray(grads[k], dtype=np.float64).ravel() for k in res.params.names()])
        res.params = res.params.with_flat(opt.step(res.params.flat(), gflat))
        res.log.append(RoundLog(rnd, float(value), float(np.linalg.norm(gflat))))
        res.trajectory.append(res.params.flat())
        objs.append(float(value))
        if _converged(objs, cfg):
            res.stopped = "tolerance"
            break
    return res


def b64(buf):
    return base64.b64encode(buf).decode("ascii")


def unb64(s):
    return base64.b64decode(s.encode("ascii"))


def serve(sock, worker):
    """Worker loop over a connected socket: answer frames until STOP or disconnect."""
    from .messages import decode, encode
    from .transport import recv_frame, send_frame

    while True:
        try:
            msg = decode(recv_frame(sock))
        except (ConnectionError, OSError):
            return
        reply = worker.handle(msg)
        if msg.kind == "STOP":
            sock.close()
            return
        if reply is not None:
            send_frame(sock, encode(reply))
