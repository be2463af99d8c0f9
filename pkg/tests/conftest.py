"""Shared fixtures and helpers: toy shards, gradient checks and a threaded socket session."""

import json
import sys
import threading

import numpy as np
import pytest
import torch

from fedcausal.dataset import SourceDataset
from fedcausal.federation import LocalState, Session, Worker
from fedcausal.federation import transport
from fedcausal.federation.runtime import serve

torch.set_num_threads(1)


def toy_source(sid, n=20, dx=3, rng=None, binary_x=False, u=None, r=None):
    rng = rng if rng is not None else np.random.default_rng(sid)
    if binary_x:
        x = (rng.uniform(size=(n, dx)) < 0.5).astype(float)
    else:
        x = rng.uniform(-1.0, 1.0, (n, dx))
    w = rng.integers(0, 2, n)
    w[0], w[-1] = 0, 1
    y = x.sum(1) + 2.0 * w + rng.normal(size=n)
    return SourceDataset(sid, w, y, x, u, r)


def toy_shards(m=3, n=20, dx=3, seed=0, binary_x=False):
    rng = np.random.default_rng(seed)
    return {s: toy_source(s, n, dx, rng, binary_x) for s in range(1, m + 1)}


def shared_for(problem, states, seed=0):
    """Build the broadcast dictionary and round-trip it through JSON like the wire does."""
    stats = {sid: problem.local_stats(st) for sid, st in states.items()}
    return json.loads(json.dumps(problem.build_shared(stats, seed)))


def jitter(params, scale, seed=0):
    rng = np.random.default_rng(seed)
    return params.with_flat(params.flat() + scale * rng.normal(size=params.size))


def decomposition_gap(problem, params, states, shared, seed):
    """Max abs difference between summed per-source and pooled objective/gradients."""
    total, summed = 0.0, None
    for sid in sorted(states):
        v, g = problem.local_objective(params, states[sid], shared, seed)
        total += v
        summed = g if summed is None else {k: summed[k] + g[k] for k in summed}
    pooled_v, pooled_g = problem.pooled_objective(params, states, shared, seed)
    grad_gap = max(float(np.max(np.abs(np.asarray(summed[k]) - np.asarray(pooled_g[k])))) for k in summed)
    return abs(total - pooled_v), grad_gap


def finite_difference_error(problem, params, state, shared, seed=5, step=1e-5, stride=1, floor=1e-6):
    """Worst relative error of analytic vs central-difference gradient coordinates."""
    _, grads = problem.local_objective(params, state, shared, seed)
    analytic = np.concatenate([np.asarray(grads[k], dtype=np.float64).ravel() for k in params.names()])
    flat = params.flat()
    worst = 0.0
    for i in range(0, flat.size, stride):
        e = np.zeros_like(flat)
        e[i] = step
        hi = problem.local_objective(params.with_flat(flat + e), state, shared, seed)[0]
        lo = problem.local_objective(params.with_flat(flat - e), state, shared, seed)[0]
        numeric = (hi - lo) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor))
    return worst


def states_of(datasets):
    return {sid: LocalState(sid, ds) for sid, ds in datasets.items()}


class SocketSession:
    """Coordinator over loopback TCP with one worker thread per shard."""

    def __init__(self, datasets, evals=None, keep_trace=False, timeout=60.0):
        evals = evals or {}
        srv = transport.listen("127.0.0.1", 0)
        port = srv.getsockname()[1]
        self.threads = []
        for sid, ds in sorted(datasets.items()):
            worker = Worker(sid, ds, evals.get(sid))
            t = threading.Thread(target=self._work, args=(port, sid, worker), daemon=True)
            t.start()
            self.threads.append(t)
        chans = transport.accept_workers(srv, sorted(datasets), timeout=timeout, keep_trace=keep_trace)
        srv.close()
        self.session = Session(chans, timeout)

    @staticmethod
    def _work(port, sid, worker):
        sock = transport.connect("127.0.0.1", port, sid)
        serve(sock, worker)

    def __enter__(self):
        return self.session

    def __exit__(self, *exc):
        self.session.stop()
        for t in self.threads:
            t.join(timeout=10)


@pytest.fixture
def shards():
    return toy_shards()


def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts are printed inside captured tests, so repeat them where they are always visible
    lines = getattr(sys.modules.get("test_acceptance"), "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
