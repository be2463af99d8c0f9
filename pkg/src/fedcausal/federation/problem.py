"""Estimator adapters plugged into the federated runtime.

A problem describes one trainable objective. Instances are rebuilt on every
worker from a JSON spec ``{"name": ..., "config": {...}}`` so the coordinator
never ships code or data, only configuration and shared summaries.
"""

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterVector

_REGISTRY = {}


def register(cls):
    _REGISTRY[cls.name] = cls
    return cls


def make_problem(spec):
    # importing the estimator modules fills the registry
    from .. import causalfi, causalrff, fedci  # noqa: F401
    from . import selftest  # noqa: F401

    name = spec["name"]
    if name not in _REGISTRY:
        raise KeyError(f"unknown problem {name!r}")
    return _REGISTRY[name](**spec.get("config", {}))


@dataclass
class LocalState:
    """What a worker holds privately: its training shard, optional evaluation rows, scratch store."""

    source_id: int
    train: object
    eval: object = None
    store: dict = field(default_factory=dict)


class Problem:
    """Interface every federated objective implements.

    ``maximize`` selects the update sign: ascent for ELBO-type objectives,
    descent for losses.
    """

    name = "base"
    maximize = True

    def __init__(self, **config):
        self.config = config

    def spec(self):
        return {"name": self.name, "config": self.config}

    def local_stats(self, state):
        """Summary statistics a source is willing to share before training."""
        return {"n": int(len(state.train))}

    def build_shared(self, stats, seed):
        """Coordinator-side: combine per-source stats into broadcast constants."""
        return {"source_ids": sorted(int(k) for k in stats), "stats": {str(k): v for k, v in stats.items()}}

    def init_params(self, shared, seed):
        raise NotImplementedError

    def local_objective(self, params, state, shared, round_seed):
        """Return ``(J^s, {segment: dJ^s/dsegment})`` for one source."""
        raise NotImplementedError

    def pooled_objective(self, params, states, shared, round_seed):
        """Central oracle: the objective over all sources' data in one evaluation."""
        raise NotImplementedError

    def query(self, kind, params, state, shared, seed, options):
        raise KeyError(f"{self.name} has no query {kind!r}")


def source_index(shared, source_id):
    return shared["source_ids"].index(int(source_id))


def round_seed(master_seed, rnd):
    """Integer seed of one round derived from the master seed."""
    return int(np.random.SeedSequence([int(master_seed), int(rnd)]).generate_state(1, np.uint32)[0])


def sub_seed(seed, *keys):
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1, np.uint32)[0])


def torch_params(params, names=None):
    import torch

    return {
        k: torch.tensor(v, dtype=torch.float64, requires_grad=True)
        for k, v in params.items()
        if names is None or k in names
    }


def collect_grads(value, tensors, params):
    """Backpropagate ``value`` and return numpy gradients for every segment of ``params``."""
    import torch

    leaves = [tensors[k] for k in params.names() if k in tensors]
    gr = torch.autograd.grad(value, leaves, allow_unused=True) if leaves else []
    out = {}
    it = iter(gr)
    for k in params.names():
        if k in tensors:
            g = next(it)
            out[k] = np.zeros(params[k].shape) if g is None else g.detach().numpy().astype(np.float64)
        else:
            out[k] = np.zeros(params[k].shape)
    return float(value.detach()), out


__all__ = ["LocalState", "ParameterVector", "Problem", "make_problem", "register", "round_seed", "sub_seed"]
