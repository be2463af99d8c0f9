"""Quadratic toy objective ``J^s = -|theta - c_s|^2 / 2``; its summed gradient vanishes at mean(c_s)."""

import numpy as np

from .params import ParameterVector
from .problem import Problem, register


@register
class QuadraticProblem(Problem):
    name = "quadratic"
    maximize = True

    def __init__(self, dim=3, centers=None, scale=1.0):
        super().__init__(dim=dim, centers=centers, scale=scale)
        self.dim = int(dim)
        self.centers = centers
        self.scale = float(scale)

    def _center(self, state):
        if self.centers is not None:
            return np.asarray(self.centers[str(state.source_id)], dtype=np.float64)
        # default centre: mean outcome of the shard repeated; keeps the toy data-dependent
        return np.full(self.dim, float(np.mean(state.train.y)))

    def init_params(self, shared, seed):
        return ParameterVector().add("theta", np.zeros(self.dim))

    def local_objective(self, params, state, shared, round_seed):
        diff = params["theta"] - self._center(state)
        return -0.5 * self.scale * float(diff @ diff), {"theta": -self.scale * diff}

    def pooled_objective(self, params, states, shared, round_seed):
        total, grad = 0.0, np.zeros(self.dim)
        for sid in sorted(states):
            v, g = self.local_objective(params, states[sid], shared, round_seed)
            total += v
            grad = grad + g["theta"]
        return total, {"theta": grad}
