"""Coordinator/worker runtime for federated training."""

from .messages import PROTOCOL_VERSION, Message, ProtocolError
from .params import ParameterVector
from .problem import LocalState, Problem, make_problem, register, round_seed
from .runtime import (
    NumericalFailure,
    RoundAborted,
    Session,
    TrainConfig,
    TrainResult,
    Worker,
    aggregate,
    central_train,
    run_training,
)

__all__ = [
    "PROTOCOL_VERSION", "Message", "ProtocolError", "ParameterVector", "LocalState", "Problem",
    "make_problem", "register", "round_seed", "NumericalFailure", "RoundAborted", "Session", "TrainConfig",
    "TrainResult", "Worker", "aggregate", "central_train", "run_training",
]
