from raregen.flow.checkpoint import load_checkpoint, save_checkpoint
from raregen.flow.model import (
    FlowConfig,
    FlowModel,
    LogProbResult,
    MinMaxScaler,
    forward_logprob,
    grad_logprob,
    inverse,
)
from raregen.flow.train import TrainConfig, TrainResult, initialize_actnorm, mean_nll, train_flow

__all__ = [
    "FlowConfig",
    "FlowModel",
    "LogProbResult",
    "MinMaxScaler",
    "TrainConfig",
    "TrainResult",
    "forward_logprob",
    "grad_logprob",
    "initialize_actnorm",
    "inverse",
    "load_checkpoint",
    "mean_nll",
    "save_checkpoint",
    "train_flow",
]
