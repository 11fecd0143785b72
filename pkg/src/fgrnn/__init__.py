"""Fixation-gated recurrent networks on a small numpy autodiff core."""

from .autodiff import Tensor, backprop, check_gradients, no_grad, parameter
from .cells import LstmCell, RnnCell, unroll
from .config import ConfigError, RunConfig, load_config, parse_config
from .gated import FgpLstm, FgpRnn, Fgl, GateSchedule, StackedFgp, Vanilla
from .tasks import ModelSpec, TaskModel, count_parameters, fit_hidden_dim, train

__all__ = [
    "Tensor", "backprop", "check_gradients", "no_grad", "parameter",
    "LstmCell", "RnnCell", "unroll",
    "ConfigError", "RunConfig", "load_config", "parse_config",
    "FgpLstm", "FgpRnn", "Fgl", "GateSchedule", "StackedFgp", "Vanilla",
    "ModelSpec", "TaskModel", "count_parameters", "fit_hidden_dim", "train",
]
__version__ = "0.1.0"
