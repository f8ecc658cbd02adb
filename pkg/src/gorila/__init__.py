"""Desk-scale distributed DQN: parallel actors and learners, sharded
asynchronous parameter server, replay memory, and an evaluation harness."""

from .config import RunConfig, load_config, parse_config, save_config
from .envs import chain_mdp, gridworld_mdp, make_env, value_iteration
from .evaluation import dqn_normalize, normalize, report_tables
from .experiment import run_experiment
from .nn import ParamVector, QNetwork, load_checkpoint, save_checkpoint
from .param_server import ParameterServer

__version__ = "0.1.0"

__all__ = [
    "ParamVector",
    "ParameterServer",
    "QNetwork",
    "RunConfig",
    "chain_mdp",
    "dqn_normalize",
    "gridworld_mdp",
    "load_checkpoint",
    "load_config",
    "make_env",
    "normalize",
    "parse_config",
    "report_tables",
    "run_experiment",
    "save_checkpoint",
    "save_config",
    "value_iteration",
]
