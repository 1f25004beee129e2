"""Scheduling simulator for asynchronous federated learning over a wireless uplink."""

from .bayes import Balsa, BalsaPO, PosteriorState
from .channel import ChannelBank, ChannelParams
from .config import ExperimentConfig, from_dict, load_config
from .engine import Environment, FlHyperParams, World, run, run_round
from .errors import (ConfigError, InvalidSchedule, MissingStateInfo, NoConvergence, NonFiniteGradient,
                     SingularChain, TooLarge, WdlnError, ZeroDenominator)
from .harness import run_experiment
from .oracle import SmallInstance, build_mdp, evaluate_policy, relative_value_iteration
from .schedulers import SCHEDULER_NAMES, make_scheduler

__all__ = [
    "Balsa", "BalsaPO", "PosteriorState", "ChannelBank", "ChannelParams", "ExperimentConfig", "from_dict",
    "load_config", "Environment", "FlHyperParams", "World", "run", "run_round", "ConfigError",
    "InvalidSchedule", "MissingStateInfo", "NoConvergence", "NonFiniteGradient", "SingularChain", "TooLarge",
    "WdlnError", "ZeroDenominator", "run_experiment", "SmallInstance", "build_mdp", "evaluate_policy",
    "relative_value_iteration", "SCHEDULER_NAMES", "make_scheduler",
]
