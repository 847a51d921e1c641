"""Meta-reinforcement-learning agent with episodic and Hebbian memory."""

import json
import os

from . import _core
from ._core import (
    EPISODES_PER_TASK,
    NUM_ACTIONS,
    ConfigError,
    FamilyParams,
    GridEnv,
    HashMismatch,
    ParameterError,
    ProtocolError,
)

__all__ = [
    "EPISODES_PER_TASK",
    "NUM_ACTIONS",
    "ConfigError",
    "FamilyParams",
    "GridEnv",
    "HashMismatch",
    "ParameterError",
    "ProtocolError",
    "Trainer",
    "ablations",
    "config_hash",
    "default_config",
    "evaluate_checkpoint",
    "load_config",
    "plot_runs",
    "train",
]


def _text(config):
    return config if isinstance(config, str) else json.dumps(config or {})


def default_config():
    return json.loads(_core.default_config())


def load_config(path, overrides=()):
    return json.loads(_core.load_config(os.fspath(path), list(overrides)))


def config_hash(config):
    return _core.config_hash(_text(config))


def ablations(config):
    return {name: json.loads(text) for name, text in _core.ablations(_text(config))}


def train(config, out_root="runs", run_name=""):
    return _core.train(_text(config), os.fspath(out_root), run_name)


def evaluate_checkpoint(path, n_tasks=100, seed=0):
    return _core.evaluate_checkpoint(os.fspath(path), n_tasks, seed)


def plot_runs(run_dirs, out_svg):
    _core.plot_runs([os.fspath(d) for d in run_dirs], os.fspath(out_svg))


class Trainer(_core.Trainer):
    """Trainer for one seed; accepts a config dict or JSON text."""

    def __init__(self, config=None, seed=1):
        super().__init__(_text(config), seed)
