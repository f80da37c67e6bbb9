"""Python bindings for the treediff C++ core."""

import json

from ._core import (
    CSV_HEADER,
    ConfigError,
    Graph,
    Pipeline,
    is_valid,
    reward,
    sample_dataset,
    sample_step_length,
    schedule,
    spearman,
    triangle_count,
)
from . import _core


def default_config():
    return json.loads(_core.default_config())


def check_config(cfg):
    """Validates a config dict and returns it with every default filled in."""
    return json.loads(_core.check_config(json.dumps(cfg)))


def gradcheck(seed=0):
    return _core.gradcheck(seed)


def train(cfg):
    return Pipeline.train(json.dumps(cfg))


def load(cfg):
    return Pipeline.load(json.dumps(cfg))


__all__ = [
    "CSV_HEADER",
    "ConfigError",
    "Graph",
    "Pipeline",
    "check_config",
    "default_config",
    "gradcheck",
    "is_valid",
    "load",
    "reward",
    "sample_dataset",
    "sample_step_length",
    "schedule",
    "spearman",
    "train",
    "triangle_count",
]
