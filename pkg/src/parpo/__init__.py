"""Parallel rollout-sampler PPO engine: N sampler workers generate experience
under a versioned policy while a single learner runs clipped-surrogate
updates, with first-class timing of the collection/learning split."""

from .envs import EnvSpec, busy_spec, cartpole_spec, pendulum_spec, spec_for
from .learner import PpoHyper, default_hyper
from .orchestrator import RunConfig, RunLog, train
from .policy import ParameterSnapshot, decode_snapshot, encode_snapshot, init_policy

__version__ = "0.1.0"

__all__ = [
    "EnvSpec",
    "ParameterSnapshot",
    "PpoHyper",
    "RunConfig",
    "RunLog",
    "busy_spec",
    "cartpole_spec",
    "decode_snapshot",
    "default_hyper",
    "encode_snapshot",
    "init_policy",
    "pendulum_spec",
    "spec_for",
    "train",
    "__version__",
]
