"""evolab: a deterministic desk-scale lab for self-evolving policy training."""

__version__ = "0.1.0"

from . import dynamics, env, evolution, policy, reward
from .config import RunConfig, resolve_config

__all__ = [
    "env",
    "policy",
    "reward",
    "dynamics",
    "evolution",
    "RunConfig",
    "resolve_config",
    "__version__",
]
