"""Learned dispatching for flexible job shops with a limited pallet buffer and kitting."""
from .buffer import BufferState, apply_kitting, estimate_switches
from .env import Action, EnvConfig, SchedulingEnv
from .instance import GeneratorConfig, Instance, generate_instance, read_instance, write_instance

__all__ = [
    "Action",
    "BufferState",
    "EnvConfig",
    "GeneratorConfig",
    "Instance",
    "SchedulingEnv",
    "apply_kitting",
    "estimate_switches",
    "generate_instance",
    "read_instance",
    "write_instance",
]
__version__ = "0.1.0"
