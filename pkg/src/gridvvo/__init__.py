"""Volt/VAR optimisation with discrete tap changers and capacitor banks."""

from .network import (
    Branch,
    Bus,
    Generator,
    Network,
    OperatingState,
    ShuntDevice,
    validate,
)

__all__ = [
    "Branch",
    "Bus",
    "Generator",
    "Network",
    "OperatingState",
    "ShuntDevice",
    "validate",
]
__version__ = "0.1.0"
