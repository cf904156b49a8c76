"""EMT black-start simulation of grid-forming converters on unbalanced feeders."""

__version__ = "0.1.0"

from .network import (
    GND,
    CompanionBranch,
    InvalidElementError,
    NetworkModel,
    NodalSystem,
    NumericalError,
    SimClock,
    TopologyError,
    companion_stamp,
)

__all__ = [
    "GND",
    "CompanionBranch",
    "InvalidElementError",
    "NetworkModel",
    "NodalSystem",
    "NumericalError",
    "SimClock",
    "TopologyError",
    "companion_stamp",
    "__version__",
]
