"""Safe reinforcement learning for frequency regulation via gauge-map safety filters."""

from gaugerl.config import TOL, Tolerances
from gaugerl.errors import GaugeRLError

__version__ = "0.1.0"

__all__ = ["TOL", "Tolerances", "GaugeRLError", "__version__"]
