"""Observer-based safety-critical control: disturbance observer, filter, CBF-QP and simulation."""
from .config import SimConfig, default_config, load_config
from .errors import (ConfigError, ContractError, ControllerError, IidobError, InfeasibleQPError,
                     SimulationError)
from .models import make_scenario
from .runner import run

__all__ = ["SimConfig", "default_config", "load_config", "run", "make_scenario", "ConfigError",
           "ContractError", "ControllerError", "IidobError", "InfeasibleQPError", "SimulationError"]
__version__ = "0.1.0"
