"""safegrid: symbolic microgrid models, auto-synthesized robust MPC and
solver-based safety filters, and a steppable multi-agent environment."""

__version__ = "0.1.0"

from .global_model import GlobalModel, build_global_model, validate_model
from .symbolic import EntityId, EntityModel
from .uncertainty import IntervalBox, RobustCostMode, forecast_box, propagate_bounds, robustify_ocp

__all__ = [
    "EntityId",
    "EntityModel",
    "GlobalModel",
    "build_global_model",
    "validate_model",
    "IntervalBox",
    "RobustCostMode",
    "forecast_box",
    "propagate_bounds",
    "robustify_ocp",
    "__version__",
]
