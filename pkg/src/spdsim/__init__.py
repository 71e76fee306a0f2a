"""Desk-scale simulator and optimizer for sync-point dropping in
tensor-parallel decoder inference."""

from . import (checkpoint, cost, data, distill, grouping, model, parallel,
               pipeline, sensitivity, tensor)
from .errors import (CapacityError, ConfigError, ContractError, DataError,
                     DivergenceError, NumericError, ShapeError, SpdError)

__version__ = "0.1.0"
