"""Partially observed regime-switching jump-diffusion: filtering and quadratic hedging."""
from .errors import (AdmissibilityError, ContractError, GridMismatchError, ModelValidationError,
                     ObservationError, PohedgeError, SingularityError, StepSizeError, TreeSizeError)
from .model import ModelSpec, load_scenario, load_spec, spec_from_dict, validate_model

__version__ = "0.1.0"
