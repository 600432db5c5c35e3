from .tensor import (AutodiffError, Parameter, ShapeError, Tape, Tensor,
                     backward, set_debug_checks)
from . import ops
from .gradcheck import grad_check, register, registered_cases, run_case, run_suite

__all__ = [
    "AutodiffError", "Parameter", "ShapeError", "Tape", "Tensor",
    "backward", "set_debug_checks", "ops",
    "grad_check", "register", "registered_cases", "run_case", "run_suite",
]
