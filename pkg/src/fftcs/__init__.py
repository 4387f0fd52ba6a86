"""Free-final-time covariance steering for nonlinear stochastic systems."""

from .errors import *  # noqa: F401,F403
from .model import (
    DynamicsModel,
    McParams,
    ProblemSpec,
    ScpParams,
    check_jacobians,
    double_integrator_spec,
    finite_difference_model,
    make_double_integrator,
    make_linear_model,
    uniform_mesh,
)
from .scp import RunResult, run

__version__ = "0.1.0"
