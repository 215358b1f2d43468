"""Refinement of noisy pairwise visual-odometry estimates via composite
transformation constraints, with sample-based uncertainty recovery."""

from .errors import (
    ConfigurationError,
    CtcOdomError,
    DuplicateKeyError,
    InvalidArgumentError,
    NearSingularityError,
    ParseError,
)
from .liegroup import (
    SE3Pose,
    chain_log,
    chain_log_jacobian,
    compose,
    exp_map,
    inverse,
    log_map,
    relative_xi,
)

__version__ = "0.1.0"
