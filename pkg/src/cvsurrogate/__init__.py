"""Neural-network surrogates for collective variables and their Jacobians."""

__version__ = "0.1.0"

from .cv import CoordinationCV, CVFunction, DistanceCV, SingularConfigurationError, make_cv, mass_vector
from .geometry import Configuration, SimBox, min_image_displacement, wrap_coordinate
from .surrogate import MLP, SurrogateCV, backward_weights, build_surrogate, forward, init_parameters, input_jacobian

__all__ = [
    "CVFunction", "CoordinationCV", "Configuration", "DistanceCV", "MLP", "SimBox", "SingularConfigurationError",
    "SurrogateCV", "backward_weights", "build_surrogate", "forward", "init_parameters", "input_jacobian",
    "make_cv", "mass_vector", "min_image_displacement", "wrap_coordinate",
]
