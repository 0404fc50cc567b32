"""Local tomography of symmetric 4-tensor fields along geodesics."""
__version__ = "0.1.0"

from .errors import (ConfigError, FoliationError, TensorTomoError, ValidationError)  # noqa: E402
from .grid import Grid  # noqa: E402
from .geometry import (BoundaryChart, ChartMetric, FanParams, RadialProfile, convexity_probe,  # noqa: E402
                       herglotz_check, local_geodesic_fan, trace_geodesics)
from .tensors import (BumpTensorField, SymDiffField, SymmetricTensorField, divergence_adjoint,  # noqa: E402
                      read_tensor_file, stiffness_to_symmetric, sym_diff, write_tensor_file)
from .transform import RayData, forward_fan, forward_matrix, qp_perturbation, trace_fan  # noqa: E402
from .gauge import (WittenLaplacian, extend_tensor_field, invert_local, layer_strip,  # noqa: E402
                    solenoidal_project, vandermonde_extension_coeffs)
from .estimators import LocalInversionEstimator, RayTransformEstimator, SolenoidalProjector  # noqa: E402

__all__ = [
    "BoundaryChart", "BumpTensorField", "ChartMetric", "ConfigError", "FanParams", "FoliationError", "Grid",
    "LocalInversionEstimator", "RadialProfile", "RayData", "RayTransformEstimator", "SolenoidalProjector",
    "SymDiffField", "SymmetricTensorField", "TensorTomoError", "ValidationError", "WittenLaplacian",
    "convexity_probe", "divergence_adjoint", "extend_tensor_field", "forward_fan", "forward_matrix",
    "herglotz_check", "invert_local", "layer_strip", "local_geodesic_fan", "qp_perturbation", "read_tensor_file",
    "solenoidal_project", "stiffness_to_symmetric", "sym_diff", "trace_fan", "trace_geodesics",
    "vandermonde_extension_coeffs", "write_tensor_file",
]
