"""Normal-driven differentiable as-rigid-as-possible deformation."""

__version__ = "0.1.0"

from .core import (
    DeformConfig,
    ForwardResult,
    RotationField,
    TargetNormals,
    assemble_rhs,
    deform,
    deform_forward,
    global_step,
    local_step,
    njf_poisson,
    retarget_lambda,
)
from .errors import DarapError, DataError, FactorizationError, GuidanceError, MissingCacheError, NumericalError, ObjParseError
from .grad import vjp_deform
from .mesh import Mesh, load_obj, save_obj, validate
from .operators import SurfaceOperators, build_gradient_ops, build_operators

__all__ = [
    "DeformConfig",
    "ForwardResult",
    "RotationField",
    "TargetNormals",
    "assemble_rhs",
    "deform",
    "deform_forward",
    "global_step",
    "local_step",
    "njf_poisson",
    "retarget_lambda",
    "DarapError",
    "DataError",
    "FactorizationError",
    "GuidanceError",
    "MissingCacheError",
    "NumericalError",
    "ObjParseError",
    "vjp_deform",
    "Mesh",
    "load_obj",
    "save_obj",
    "validate",
    "SurfaceOperators",
    "build_gradient_ops",
    "build_operators",
]
