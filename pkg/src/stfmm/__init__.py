"""Space-time FMM for the heat single-layer operator on tensor-product meshes."""

from .assembly import TrianglePairTable, assemble_dense, assemble_nearfield
from .config import RunConfig
from .estimators import SingleLayerFMM, SingleLayerSolver
from .fmm import FMMPlan, build_fmm
from .kernel import ExpansionOrders, heat_kernel
from .mesh import build_tensor_mesh, generate_cube_surface, load_spatial_mesh
from .quadrature import QuadratureSpec
from .solver import SolveReport, gmres, manufactured_rhs
from .tree import build_tree

__version__ = "0.1.0"

__all__ = [
    "TrianglePairTable", "assemble_dense", "assemble_nearfield", "RunConfig", "SingleLayerFMM",
    "SingleLayerSolver", "FMMPlan", "build_fmm", "ExpansionOrders", "heat_kernel", "build_tensor_mesh",
    "generate_cube_surface", "load_spatial_mesh", "QuadratureSpec", "SolveReport", "gmres",
    "manufactured_rhs", "build_tree",
]
