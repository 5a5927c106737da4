"""Hermitian-Einstein solver and curvature engine for Higgs bundles on flat tori."""

from .fields import END, SECTION, FormField, star_adjoint, wedge_bracket, wedge_product
from .torus_geometry import (TorusGrid, build_torus, field_norm,
                             global_inner_product, lambda_contract)
from .gauge_bundle import (BundleConfig, check_higgs, chern_curvature,
                           dolbeault_d, random_bundle)
from .hodge_engine import (HarmonicBasis, SolverError, d_adjoint, green,
                           harmonic_basis, harmonic_project, laplacian,
                           lambda_bracket_pairing)

__all__ = [
    "END", "SECTION", "FormField", "star_adjoint", "wedge_bracket",
    "wedge_product", "TorusGrid", "build_torus", "field_norm",
    "global_inner_product", "lambda_contract", "BundleConfig", "check_higgs",
    "chern_curvature", "dolbeault_d", "random_bundle", "HarmonicBasis",
    "SolverError", "d_adjoint", "green", "harmonic_basis", "harmonic_project",
    "laplacian", "lambda_bracket_pairing",
]

__version__ = "0.1.0"
