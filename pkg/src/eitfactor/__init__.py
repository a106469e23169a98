"""Three-dimensional electrical impedance tomography with the Factorization method.

Modules
-------
mesh      tetrahedral meshes, MSH 2.2 I/O, electrode layouts, boundary quadrature
fem       P1 finite elements for the continuum and complete electrode models
synth     injection patterns, synthetic data, multiplicative noise
greens    dipole test functions of the background Neumann Green's function
facto     SVD, Picard quotients, indicator, thresholding and localisation error
fixtures  cylinder and layered-head fixture meshes and the experiment suite
"""

from .errors import (
    CompatibilityError,
    ConfigError,
    DegenerateError,
    EitError,
    FormatError,
    GeometryError,
    IncompatibilityError,
    LayoutError,
    NumericError,
    PatternError,
    QuadratureWarning,
    TopologyError,
)
from .facto import (
    CUBE_DIRECTIONS,
    IndicatorField,
    ReconstructionReport,
    SvdTriplets,
    barycenter_error,
    indicator,
    picard,
    sample_grid,
    svd,
    threshold_components,
    write_vtk,
)
from .fem import ConductivityField, DataMatrix, Inclusion, assemble_cem, ntd_cem, ntd_continuum, solve_cem, solve_continuum
from .greens import DipoleProjector, dipole_trace, free_dipole, project_pm, solve_regular_part
from .mesh import ElectrodeLayout, Mesh, build_layout, load_mesh, surface_quadrature, write_mesh
from .synth import PatternSet, add_noise, difference_data, farthest_pair_patterns, opposite_patterns, simulate

__version__ = "0.1.0"
