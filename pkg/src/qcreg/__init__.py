"""qcreg: quasiconformal registration of partially corresponding surfaces.

The package flattens disk-topology surfaces conformally, deforms one
parameter domain onto another under landmark, intensity and distortion
constraints, and reports both the bijective map and the discovered
corresponding regions.
"""

from .conformal import FlatteningResult, flatten_lscm, normalize_domain
from .distortion import (
    DistortionBounds,
    JacobianField,
    map_jacobian,
    project_bounds,
    project_map,
    recover_map,
)
from .intensity import (
    DisplacementGrid,
    IntensityGrid,
    demons_step,
    fidelity_energy,
    gaussian_smooth,
    overlap_mask,
    rasterize,
    sample_to_vertices,
)
from .mesh import (
    LandmarkSet,
    ParamMesh,
    TriMesh,
    attach_intensity,
    load_landmarks,
    load_mesh,
    load_param_mesh,
    save_mesh,
)
from .numerics import (
    SparseSpdSystem,
    Svd2x2,
    assemble_div_a_grad,
    face_adjacency_laplacian,
    face_gradient,
    face_neighbor_mean,
    solve_constrained,
    svd2x2,
)
from .pipeline import (
    Correspondence,
    EnergyRecord,
    EnergyTrace,
    RegistrationConfig,
    energy,
    extract_correspondence,
    free_boundary_deform,
    register,
)
from .qc import (
    BeltramiField,
    PlanarMap,
    beltrami_of_map,
    condition_number,
    diffusion_matrix,
    lbs,
    smooth_beltrami,
    threshold,
)

__version__ = "0.1.0"
