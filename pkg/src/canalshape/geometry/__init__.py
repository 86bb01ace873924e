from .canal import (
    CanalGeometry,
    GeometryError,
    box_geometry,
    bump_profile,
    bumped_canal,
    bumped_offsets,
    canal_geometry,
    cylinder_patch,
    default_wall_knots,
    membrane_cap,
    sphere_geometry,
    tube_reference,
)
from .io import export_obj, export_vtk, load_geometry, save_geometry
from .mesh import SurfaceMesh, build_mesh, graded_breaks, lagrange_basis, rule_points, subdivide_breaks
from .patches import (
    ArcSegment,
    DegenerateParameterizationError,
    GridPatch,
    LineSegment,
    ParamPatch,
    RadialGraphPatch,
    RevolutionPatch,
    evaluate_patch,
    interpolation_basis,
    interpolation_stencil,
    patch_from_dict,
)
from .width import AdmissibilityReport, check_wavenumber, hemisphere_directions, min_width
