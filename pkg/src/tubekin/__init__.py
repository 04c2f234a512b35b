"""Consistent grid parameterization and wall-motion analysis of deforming tubes.

The package turns a time sequence of open tubular triangle meshes (two
boundary loops each) into a consistent n x m grid parameterization and
derives quantitative descriptions of the tube's peristaltic motion:
cross-sectional area images, wave speeds, expansion durations, curvature
and strain-energy maps, and contour shape modes.
"""

from .mesh_core import (
    AmbiguousLabelError,
    BoundaryLoop,
    GeodesicError,
    GeodesicGraph,
    GeodesicPath,
    SurfacePoint,
    TopologyError,
    TopologyReport,
    TriMeshFrame,
    boundary_loops,
    enclosed_volume,
    layer_volume,
    point_to_point_geodesic,
    shortest_boundary_geodesic,
    validate_topology,
)
from .parameterize import (
    CutMesh,
    FlattenedFrame,
    FlatteningError,
    GridMesh,
    align_lumen_seam,
    cut_along_geodesic,
    flatten_to_unit_square,
    project_to_inner,
    resample_grid,
)
from .temporal import (
    ClipResult,
    CyclePhaseMap,
    SurfaceSequence,
    align_cycle_by_volume,
    clip_to_constant_volume,
    stabilize_seam_endpoints,
)
from .sections import (
    Contour,
    SectionError,
    SectionPlane,
    centerline_section_planes,
    contour_area,
    extract_contour,
    grid_contours,
    section_planes,
    validate_nonintersection,
)
from .kinematics import (
    AreaImage,
    ExpansionBand,
    WaveStats,
    area_gradient_image,
    build_area_image,
    cycle_phase_ratios,
    expansion_band,
    peak_times,
    percent_time_expanded,
    wave_speed_stats,
)
from .shape import (
    ContourSet,
    CurvatureImage,
    ShapeModes,
    StrainField,
    contour_pca,
    mean_curvature,
    normalize_per_pixel,
    radial_curvature_image,
    strain_energy,
)
from .synth import (
    TubeSpec,
    generate_sequence,
    oracle_area,
    oracle_duty_cycle,
    oracle_layer_volume,
    oracle_trim_fraction,
    oracle_wave_speed,
)

__version__ = "0.1.0"
