"""Multi-view semantic shape distillation on tetrahedral SDF grids."""

from .tet_field import (
    SdfField,
    TetGrid,
    build_grid,
    eikonal_loss,
    init_sphere,
    normal_consistency_loss,
    sdf_at,
    vertex_normals,
)
from .renderer import Camera, GBuffer, RenderConfig, camera_from_angles, nd_pack, render, render_backward
from .diffusion import EchoPrior, NoiseSchedule, OraclePrior, add_noise, cfg_combine, make_schedule
from .guidance import ObservationSet, guidance_scale, influence_weights, observation_set, sample_camera
from .appearance import AppearanceField, material_at, new_field, shade
from .meshing import Mesh, bake_vertex_colors, marching_tetrahedra, mesh_stats, write_obj, write_ply
from .distill import StageConfig, TrainState, lgad_step, run_appearance_stage, run_geometry_stage

__version__ = "0.1.0"
