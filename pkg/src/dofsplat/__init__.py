"""Differentiable depth-of-field Gaussian splatting: a CPU reference engine
with a learnable thin-lens camera per view, analytic gradients through the
blur-convolved rasterizer, CoC-guided detail enhancement, and an interactive
refocus service."""

from .camera_init import init_aperture, init_focal, init_lenses
from .core import (CameraPose, GradientSet, Gaussian3D, LensParams, RenderOutput,
                   Scene, TrainView, covariance_from, validate_scene)
from .dof import (coc_radius, coc_radius_full, convolve_cov, da_df, da_dQ, da_dz,
                  kernel_variance)
from .losses import LossWeights, composite_image, l_detail, l_rec, psnr, ssim, total_objective
from .projection import Projected2D, depth_of, project_gaussian
from .rasterizer import (RasterSettings, UpstreamGrads, render, render_all_in_focus,
                         render_backward)
from .scene_io import (SyntheticSceneSpec, generate_synthetic, load_checkpoint,
                       load_ply_points, load_scene, read_image, save_checkpoint,
                       save_scene, write_image)
from .trainer import Schedule, TrainConfig, inject_points, prune, train

__version__ = "0.1.0"
