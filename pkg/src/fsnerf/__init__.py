"""Few-shot neural radiance fields trained with depth-warped pseudo-views.

Modules: ``geometry`` (cameras, rays, pose grids), ``field`` (the MLP and its
checkpoints), ``renderer`` (volume rendering), ``augment`` (pseudo-views),
``losses``, ``trainer``, ``dataio`` (scenes, image files, metrics) and ``cli``.
"""

from .augment import AugmentConfig, PseudoView, WarpPolicy, forward_warp, generate_pseudo_views
from .dataio import Scene, generate_toy_scene, load_scene, psnr, save_scene, ssim
from .field import EncodingConfig, FieldParams, field_backward, field_forward, init_field, load_checkpoint, save_checkpoint
from .geometry import Intrinsics, Pose, pose_grid
from .kernels import BACKEND
from .losses import ip_loss, msc_loss, photometric_loss
from .renderer import RenderOptions, composite, render_image, render_rays
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"
