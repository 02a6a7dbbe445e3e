"""Self-supervised indoor depth tooling: view-synthesis losses with analytic
gradients, ICP-based 3D alignment, flip ensembling, hole filtering, depth
metrics and TUM RGB-D ingestion."""

from .dataset import FrameRecord, SequenceConfig, associate_frames, load_depth_png, save_depth_png, subsample_and_split
from .geometry import Intrinsics, RigidTransform, backproject, project, warp_coords
from .icp import icp_3d_loss, icp_align
from .image import DepthMap, ImageBuffer, build_pyramid, flip_horizontal, resize_bilinear
from .losses import LossWeights, SsimParams, Strategy, multiscale_losses, reconstruction_loss, smoothness_loss, ssim_loss
from .metrics import MetricReport, depth_metrics
from .optimizer import PairProblem, evaluate, make_synthetic_scene, optimize_pair
from .postproc import FilterSpec, apply_filter, elwf_combine, godard_postprocess
from .sampler import bilinear_sample

__version__ = "0.1.0"

__all__ = [
    "DepthMap",
    "FilterSpec",
    "FrameRecord",
    "ImageBuffer",
    "Intrinsics",
    "LossWeights",
    "MetricReport",
    "PairProblem",
    "RigidTransform",
    "SequenceConfig",
    "SsimParams",
    "Strategy",
    "apply_filter",
    "associate_frames",
    "backproject",
    "bilinear_sample",
    "build_pyramid",
    "depth_metrics",
    "elwf_combine",
    "evaluate",
    "flip_horizontal",
    "godard_postprocess",
    "icp_3d_loss",
    "icp_align",
    "load_depth_png",
    "make_synthetic_scene",
    "multiscale_losses",
    "optimize_pair",
    "project",
    "reconstruction_loss",
    "resize_bilinear",
    "save_depth_png",
    "smoothness_loss",
    "ssim_loss",
    "subsample_and_split",
    "warp_coords",
]
