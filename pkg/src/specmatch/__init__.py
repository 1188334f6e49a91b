"""Zero-shot non-rigid shape matching with spectral diffusion priors.

The pipeline: build Laplace-Beltrami eigenbases on triangle meshes, learn a
score-based generative model over absolute ground-truth functional maps,
distill it into a data-driven regularization mask plus a score-distillation
loss, and optimize per-pair point descriptors into dense correspondences.
"""

from .distill import (
    FeatureNetConfig,
    MatchResult,
    ZeroShotConfig,
    distill_mask,
    feature_forward,
    ini_zoomout_match,
    proper_loss,
    sds_gradient,
    zero_shot_match,
)
from .fmap import (
    fmap_from_p2p,
    geodesic_error,
    gt_fmap,
    laplacian_mask,
    p2p_from_fmap,
    resolvent_mask,
    slanted_mask,
    solve_fmap,
    zoomout,
)
from .mesh import (
    TriangleMesh,
    cotan_stiffness,
    geodesic_distances,
    load_mesh,
    save_off,
    vertex_areas,
)
from .sgm import (
    DenoiserConfig,
    DenoiserParams,
    MapDataset,
    NoiseSchedule,
    denoise,
    load_checkpoint,
    sample,
    save_checkpoint,
    score,
    train_denoiser,
)
from .spectral import SpectralBasis, eigenbasis, heat_kernel_signature, project, reconstruct
from .synth import DeformConfig, build_fmap_dataset, deform, make_template

__version__ = "0.1.0"

__all__ = [
    "DeformConfig",
    "DenoiserConfig",
    "DenoiserParams",
    "FeatureNetConfig",
    "MapDataset",
    "MatchResult",
    "NoiseSchedule",
    "SpectralBasis",
    "TriangleMesh",
    "ZeroShotConfig",
    "build_fmap_dataset",
    "cotan_stiffness",
    "deform",
    "denoise",
    "distill_mask",
    "eigenbasis",
    "feature_forward",
    "fmap_from_p2p",
    "geodesic_distances",
    "geodesic_error",
    "gt_fmap",
    "heat_kernel_signature",
    "ini_zoomout_match",
    "laplacian_mask",
    "load_checkpoint",
    "load_mesh",
    "make_template",
    "p2p_from_fmap",
    "project",
    "proper_loss",
    "reconstruct",
    "resolvent_mask",
    "sample",
    "save_checkpoint",
    "save_off",
    "score",
    "sds_gradient",
    "slanted_mask",
    "solve_fmap",
    "train_denoiser",
    "vertex_areas",
    "zero_shot_match",
    "zoomout",
]
