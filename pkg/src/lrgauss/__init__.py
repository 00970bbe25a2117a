"""Low-rank Gaussian observation models for images.

Core object: a multivariate normal over flattened pixels with covariance
``P @ P.T + diag(d)``, cheap to evaluate and sample at image scale.  On
top of it: a constrained trainer for a small VAE and a distribution-only
model, a CLI, and an HTTP editing service.
"""

from .constrained import (
    AdamOptimizer,
    LagrangianState,
    LossBreakdown,
    SgdOptimizer,
    lagrangian_value,
    update_multipliers,
)
from .data import ImageBatch, load_directory, synthetic_lowrank
from .lowrank import (
    CapacitanceCache,
    DegenerateInterpolationError,
    LowRankGaussian,
    ObservationNoise,
    apply_edits,
    build_cache,
    condition_on_edit,
    entropy,
    entropy_grad,
    log_prob,
    log_prob_grad,
    sample,
    scale_components,
    slerp,
    slerp_interpolate,
)
from .models import (
    DiagonalGaussian,
    DistFitConfig,
    DistOnlyModel,
    VaeModel,
    build_vae,
    decode,
    elbo_terms,
    encode,
    fit_dist_only,
    kl_to_standard_normal,
    reparameterize,
)
from .trainer import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
