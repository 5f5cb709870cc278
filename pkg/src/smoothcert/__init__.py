"""Certified and adversarially robust OOD detection at desk scale.

Smoothing-based l2 confidence certificates, IBP-certified discriminators,
one-shot denoised joint pipelines, the PGD evaluation protocol, and the
clean / guaranteed / adversarial metric suite.
"""

from .attack import AttackConfig, attack_id_accuracy, pgd_maximize, starting_points
from .detector import (
    JointDetector,
    certified_l2_score,
    guaranteed_linf_msp_upper,
    joint_confidence,
    load_detector,
    save_detector,
    scale_sweep,
)
from .diffusion import (
    CosineSchedule,
    DenoiserSpec,
    analytic_denoiser,
    denoise_once,
    find_timestep,
    learned_denoiser,
    noise_and_scale,
    train_denoiser,
)
from .ibp import (
    IntervalBox,
    discriminator_upper_logit,
    ibp_training_loss,
    propagate_affine,
    propagate_relu,
    train_discriminator,
)
from .metrics import (
    ScoreSet,
    adversarial_scores,
    aupr,
    auc,
    fpr_at_95_tpr,
    guaranteed_scores_l2,
    guaranteed_scores_linf,
)
from .mlp import (
    MlpModel,
    TrainConfig,
    energy_score,
    forward_logits,
    input_gradient,
    load_model,
    msp,
    save_model,
    train_classifier,
)
from .numerics import (
    RngStream,
    clopper_pearson_lower,
    gaussian_kde,
    gaussian_noise,
    std_normal_cdf,
    std_normal_quantile,
)
from .smoothing import (
    CertifiedScore,
    SmoothingConfig,
    certified_confidence_upper,
    certify_radius,
    estimate_smoothed_probs,
    lipschitz_constant,
)
from .synthdata import (
    LabeledDataset,
    MixtureSpec,
    OodDataset,
    OodParams,
    default_geometry,
    load_csv,
    sample_id,
    sample_ood,
    save_csv,
)

__version__ = "0.1.0"
