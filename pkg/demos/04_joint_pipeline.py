"""The joint detector: gate the classifier with a certified discriminator.

P(y|x) = P(y|x, in) P(in|x) + (1/K)(1 - P(in|x)): a saturated gate
recovers the classifier, a suppressed gate collapses to the uniform
distribution, and the confidence is always bounded by
(K-1)/K P(in|x) + 1/K.  With the worst-case gate from interval bounds
the same algebra yields a guaranteed confidence bound on OOD balls, and
scaling inputs far out drives the joint confidence to 1/K while a plain
classifier saturates.
"""

import numpy as np

from smoothcert import (
    CosineSchedule,
    RngStream,
    TrainConfig,
    analytic_denoiser,
    default_geometry,
    guaranteed_linf_msp_upper,
    joint_confidence,
    sample_id,
    sample_ood,
    scale_sweep,
    train_classifier,
    train_discriminator,
)
from smoothcert.detector import JointDetector
from smoothcert.synthdata import default_ood_params

spec = default_geometry()
params = default_ood_params(spec)
train = sample_id(spec, 1200, RngStream(0))
outliers = sample_ood("uniform_box", 2, 1200, params, RngStream(1))

plain_cls = train_classifier(train, TrainConfig(epochs=120, seed=2,
                                                oe_weight=0.0))
oe_cls = train_classifier(train, TrainConfig(epochs=120, seed=2),
                          ood=outliers)
disc = train_discriminator(train.points, outliers.points,
                           TrainConfig(epochs=200, seed=3), epsilon=0.1)

plain = JointDetector(kind="plain", classifier=plain_cls, class_count=4)
distro = JointDetector(kind="distro", classifier=oe_cls, class_count=4,
                       discriminator=disc, bias_shift=3.0,
                       denoiser=analytic_denoiser(spec), sigma=0.12,
                       schedule=CosineSchedule.create())

x_id = spec.means[2]
x_ood = np.array([4.2, -3.8])
for name, x in (("in-distribution", x_id), ("out-of-distribution", x_ood)):
    _, plain_conf = joint_confidence(plain, x, RngStream(4))
    _, joint_conf = joint_confidence(distro, x, RngStream(4))
    bound = guaranteed_linf_msp_upper(distro, x, 0.1)
    print(f"{name:>20}: plain msp {plain_conf:.3f} | joint msp "
          f"{joint_conf:.3f} | guaranteed over eps=0.1 ball <= {bound:.3f}")

betas = np.logspace(0, 3, 7)
print("\nconfidence along the ray beta * x for an ID sample:")
plain_curve = scale_sweep(plain, x_id, betas, stream=RngStream(5))
joint_curve = scale_sweep(distro, x_id, betas, stream=RngStream(5))
for beta, a, b in zip(betas, plain_curve, joint_curve):
    print(f"  beta {beta:7.1f}: plain {a:.3f}   gated {b:.3f}")
print("the gated pipeline falls to 1/K = 0.25; the plain one saturates")
