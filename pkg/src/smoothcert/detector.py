"""The joint OOD detector: classifier, optional certified discriminator,
optional one-shot denoiser.

For class probabilities the composition is

    P(y|x) = P(y|x, in) * P(in|x) + (1/K) * (1 - P(in|x)),

with P(in|x) = sigmoid(g(x) + bias_shift) from the discriminator on the
raw input and P(y|x, in) the classifier softmax, evaluated on the
denoised point when a denoiser is present (one noise draw per call).
Because P(y|x, in) <= 1, the joint confidence is bounded by
(K-1)/K * P(in|x) + 1/K, which combined with the IBP upper logit yields
the guaranteed l-infinity confidence bound on OOD points.

Four pipeline kinds: plain and oe are the bare classifier; prood_like
adds the discriminator; distro adds the denoiser in front of the
classifier as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import (
    CosineSchedule,
    DenoiserSpec,
    analytic_denoiser,
    denoise_once,
    denoiser_jacobian,
    find_timestep,
    learned_denoiser,
    load_denoiser,
    noise_and_scale,
    save_denoiser,
)
from .errors import CheckpointError
from .fileio import atomic_write_text
from .ibp import discriminator_upper_logit, sigmoid
from .mlp import (
    MlpModel,
    _softmax_class_grad,
    energy_score,
    forward_logits,
    input_grad_from_logit_grad,
    load_model,
    save_model,
    softmax,
)
from .numerics import RngStream, gaussian_noise_matrix
from .smoothing import CertifiedScore, SmoothingConfig, certified_ood_score
from .synthdata import DEFAULT_BOX, MixtureSpec

KINDS = ("plain", "oe", "prood_like", "distro")


def default_bias_shift(class_count: int) -> float:
    """3 for small label spaces, 1 for large ones (the two published
    calibration points)."""
    return 3.0 if class_count <= 10 else 1.0


@dataclass(frozen=True)
class JointDetector:
    kind: str
    classifier: MlpModel
    class_count: int
    discriminator: MlpModel | None = None
    bias_shift: float = 0.0
    denoiser: DenoiserSpec | None = None
    sigma: float = 0.0
    schedule: CosineSchedule | None = None
    box_bound: float = DEFAULT_BOX

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.classifier.output_dim != self.class_count:
            raise ValueError("classifier output dim != class count")
        needs_disc = self.kind in ("prood_like", "distro")
        if needs_disc and self.discriminator is None:
            raise ValueError(f"{self.kind} requires a discriminator")
        if not needs_disc and self.discriminator is not None:
            raise ValueError(f"{self.kind} must not carry a discriminator")
        if self.kind == "distro":
            if self.denoiser is None or self.schedule is None:
                raise ValueError("distro requires a denoiser and schedule")
        elif self.denoiser is not None:
            raise ValueError(f"{self.kind} must not carry a denoiser")

    @property
    def has_discriminator(self) -> bool:
        return self.discriminator is not None


def _classifier_input(det: JointDetector, points: np.ndarray,
                      stream: RngStream):
    """What the classifier sees: the denoised noisy point, or the raw one.

    Returns (inner, x_t, t_star); the latter two are None without a
    denoiser.
    """
    if det.denoiser is None:
        return points, None, None
    x_t, t_star = noise_and_scale(points, det.sigma, det.schedule, stream)
    return denoise_once(det.denoiser, x_t, t_star, det.schedule), x_t, t_star


def joint_confidence(det: JointDetector, x: np.ndarray, stream: RngStream):
    """Per-class joint probabilities and their maximum.

    Single point (d,) -> ((K,), float); batch (n, d) -> ((n, K), (n,)).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    inner, _, _ = _classifier_input(det, batch, stream)
    p_cls = softmax(forward_logits(det.classifier, inner))
    if det.has_discriminator:
        logit = forward_logits(det.discriminator, batch)[:, 0]
        pi = sigmoid(logit + det.bias_shift)
        probs = pi[:, None] * p_cls + (1.0 - pi[:, None]) / det.class_count
    else:
        probs = p_cls
    conf = probs.max(axis=1)
    if single:
        return probs[0], float(conf[0])
    return probs, conf


def joint_soft_classifier(det: JointDetector):
    """Base-classifier adapter for the smoothing certifier; fresh
    denoiser noise is drawn from the per-batch substream."""
    def fn(points, stream):
        probs, _ = joint_confidence(det, points, stream)
        return probs
    return fn


def classifier_path_soft(det: JointDetector):
    """Classifier-path probabilities (denoised input, no gate mixing).

    The joint probabilities are an increasing affine function of the
    class probability, so their argmax equals this one for every gate
    value > 0; counting votes here avoids the float64 tie that appears
    when the gate underflows toward the uniform mixture.
    """
    def fn(points, stream):
        inner, _, _ = _classifier_input(det, points, stream)
        return softmax(forward_logits(det.classifier, inner))
    return fn


def certified_l2_score(det: JointDetector, x: np.ndarray,
                       cfg: SmoothingConfig,
                       stream: RngStream) -> CertifiedScore:
    """Smoothing certificate of the full pipeline at one point.

    Votes come from the classifier path, whose argmax is exactly the
    joint argmax for any discriminator output.
    """
    return certified_ood_score(classifier_path_soft(det), x, cfg, stream)


def guaranteed_linf_msp_upper(det: JointDetector, z: np.ndarray,
                              epsilon: float):
    """Sound upper bound on the joint confidence over the epsilon-ball:
    (K-1)/K * sigmoid(upper_logit + bias_shift) + 1/K."""
    if not det.has_discriminator:
        raise ValueError(f"{det.kind} detector has no discriminator")
    upper = discriminator_upper_logit(det.discriminator, z, epsilon,
                                      det.box_bound)
    k = det.class_count
    return (k - 1) / k * sigmoid(np.asarray(upper) + det.bias_shift) + 1.0 / k


def joint_msp_score_fn(det: JointDetector):
    """Attack score function: joint confidence and its input gradient.

    With a denoiser, the noise is frozen per stream (the attack engine
    passes one substream per trajectory), making the landscape
    deterministic; the gradient chains through the closed-form denoiser
    Jacobian.
    """
    def fn(points, stream):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        rows = np.arange(n)
        inner, grad_chain = _inner_with_chain(det, points, stream)
        logits = forward_logits(det.classifier, inner)
        p_cls = softmax(logits)
        cls = logits.argmax(axis=1)
        p_max = p_cls[rows, cls]
        g_inner = input_grad_from_logit_grad(
            det.classifier, inner, _softmax_class_grad(logits, cls))
        g_points = grad_chain(g_inner)
        if not det.has_discriminator:
            return p_max, g_points
        logit = forward_logits(det.discriminator, points)[:, 0]
        pi = sigmoid(logit + det.bias_shift)
        vals = pi * p_max + (1.0 - pi) / det.class_count
        g_disc = input_grad_from_logit_grad(
            det.discriminator, points, np.ones((n, 1)))
        grads = (pi[:, None] * g_points
                 + ((p_max - 1.0 / det.class_count) * pi * (1 - pi))[:, None]
                 * g_disc)
        return vals, grads

    return fn


def pipeline_margin_score_fn(det: JointDetector, labels: np.ndarray):
    """Misclassification margin of the pipeline's prediction (best wrong
    logit minus true logit at the classifier input), for ID attacks."""
    labels = np.asarray(labels, dtype=int)

    def fn(points, stream):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        rows = np.arange(len(points))
        inner, grad_chain = _inner_with_chain(det, points, stream)
        logits = forward_logits(det.classifier, inner)
        masked = logits.copy()
        masked[rows, labels] = -np.inf
        wrong = masked.argmax(axis=1)
        vals = logits[rows, wrong] - logits[rows, labels]
        glogits = np.zeros_like(logits)
        glogits[rows, wrong] += 1.0
        glogits[rows, labels] -= 1.0
        g_inner = input_grad_from_logit_grad(det.classifier, inner, glogits)
        return vals, grad_chain(g_inner)

    return fn


def _inner_with_chain(det: JointDetector, points: np.ndarray,
                      stream: RngStream):
    """Classifier input plus the VJP mapping gradients at that input back
    to the raw points (through the frozen-noise denoiser when present)."""
    if det.denoiser is None:
        return points, lambda g: g
    n, d = points.shape
    t_star = find_timestep(det.schedule, det.sigma)
    ab_sqrt = float(np.sqrt(det.schedule.alpha_bar[t_star]))
    noise = gaussian_noise_matrix(stream, n, d, det.sigma) \
        if det.sigma > 0 else np.zeros((n, d))
    x_t = ab_sqrt * (points + noise)
    inner = denoise_once(det.denoiser, x_t, t_star, det.schedule)
    jac = denoiser_jacobian(det.denoiser, x_t, t_star, det.schedule)

    def chain(g_inner):
        return ab_sqrt * np.einsum("ni,nij->nj", g_inner, jac)

    return inner, chain


def scale_sweep(det: JointDetector, x: np.ndarray, betas,
                score: str = "msp", stream: RngStream | None = None):
    """Confidence of the pipeline at beta * x for each scale factor.

    ``msp`` scores the joint confidence; ``energy`` scores the
    classifier logits at the (denoised) classifier input.
    """
    betas = np.asarray(betas, dtype=float)
    if np.any(betas <= 0) or np.any(np.diff(betas) < 0):
        raise ValueError("betas must be positive and ascending")
    if score not in ("msp", "energy"):
        raise ValueError(f"unknown score {score!r}")
    x = np.asarray(x, dtype=float)
    stream = stream if stream is not None else RngStream(0)
    out = np.empty(len(betas))
    for i, beta in enumerate(betas):
        point = (beta * x)[None, :]
        sub = stream.child(i)
        if score == "msp":
            _, conf = joint_confidence(det, point, sub)
            out[i] = conf[0]
        else:
            inner, _, _ = _classifier_input(det, point, sub)
            out[i] = energy_score(forward_logits(det.classifier, inner)[0])
    return out


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def save_detector(det: JointDetector, directory, name: str) -> Path:
    """Persist the bundle: component checkpoints plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# smoothcert-detector v1",
             f"kind = {det.kind}",
             f"classes = {det.class_count}",
             f"bias_shift = {_fmt(det.bias_shift)}",
             f"sigma = {_fmt(det.sigma)}",
             f"box = {_fmt(det.box_bound)}"]
    cls_file = f"{name}_classifier.ckpt"
    save_model(det.classifier, directory / cls_file)
    lines.append(f"classifier = {cls_file}")
    if det.discriminator is not None:
        disc_file = f"{name}_discriminator.ckpt"
        save_model(det.discriminator, directory / disc_file)
        lines.append(f"discriminator = {disc_file}")
    if det.denoiser is None:
        lines.append("denoiser.kind = none")
    else:
        lines.append(f"denoiser.kind = {det.denoiser.kind}")
        lines.append(f"schedule.T = {det.schedule.T}")
        lines.append(f"schedule.s = {_fmt(det.schedule.s)}")
        if det.denoiser.kind == "learned":
            den_file = f"{name}_denoiser.ckpt"
            save_denoiser(det.denoiser.model, directory / den_file)
            lines.append(f"denoiser.path = {den_file}")
            lines.append(f"denoiser.skip_var = {_fmt(det.denoiser.skip_var)}")
            lines.append(
                f"denoiser.clip_bound = {_fmt(det.denoiser.clip_bound)}")
        else:
            prior = det.denoiser.prior
            means = ";".join(",".join(_fmt(v) for v in row)
                             for row in prior.means)
            weights = ",".join(_fmt(v) for v in prior.weights)
            lines.append(f"denoiser.prior.means = {means}")
            lines.append(f"denoiser.prior.cov_scale = {_fmt(prior.cov_scale)}")
            lines.append(f"denoiser.prior.weights = {weights}")
    path = directory / f"{name}.detector"
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def load_detector(path) -> JointDetector:
    path = Path(path)
    entries = {}
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "# smoothcert-detector v1":
        raise CheckpointError(f"{path}: not a detector manifest")
    for raw in lines[1:]:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}: malformed line {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    try:
        base = path.parent
        classifier = load_model(base / entries["classifier"])
        discriminator = None
        if "discriminator" in entries:
            discriminator = load_model(base / entries["discriminator"])
        den_kind = entries.get("denoiser.kind", "none")
        denoiser, schedule = None, None
        if den_kind != "none":
            schedule = CosineSchedule.create(T=int(entries["schedule.T"]),
                                             s=float(entries["schedule.s"]))
            if den_kind == "learned":
                denoiser = learned_denoiser(
                    load_denoiser(base / entries["denoiser.path"]),
                    skip_var=float(entries["denoiser.skip_var"]),
                    clip_bound=float(entries["denoiser.clip_bound"]))
            else:
                means = np.array([[float(v) for v in row.split(",")]
                                  for row in
                                  entries["denoiser.prior.means"].split(";")])
                weights = np.array([float(v) for v in
                                    entries["denoiser.prior.weights"].split(",")])
                denoiser = analytic_denoiser(MixtureSpec(
                    means=means,
                    cov_scale=float(entries["denoiser.prior.cov_scale"]),
                    weights=weights))
        return JointDetector(
            kind=entries["kind"],
            classifier=classifier,
            class_count=int(entries["classes"]),
            discriminator=discriminator,
            bias_shift=float(entries["bias_shift"]),
            denoiser=denoiser,
            sigma=float(entries["sigma"]),
            schedule=schedule,
            box_bound=float(entries["box"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing manifest key {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
