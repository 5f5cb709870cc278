"""Forward diffusion, timestep selection, and one-shot denoising.

The forward process draws x_t = sqrt(alpha_bar_t) x + sqrt(1 -
alpha_bar_t) eps under a cosine schedule.  To denoise Gaussian
perturbations of scale sigma, the timestep is chosen so that (1 -
alpha_bar_t) / alpha_bar_t = sigma^2 and the noisy input is scaled by
sqrt(alpha_bar_t) to match that observation model.  Denoising is a
single step: either the exact posterior mean under the Gaussian-mixture
data prior, or a small learned regressor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, TrainingDiverged
from .fileio import atomic_write_bytes
from .mlp import (
    MAGIC,
    MlpModel,
    TrainConfig,
    _batch_logits,
    _param_grads,
    _SgdState,
    forward_logits,
    init_model,
    input_grad_from_logit_grad,
    model_payload,
    parse_payload,
)
from .numerics import RngStream, gaussian_noise_matrix
from .synthdata import DEFAULT_BOX, LabeledDataset, MixtureSpec

DENOISER_FLAG = b"D"

# the learned denoiser's skip path: isotropic shrinkage toward the box
# center with this fixed prior variance (covers the desk geometry)
SKIP_PRIOR_VAR = 4.0


@dataclass(frozen=True)
class CosineSchedule:
    """alpha_bar[t] = f(t) / f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) pi/2)."""

    T: int
    s: float
    alpha_bar: np.ndarray

    @classmethod
    def create(cls, T: int = 1000, s: float = 0.008) -> "CosineSchedule":
        if T < 1 or not 0 < s < 1:
            raise ValueError("need T >= 1 and 0 < s < 1")
        t = np.arange(T + 1, dtype=float)
        f = np.cos(((t / T + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
        return cls(T=T, s=s, alpha_bar=f / f[0])

    @property
    def noise_ratio(self) -> np.ndarray:
        """(1 - alpha_bar) / alpha_bar per timestep."""
        return (1.0 - self.alpha_bar) / self.alpha_bar


def find_timestep(schedule: CosineSchedule, sigma: float) -> int:
    """The timestep whose noise ratio is nearest sigma^2."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    ratio = schedule.noise_ratio
    target = sigma * sigma
    if target > ratio[-1]:
        raise ValueError(f"sigma {sigma} exceeds the schedule's noise range")
    return int(np.abs(ratio - target).argmin())


def noise_and_scale(x: np.ndarray, sigma: float, schedule: CosineSchedule,
                    stream: RngStream):
    """Perturb by N(0, sigma^2 I) and scale by sqrt(alpha_bar[t*]).

    Returns (x_t, t*).  Accepts one point (d,) or a batch (n, d) with one
    independent draw per row.
    """
    x = np.asarray(x, dtype=float)
    t_star = find_timestep(schedule, sigma)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if sigma == 0.0:
        noisy = batch.copy()
    else:
        noise = gaussian_noise_matrix(stream, len(batch), batch.shape[1], sigma)
        noisy = batch + noise
    x_t = math.sqrt(schedule.alpha_bar[t_star]) * noisy
    return (x_t[0] if single else x_t), t_star


@dataclass(frozen=True)
class DenoiserSpec:
    """Either the analytic posterior mean under a mixture prior, or a
    learned residual regressor over the unscaled observation.

    The learned kind predicts clean = shrink(y) + net([y, t/T]) with
    y the box-clipped unscaled observation and shrink the isotropic
    single-Gaussian pull toward the box center; only the net is
    trainable, so checkpoints carry it alone.
    """

    kind: str                        # "analytic" | "learned"
    prior: MixtureSpec | None = None
    model: MlpModel | None = None
    skip_var: float = SKIP_PRIOR_VAR
    clip_bound: float = DEFAULT_BOX

    def __post_init__(self):
        if self.kind == "analytic":
            if self.prior is None:
                raise ValueError("analytic denoiser requires a prior")
        elif self.kind == "learned":
            if self.model is None:
                raise ValueError("learned denoiser requires a model")
        else:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")


def analytic_denoiser(prior: MixtureSpec) -> DenoiserSpec:
    return DenoiserSpec(kind="analytic", prior=prior)


def learned_denoiser(model: MlpModel, skip_var: float = SKIP_PRIOR_VAR,
                     clip_bound: float = DEFAULT_BOX) -> DenoiserSpec:
    return DenoiserSpec(kind="learned", model=model, skip_var=skip_var,
                        clip_bound=clip_bound)


def _effective_noise(schedule: CosineSchedule, t_star: int):
    ab = float(schedule.alpha_bar[t_star])
    return ab, (1.0 - ab) / ab


def _responsibilities(y: np.ndarray, prior: MixtureSpec, var: float):
    """Posterior component weights of observations y, in log space."""
    d2 = ((y[:, None, :] - prior.means[None, :, :]) ** 2).sum(axis=2)
    log_r = np.log(prior.weights)[None, :] - d2 / (2.0 * var)
    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)
    return r


def denoise_once(spec: DenoiserSpec, x_t: np.ndarray, t_star: int,
                 schedule: CosineSchedule) -> np.ndarray:
    """One-shot estimate of the clean point from the scaled noisy one.

    The analytic kind divides by sqrt(alpha_bar) to recover the unscaled
    observation y = x + eps_eff, then blends the conjugate per-component
    posterior means with the component responsibilities of y.
    """
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    batch = x_t[None, :] if single else x_t
    ab, s2 = _effective_noise(schedule, t_star)
    if s2 == 0.0:
        return x_t.copy()

    if spec.kind == "learned":
        y = np.clip(batch / math.sqrt(ab), -spec.clip_bound, spec.clip_bound)
        skip = (spec.skip_var / (spec.skip_var + s2)) * y
        t_feat = np.full((len(batch), 1), t_star / schedule.T)
        out = skip + forward_logits(spec.model, np.hstack([y, t_feat]))
        return out[0] if single else out

    y = batch / math.sqrt(ab)
    prior = spec.prior
    var = prior.cov_scale ** 2 + s2
    r = _responsibilities(y, prior, var)
    shrink = prior.cov_scale ** 2 / var
    out = shrink * y + (s2 / var) * (r @ prior.means)
    return out[0] if single else out


def denoiser_jacobian(spec: DenoiserSpec, x_t: np.ndarray, t_star: int,
                      schedule: CosineSchedule) -> np.ndarray:
    """Exact Jacobian of denoise_once with respect to x_t, shape (n, d, d).

    The analytic posterior mean is smooth, so the Jacobian is closed
    form; the learned kind backpropagates one pass per output coordinate.
    """
    x_t = np.asarray(x_t, dtype=float)
    batch = x_t[None, :] if x_t.ndim == 1 else x_t
    n, d = batch.shape
    ab, s2 = _effective_noise(schedule, t_star)
    if s2 == 0.0:
        return np.broadcast_to(np.eye(d), (n, d, d)).copy()

    if spec.kind == "learned":
        y_raw = batch / math.sqrt(ab)
        y = np.clip(y_raw, -spec.clip_bound, spec.clip_bound)
        t_feat = np.full((n, 1), t_star / schedule.T)
        inp = np.hstack([y, t_feat])
        shrink = spec.skip_var / (spec.skip_var + s2)
        jac_y = np.empty((n, d, d))
        for i in range(d):
            upstream = np.zeros((n, d))
            upstream[:, i] = 1.0
            jac_y[:, i, :] = input_grad_from_logit_grad(spec.model, inp,
                                                        upstream)[:, :d]
        jac_y += shrink * np.eye(d)
        inside = (np.abs(y_raw) < spec.clip_bound).astype(float)
        return jac_y * inside[:, None, :] / math.sqrt(ab)
    y = batch / math.sqrt(ab)
    prior = spec.prior
    var = prior.cov_scale ** 2 + s2
    r = _responsibilities(y, prior, var)
    shrink = prior.cov_scale ** 2 / var
    comp_term = (s2 / var) * prior.means           # (K, d) blended by r
    g = (prior.means[None, :, :] - y[:, None, :]) / var    # dlog N_j / dy
    g_bar = (r[:, :, None] * g).sum(axis=1)                # (n, d)
    # d out / dy = shrink * I + sum_j (r_j * comp_j) outer (g_j - g_bar)
    diff = g - g_bar[:, None, :]
    jac_y = (np.eye(d) * shrink
             + np.einsum("nk,kd,nke->nde", r, comp_term, diff))
    return jac_y / math.sqrt(ab)


def train_denoiser(data: LabeledDataset, schedule: CosineSchedule,
                   cfg: TrainConfig, hidden: tuple = (64, 64),
                   max_sigma: float = 1.0,
                   skip_var: float = SKIP_PRIOR_VAR,
                   clip_bound: float = DEFAULT_BOX) -> MlpModel:
    """MSE regression of the clean point from its diffused observation.

    Per epoch, every point gets a fresh timestep sampled uniformly over
    the range the denoiser serves (up to max_sigma; beyond it the
    observation carries no usable signal) and fresh forward-process
    noise.  The trained net predicts the correction on top of the fixed
    shrinkage skip, and the learning rate decays by 10x across training.
    """
    if len(data) == 0:
        raise ValueError("training data must be nonempty")
    n, d = data.points.shape
    t_max = find_timestep(schedule, max_sigma)
    root = RngStream(cfg.seed)
    state = _SgdState(init_model(d + 1, hidden, d, root.child(0)), cfg)
    for epoch in range(cfg.epochs):
        state.cfg = TrainConfig(
            epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
            momentum=cfg.momentum, oe_weight=cfg.oe_weight,
            learning_rate=cfg.learning_rate * 0.1 ** (epoch / cfg.epochs))
        gen = root.child(1, epoch).generator()
        perm = gen.permutation(n)
        targets = data.points[perm]
        ts = gen.integers(0, t_max + 1, size=n)
        eps = gen.standard_normal((n, d))
        ab = schedule.alpha_bar[ts][:, None]
        x_t = np.sqrt(ab) * targets + np.sqrt(1.0 - ab) * eps
        y = np.clip(x_t / np.sqrt(ab), -clip_bound, clip_bound)
        s2 = (1.0 - ab) / ab
        skip = (skip_var / (skip_var + s2)) * y
        inputs = np.hstack([y, (ts / schedule.T)[:, None]])
        for start in range(0, n, cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            pred = skip[sl] + _batch_logits(state, inputs[sl])
            resid = pred - targets[sl]
            loss = float((resid ** 2).mean())
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            gz = 2.0 * resid / resid.size
            gw, gb = _param_grads(state, inputs[sl], gz)
            state.step(gw, gb)
    return state.model()


def denoising_mse(spec: DenoiserSpec, clean: np.ndarray, sigma: float,
                  schedule: CosineSchedule, stream: RngStream) -> float:
    """Mean squared reconstruction error on fresh noisy copies."""
    clean = np.atleast_2d(np.asarray(clean, dtype=float))
    x_t, t_star = noise_and_scale(clean, sigma, schedule, stream)
    est = denoise_once(spec, x_t, t_star, schedule)
    return float(((est - clean) ** 2).sum(axis=1).mean())


def save_denoiser(model: MlpModel, path) -> None:
    """Checkpoint format with a denoiser flag byte after the header line."""
    atomic_write_bytes(path, MAGIC + DENOISER_FLAG + model_payload(model))


def load_denoiser(path) -> MlpModel:
    buf = Path(path).read_bytes()
    header = MAGIC + DENOISER_FLAG
    if len(buf) < len(header) or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad denoiser magic")
    if buf[len(MAGIC):len(header)] != DENOISER_FLAG:
        raise CheckpointError(f"{path}: missing denoiser flag byte")
    return parse_payload(buf[len(header):], str(path))
