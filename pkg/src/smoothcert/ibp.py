"""Interval bound propagation through affine/ReLU stacks.

Sound elementwise bounds for l-infinity balls (intersected with the
global input box), the certified worst-case discriminator logit, and the
IBP training loss whose OOD term penalizes that worst case.  Gradients
of the bound network are exact: the composition of affine interval
arithmetic and ReLU clamping is itself piecewise linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingDiverged
from .mlp import MlpModel, TrainConfig, _SgdState, init_model
from .numerics import RngStream
from .synthdata import DEFAULT_BOX


@dataclass(frozen=True)
class IntervalBox:
    """Elementwise activation bounds, lower <= upper."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape:
            raise ValueError("bound shape mismatch")
        if np.any(lower > upper + 1e-15):
            raise ValueError("lower bound exceeds upper bound")


def propagate_affine(box: IntervalBox, weights: np.ndarray,
                     bias: np.ndarray) -> IntervalBox:
    """Exact interval image of an affine map: center/radius arithmetic."""
    w = np.asarray(weights, dtype=float)
    b = np.asarray(bias, dtype=float)
    if w.shape[1] != box.lower.shape[-1]:
        raise ValueError(f"weights expect dim {w.shape[1]}, "
                         f"box has {box.lower.shape[-1]}")
    center = 0.5 * (box.lower + box.upper)
    radius = 0.5 * (box.upper - box.lower)
    mu = center @ w.T + b
    rad = radius @ np.abs(w).T
    return IntervalBox(lower=mu - rad, upper=mu + rad)


def propagate_relu(box: IntervalBox) -> IntervalBox:
    return IntervalBox(lower=np.maximum(box.lower, 0.0),
                       upper=np.maximum(box.upper, 0.0))


def propagate_network(model: MlpModel, box: IntervalBox) -> IntervalBox:
    """Bounds on the network output over the input box."""
    out = box
    last = model.layer_count - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        out = propagate_affine(out, w, b)
        if i < last:
            out = propagate_relu(out)
    return out


def input_ball(z: np.ndarray, epsilon: float,
               box_bound: float = DEFAULT_BOX) -> IntervalBox:
    """The l-infinity ball around z intersected with the data box."""
    z = np.asarray(z, dtype=float)
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    lower = np.clip(z - epsilon, -box_bound, box_bound)
    upper = np.clip(z + epsilon, -box_bound, box_bound)
    return IntervalBox(lower=lower, upper=upper)


def discriminator_upper_logit(model: MlpModel, z: np.ndarray, epsilon: float,
                              box_bound: float = DEFAULT_BOX):
    """Sound upper bound on the 1-output logit over the epsilon-ball.

    Accepts a single point (d,) or a batch (n, d).  With epsilon = 0 the
    bound equals the plain forward pass exactly.
    """
    if model.output_dim != 1:
        raise ValueError("discriminator must have exactly one output")
    box = input_ball(z, epsilon, box_bound)
    out = propagate_network(model, box)
    upper = out.upper[..., 0]
    return float(upper) if np.ndim(upper) == 0 else upper


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _ibp_forward_cached(weights, biases, lower, upper):
    """Batched bound propagation keeping pre-ReLU bounds for backward."""
    cache = []
    lo, up = lower, upper
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        c = 0.5 * (lo + up)
        r = 0.5 * (up - lo)
        mu = c @ w.T + b
        rad = r @ np.abs(w).T
        lo_pre, up_pre = mu - rad, mu + rad
        cache.append((c, r, lo_pre, up_pre))
        if i < last:
            lo, up = np.maximum(lo_pre, 0.0), np.maximum(up_pre, 0.0)
        else:
            lo, up = lo_pre, up_pre
    return lo, up, cache


def _ibp_backward(weights, cache, g_lower, g_upper):
    """Parameter gradients of a scalar loss of the output bounds."""
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    gl, gu = g_lower, g_upper
    for i in range(len(weights) - 1, -1, -1):
        c, r, lo_pre, up_pre = cache[i]
        if i < len(weights) - 1:
            gl = gl * (lo_pre > 0.0)
            gu = gu * (up_pre > 0.0)
        w = weights[i]
        g_mu = gl + gu
        g_rad = gu - gl
        grads_w[i] = g_mu.T @ c + np.sign(w) * (g_rad.T @ r)
        grads_b[i] = g_mu.sum(axis=0)
        g_c = g_mu @ w
        g_r = g_rad @ np.abs(w)
        gl = 0.5 * (g_c - g_r)
        gu = 0.5 * (g_c + g_r)
    return grads_w, grads_b


def ibp_training_loss(model: MlpModel, id_batch: np.ndarray,
                      ood_batch: np.ndarray, epsilon: float,
                      box_bound: float = DEFAULT_BOX):
    """Certified binary cross-entropy and its exact parameter gradients.

    ID samples contribute BCE of the plain logit against target 1; OOD
    samples contribute BCE of the IBP worst-case upper logit against
    target 0.  Returns (loss, grads_w, grads_b).
    """
    id_batch = np.atleast_2d(np.asarray(id_batch, dtype=float))
    ood_batch = np.atleast_2d(np.asarray(ood_batch, dtype=float))
    if len(id_batch) == 0 or len(ood_batch) == 0:
        raise ValueError("both batches must be nonempty")
    weights, biases = list(model.weights), list(model.biases)

    # ID path: plain forward (a zero-radius box, reusing the same machinery)
    id_lo, id_up, id_cache = _ibp_forward_cached(weights, biases,
                                                 id_batch, id_batch)
    g_id = id_up[:, 0]
    id_loss = float(_softplus(-g_id).mean())
    gz_id = (sigmoid(g_id) - 1.0)[:, None] / len(id_batch)
    # the degenerate box makes lower == upper; split the upstream evenly
    gw_id, gb_id = _ibp_backward(weights, id_cache, 0.5 * gz_id, 0.5 * gz_id)

    lo0 = np.clip(ood_batch - epsilon, -box_bound, box_bound)
    up0 = np.clip(ood_batch + epsilon, -box_bound, box_bound)
    _, ood_up, ood_cache = _ibp_forward_cached(weights, biases, lo0, up0)
    g_ood = ood_up[:, 0]
    ood_loss = float(_softplus(g_ood).mean())
    gu_ood = sigmoid(g_ood)[:, None] / len(ood_batch)
    gw_ood, gb_ood = _ibp_backward(weights, ood_cache,
                                   np.zeros_like(gu_ood), gu_ood)

    loss = id_loss + ood_loss
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite IBP loss")
    grads_w = [a + b for a, b in zip(gw_id, gw_ood)]
    grads_b = [a + b for a, b in zip(gb_id, gb_ood)]
    return loss, grads_w, grads_b


def train_discriminator(id_points: np.ndarray, ood_points: np.ndarray,
                        cfg: TrainConfig, epsilon: float,
                        box_bound: float = DEFAULT_BOX,
                        hidden: tuple = (32, 32)) -> MlpModel:
    """SGD on the IBP loss with epsilon ramped linearly over the first
    half of training (0 at epoch 0, the target from midway on)."""
    id_points = np.atleast_2d(np.asarray(id_points, dtype=float))
    ood_points = np.atleast_2d(np.asarray(ood_points, dtype=float))
    if len(id_points) == 0 or len(ood_points) == 0:
        raise ValueError("training sets must be nonempty")
    root = RngStream(cfg.seed)
    state = _SgdState(init_model(id_points.shape[1], hidden, 1,
                                 root.child(0)), cfg)
    ramp_epochs = max(1, cfg.epochs // 2)
    n = len(id_points)
    for epoch in range(cfg.epochs):
        eps_now = epsilon * min(1.0, epoch / ramp_epochs)
        perm = root.child(1, epoch).generator().permutation(n)
        ood_perm = root.child(2, epoch).generator().permutation(len(ood_points))
        cursor = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            take = min(len(idx), len(ood_points))
            sel = ood_perm[(cursor + np.arange(take)) % len(ood_points)]
            cursor = (cursor + take) % len(ood_points)
            try:
                loss, gw, gb = ibp_training_loss(state.model(), id_points[idx],
                                                 ood_points[sel], eps_now,
                                                 box_bound)
            except ValueError as exc:
                raise TrainingDiverged(
                    f"parameters diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            state.step(gw, gb)
    return state.model()
