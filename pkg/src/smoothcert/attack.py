"""Projected gradient ascent with momentum and backtracking.

Maximizes a scalar score inside the l-infinity ball around each input
(intersected with the data box), restarting from an ensemble of points:
the clean input itself, the projection of the box center (the flattest
available start), uniform draws in the ball, and tiny Gaussian jitters.
Each trajectory accepts a candidate only if it strictly increases the
score, halving the step size on rejection and growing it by a factor on
acceptance, so the per-trajectory score is nondecreasing and the best
returned point never falls below the clean score.

Score functions follow the contract ``score_fn(points, stream) ->
(values, grads)`` over row-aligned batches; stochastic pipelines freeze
their internal noise from the given stream, which the engine keeps fixed
per trajectory (one substream per restart index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericFailure
from .mlp import MlpModel, forward_logits, input_grad_from_logit_grad
from .numerics import RngStream
from .synthdata import DEFAULT_BOX, LabeledDataset


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 200
    momentum: float = 0.9
    initial_step: float = 0.1
    shrink: float = 0.5
    grow: float = 1.1
    uniform_starts: int = 3
    gaussian_starts: int = 3
    gaussian_start_sigma: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.shrink < 1 < self.grow:
            raise ValueError("need 0 < shrink < 1 < grow")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.uniform_starts < 0 or self.gaussian_starts < 0:
            raise ValueError("start counts must be >= 0")

    @property
    def start_count(self) -> int:
        return 2 + self.uniform_starts + self.gaussian_starts


def _project(points: np.ndarray, centers: np.ndarray, epsilon: float,
             box_bound: float) -> np.ndarray:
    clipped = np.clip(points, centers - epsilon, centers + epsilon)
    return np.clip(clipped, -box_bound, box_bound)


def starting_points_batch(z: np.ndarray, config: AttackConfig,
                          stream: RngStream,
                          box_bound: float = DEFAULT_BOX) -> np.ndarray:
    """All restart points for a batch of inputs, shape (starts, n, d).

    Start 0 is the clean input itself (it guarantees the attacked score
    never drops below the clean score); start 1 projects the box center
    onto the ball (the decontrast start); then uniform ball draws and
    Gaussian-jittered copies.  Every start lies in the ball and the box.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if np.any(np.abs(z) > box_bound + 1e-12):
        raise ValueError("inputs must lie inside the data box")
    n, d = z.shape
    eps = config.epsilon
    starts = [z.copy(), _project(np.zeros_like(z), z, eps, box_bound)]
    for r in range(config.uniform_starts):
        gen = stream.child(1, r).generator()
        starts.append(_project(z + gen.uniform(-eps, eps, size=(n, d)),
                               z, eps, box_bound))
    for r in range(config.gaussian_starts):
        gen = stream.child(2, r).generator()
        jitter = config.gaussian_start_sigma * gen.standard_normal((n, d))
        starts.append(_project(z + jitter, z, eps, box_bound))
    return np.stack(starts)


def starting_points(z: np.ndarray, config: AttackConfig, stream: RngStream,
                    box_bound: float = DEFAULT_BOX) -> np.ndarray:
    """Restart ensemble for a single input, shape (starts, d)."""
    return starting_points_batch(z[None, :], config, stream, box_bound)[:, 0]


def pgd_maximize_batch(score_fn, z: np.ndarray, config: AttackConfig,
                       stream: RngStream, box_bound: float = DEFAULT_BOX):
    """Run the restart ensemble for every row of z simultaneously.

    Returns (adversarial points (n, d), scores (n,)).  Trajectory r of
    every point uses the frozen substream stream.child(0, r); the clean
    trajectory is r = 0, so its starting value is exactly the clean
    score under stream.child(0, 0).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, d = z.shape
    all_starts = starting_points_batch(z, config, stream, box_bound)
    best_x = z.copy()
    best_v = np.full(n, -np.inf)
    for r in range(len(all_starts)):
        traj_stream = stream.child(0, r)
        x = all_starts[r].copy()
        vals, grads = _checked(score_fn(x, traj_stream), n, d, r)
        velocity = np.zeros_like(x)
        eta = np.full(n, config.initial_step)
        for _ in range(config.steps):
            velocity = config.momentum * velocity + grads
            cand = _project(x + eta[:, None] * np.sign(velocity), z,
                            config.epsilon, box_bound)
            cand_vals, cand_grads = _checked(score_fn(cand, traj_stream),
                                             n, d, r)
            improved = cand_vals > vals
            x[improved] = cand[improved]
            vals = np.where(improved, cand_vals, vals)
            grads[improved] = cand_grads[improved]
            eta = np.where(improved, eta * config.grow, eta * config.shrink)
        take = vals > best_v
        best_x[take] = x[take]
        best_v = np.where(take, vals, best_v)
    return best_x, best_v


def _checked(result, n: int, d: int, start_index: int):
    try:
        vals, grads = result
        vals = np.asarray(vals, dtype=float).reshape(n)
        grads = np.asarray(grads, dtype=float).reshape(n, d)
    except Exception as exc:
        raise NumericFailure(
            f"score function failed at start {start_index}: {exc}") from exc
    if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(grads))):
        raise NumericFailure(
            f"non-finite score or gradient at start {start_index}")
    return vals, grads


def pgd_maximize(score_fn, z: np.ndarray, config: AttackConfig,
                 stream: RngStream, box_bound: float = DEFAULT_BOX):
    """Single-point convenience wrapper; returns (z_adv, score)."""
    pts, vals = pgd_maximize_batch(score_fn, np.asarray(z, float)[None, :],
                                   config, stream, box_bound)
    return pts[0], float(vals[0])


def margin_score_fn(model: MlpModel, labels: np.ndarray):
    """Score whose positivity means misclassification: best wrong logit
    minus the true logit, with its exact input gradient."""
    labels = np.asarray(labels, dtype=int)

    def fn(points, stream):
        logits = forward_logits(model, points)
        rows = np.arange(len(points))
        masked = logits.copy()
        masked[rows, labels] = -np.inf
        wrong = masked.argmax(axis=1)
        vals = logits[rows, wrong] - logits[rows, labels]
        glogits = np.zeros_like(logits)
        glogits[rows, wrong] += 1.0
        glogits[rows, labels] -= 1.0
        grads = input_grad_from_logit_grad(model, points, glogits)
        return vals, grads

    return fn


def attack_id_accuracy(model: MlpModel, dataset: LabeledDataset,
                       config: AttackConfig,
                       box_bound: float = DEFAULT_BOX) -> float:
    """Fraction of points whose prediction survives the margin attack."""
    fn = margin_score_fn(model, dataset.labels)
    _, scores = pgd_maximize_batch(fn, dataset.points, config,
                                   RngStream(config.seed), box_bound)
    return float((scores < 0).mean())
