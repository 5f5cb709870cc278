"""Monte-Carlo randomized smoothing and the certified confidence bound.

The smoothed classifier is G(x) = E_{delta ~ N(0, sigma^2 I)}[F(x + delta)].
If its top-class probability p exceeds 1/2, the prediction persists for
every ||delta||_2 < sigma * PhiInv(p), and the smoothed max-confidence
inside that ball is bounded by sqrt(2/pi) * PhiInv(p) + p (a consequence
of G being sqrt(2/(pi sigma^2))-Lipschitz in l2).  In practice p is the
top-class vote probability, lower-bounded by a one-sided Clopper-Pearson
test; samples that fail p > 1/2 abstain and score 0 downstream.

Base classifiers are callables ``F(points, stream) -> (m, K) simplex
rows``; stochastic pipelines draw their internal noise from the given
substream, so results are bit-identical at any parallelism degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import Abstain, ContractViolation
from .numerics import (
    RngStream,
    clamp_probability,
    clopper_pearson_lower,
    gaussian_noise_matrix,
    std_normal_quantile,
)

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    n_samples: int = 10_000
    alpha: float = 0.001
    batch_size: int = 1_000

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.n_samples < 100:
            raise ValueError(f"n_samples must be >= 100, got {self.n_samples}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def for_linf(cls, epsilon: float, dim: int, **kwargs) -> "SmoothingConfig":
        """Translate an l-infinity budget: sigma = sqrt(d) * epsilon."""
        return cls(sigma=math.sqrt(dim) * epsilon, **kwargs)


@dataclass(frozen=True)
class CertifiedScore:
    """Certification outcome for one input point.

    ``certified`` iff p_lower > 1/2; an abstaining point carries zero
    radius and a zero score so downstream metrics never read a bound
    that does not hold.
    """

    p_lower: float
    radius: float
    upper_bound: float
    certified: bool
    top_class: int

    def __post_init__(self):
        if self.certified != (self.p_lower > 0.5):
            raise ValueError("certified flag inconsistent with p_lower")
        if not self.certified and (self.radius != 0.0
                                   or self.upper_bound != 0.0):
            raise ValueError("abstaining score must have zero radius/bound")

    @property
    def score(self) -> float:
        """The certified confidence bound, 0 on abstention."""
        return self.upper_bound if self.certified else 0.0


def lipschitz_constant(sigma: float) -> float:
    """The l2 Lipschitz constant sqrt(2 / (pi sigma^2)) of the smoothing."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return math.sqrt(2.0 / (math.pi * sigma * sigma))


def certify_radius(p: float, sigma: float) -> float:
    """Certified l2 radius sigma * PhiInv(p); abstains at p <= 1/2."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if p <= 0.5:
        raise Abstain(f"top-class probability {p} <= 1/2")
    return sigma * std_normal_quantile(clamp_probability(p))


def certified_confidence_upper(p: float) -> float:
    """Certified bound sqrt(2/pi) * PhiInv(p) + p on the smoothed
    max-confidence within the certified radius.

    Not clamped to 1: the bound may exceed 1 and is used as a score.
    """
    if p <= 0.5:
        raise Abstain(f"top-class probability {p} <= 1/2")
    p = clamp_probability(p)
    return SQRT_2_OVER_PI * std_normal_quantile(p) + p


def _batch_sizes(n_samples: int, batch_size: int):
    full, rem = divmod(n_samples, batch_size)
    sizes = [batch_size] * full
    if rem:
        sizes.append(rem)
    return sizes


def _check_simplex(probs: np.ndarray, k: int | None) -> int:
    if probs.ndim != 2:
        raise ContractViolation("base classifier must return (m, K) rows")
    if k is not None and probs.shape[1] != k:
        raise ContractViolation("base classifier changed its class count")
    if np.any(probs < -1e-9) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-6):
        raise ContractViolation("base classifier output is not a simplex row")
    return probs.shape[1]


def estimate_smoothed_probs(F, x: np.ndarray, cfg: SmoothingConfig,
                            stream: RngStream) -> np.ndarray:
    """Empirical mean of F(x + delta) over cfg.n_samples Gaussian draws."""
    x = np.asarray(x, dtype=float)
    total, k = None, None
    for j, size in enumerate(_batch_sizes(cfg.n_samples, cfg.batch_size)):
        sub = stream.child(j)
        noise = gaussian_noise_matrix(sub.child(0), size, x.size, cfg.sigma)
        probs = np.asarray(F(x[None, :] + noise, sub.child(1)), dtype=float)
        k = _check_simplex(probs, k)
        total = probs.sum(axis=0) if total is None else total + probs.sum(axis=0)
    return total / cfg.n_samples


def smoothed_vote_counts(F, x: np.ndarray, cfg: SmoothingConfig,
                         stream: RngStream) -> np.ndarray:
    """Hard-classifier votes: counts of argmax F(x + delta) per class."""
    x = np.asarray(x, dtype=float)
    counts, k = None, None
    for j, size in enumerate(_batch_sizes(cfg.n_samples, cfg.batch_size)):
        sub = stream.child(j)
        noise = gaussian_noise_matrix(sub.child(0), size, x.size, cfg.sigma)
        probs = np.asarray(F(x[None, :] + noise, sub.child(1)), dtype=float)
        k = _check_simplex(probs, k)
        if counts is None:
            counts = np.zeros(k, dtype=int)
        counts += np.bincount(probs.argmax(axis=1), minlength=k)
    return counts


def certified_ood_score(F, x: np.ndarray, cfg: SmoothingConfig,
                        stream: RngStream) -> CertifiedScore:
    """Certify one point: vote counting, Clopper-Pearson, then the bound.

    A single sample set both selects the top class and bounds its
    probability; the conservative failure mode (certifying a non-modal
    class with probability <= alpha) is accepted.
    """
    counts = smoothed_vote_counts(F, x, cfg, stream)
    top = int(counts.argmax())
    p_lower = clopper_pearson_lower(int(counts[top]), cfg.n_samples, cfg.alpha)
    if p_lower <= 0.5:
        return CertifiedScore(p_lower=p_lower, radius=0.0, upper_bound=0.0,
                              certified=False, top_class=top)
    return CertifiedScore(p_lower=p_lower,
                          radius=certify_radius(p_lower, cfg.sigma),
                          upper_bound=certified_confidence_upper(p_lower),
                          certified=True, top_class=top)


def deterministic_classifier(fn):
    """Adapt a plain ``points -> probs`` function to the (points, stream)
    base-classifier contract."""
    return lambda points, stream: fn(points)
