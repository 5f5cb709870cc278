"""Desk-scale dataset generation.

In-distribution data is a labeled isotropic Gaussian mixture (components
on a circle by default); out-of-distribution data comes from six
families that, at default geometry, place no mass inside the mixture's
3-sigma cores.  All generation is deterministic given an RngStream and
order-stable.  Every point is clipped to the global input box
[-box, box]^d so attacks and interval bounds share one domain.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .fileio import atomic_write_text
from .numerics import RngStream

DEFAULT_BOX = 6.0

OOD_FAMILIES = ("annulus", "uniform_box", "far_gaussian", "shifted_mixture",
                "gaussian_noise", "uniform_noise")


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture: one component per class."""

    means: np.ndarray        # (K, d)
    cov_scale: float         # per-component isotropic standard deviation
    weights: np.ndarray      # (K,), sums to 1

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)
        if not np.all(np.isfinite(means)):
            raise ValueError("mixture means must be finite")
        if not self.cov_scale > 0 and self.cov_scale != 0.0:
            raise ValueError(f"cov_scale must be >= 0, got {self.cov_scale}")
        if weights.shape != (means.shape[0],):
            raise ValueError("one weight per component required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def class_count(self) -> int:
        return self.means.shape[0]


def default_geometry(dim: int = 2, classes: int = 4, radius: float = 2.0,
                     cov_scale: float = 0.15) -> MixtureSpec:
    """Component means evenly spaced on a circle in the first two axes."""
    if dim < 2:
        raise ValueError("default geometry needs dim >= 2")
    angles = 2.0 * math.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    weights = np.full(classes, 1.0 / classes)
    return MixtureSpec(means=means, cov_scale=cov_scale, weights=weights)


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray   # (n, d)
    labels: np.ndarray   # (n,), ints in [0, K)

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        if len(points) != len(labels):
            raise ValueError("points and labels must have equal length")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OodDataset:
    points: np.ndarray   # (n, d)
    family: str

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", points)
        if self.family not in OOD_FAMILIES:
            raise ValueError(f"unknown OOD family {self.family!r}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OodParams:
    """Family parameters plus the shared keep-out zone and input box.

    Any draw landing within ``exclude_radius`` of an excluded center is
    resampled, which is what keeps the default families disjoint from
    the in-distribution cores.
    """

    box: float = DEFAULT_BOX
    inner_radius: float = 3.0            # annulus
    outer_radius: float = 4.0
    half_width: float = 5.0              # uniform_box
    center: np.ndarray | None = None     # far_gaussian
    far_sigma: float = 0.3
    means: np.ndarray | None = None      # shifted_mixture
    cov_scale: float = 0.15
    noise_sigma: float = 1.0             # gaussian_noise
    exclude_centers: np.ndarray | None = None
    exclude_radius: float = 0.0


def default_ood_params(spec: MixtureSpec, box: float = DEFAULT_BOX) -> OodParams:
    """Default family parameters tied to an ID geometry.

    The shifted mixture rotates the ID means by half the angular class
    spacing; the far Gaussian sits at radius 4.5 along the diagonal; the
    keep-out zone is the union of the ID components' 3-sigma cores.
    """
    d = spec.dim
    k = spec.class_count
    theta = math.pi / k
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    shifted = spec.means.copy()
    shifted[:, :2] = spec.means[:, :2] @ rot.T
    center = np.full(d, 4.5 / math.sqrt(d))
    return OodParams(box=box, means=shifted, cov_scale=spec.cov_scale,
                     center=center, exclude_centers=spec.means.copy(),
                     exclude_radius=3.0 * spec.cov_scale)


def sample_id(spec: MixtureSpec, n: int, stream: RngStream,
              box: float = DEFAULT_BOX) -> LabeledDataset:
    """Draw n labeled points from the mixture, clipped to the input box."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    labels = stream.child(0).generator().choice(
        spec.class_count, size=n, p=spec.weights)
    noise = stream.child(1).generator().standard_normal((n, spec.dim))
    points = spec.means[labels] + spec.cov_scale * noise
    np.clip(points, -box, box, out=points)
    return LabeledDataset(points=points, labels=labels)


def sample_ood(family: str, dim: int, n: int, params: OodParams,
               stream: RngStream) -> OodDataset:
    """Draw n points from one OOD family, resampling keep-out violations."""
    if family not in OOD_FAMILIES:
        raise ValueError(f"unknown OOD family {family!r}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    _validate_params(family, dim, params)

    points = _draw_family(family, dim, n, params, stream.child(0))
    if params.exclude_centers is not None and params.exclude_radius > 0:
        centers = np.atleast_2d(params.exclude_centers)
        for round_idx in range(1, 1001):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            bad = (d2 < params.exclude_radius ** 2).any(axis=1)
            if not bad.any():
                break
            redraw = _draw_family(family, dim, int(bad.sum()), params,
                                  stream.child(round_idx))
            points[bad] = redraw
        else:
            raise ValueError(
                f"keep-out resampling did not converge for {family}")
    np.clip(points, -params.box, params.box, out=points)
    return OodDataset(points=points, family=family)


def _validate_params(family: str, dim: int, p: OodParams) -> None:
    if family == "annulus" and not 0 <= p.inner_radius < p.outer_radius:
        raise ValueError("annulus requires 0 <= inner_radius < outer_radius")
    if family == "uniform_box" and not p.half_width > 0:
        raise ValueError("uniform_box requires half_width > 0")
    if family == "gaussian_noise" and not p.noise_sigma > 0:
        raise ValueError("gaussian_noise requires noise_sigma > 0")
    if family == "far_gaussian":
        if p.center is None or len(np.asarray(p.center)) != dim:
            raise ValueError("far_gaussian requires a center of length dim")
    if family == "shifted_mixture":
        if p.means is None or np.atleast_2d(p.means).shape[1] != dim:
            raise ValueError("shifted_mixture requires means of width dim")


def _draw_family(family: str, dim: int, n: int, p: OodParams,
                 stream: RngStream) -> np.ndarray:
    gen = stream.generator()
    if family == "annulus":
        direction = gen.standard_normal((n, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = gen.uniform(p.inner_radius, p.outer_radius, size=n)
        return direction * radius[:, None]
    if family == "uniform_box":
        return gen.uniform(-p.half_width, p.half_width, size=(n, dim))
    if family == "far_gaussian":
        return np.asarray(p.center, float) + p.far_sigma * gen.standard_normal((n, dim))
    if family == "shifted_mixture":
        means = np.atleast_2d(np.asarray(p.means, float))
        comp = gen.integers(0, len(means), size=n)
        return means[comp] + p.cov_scale * gen.standard_normal((n, dim))
    if family == "gaussian_noise":
        return p.noise_sigma * gen.standard_normal((n, dim))
    if family == "uniform_noise":
        return gen.uniform(-p.box, p.box, size=(n, dim))
    raise ValueError(f"unknown OOD family {family!r}")


_HEADER_RE = re.compile(
    r"^# smoothcert-data v1 dim=(\d+) kind=(id|ood) family=(\w+)$")


def save_csv(dataset: LabeledDataset | OodDataset, path) -> None:
    """Persist a dataset; 17 significant digits round-trip float64 exactly."""
    path = Path(path)
    is_id = isinstance(dataset, LabeledDataset)
    kind = "id" if is_id else "ood"
    family = "mixture" if is_id else dataset.family
    dim = dataset.points.shape[1]
    lines = [f"# smoothcert-data v1 dim={dim} kind={kind} family={family}"]
    for i, point in enumerate(dataset.points):
        cells = [f"{v:.17g}" for v in point]
        if is_id:
            cells.append(str(int(dataset.labels[i])))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_csv(path) -> LabeledDataset | OodDataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(f"{path}: empty file, missing header")
    m = _HEADER_RE.match(lines[0].strip())
    if m is None:
        raise DataFormatError(f"{path}: line 1: bad header {lines[0]!r}")
    dim, kind, family = int(m.group(1)), m.group(2), m.group(3)
    expected_cols = dim + 1 if kind == "id" else dim

    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != expected_cols:
            raise DataFormatError(
                f"{path}: line {lineno}: expected {expected_cols} columns, "
                f"got {len(cells)}")
        try:
            values = [float(c) for c in cells[:dim]]
            if kind == "id":
                labels.append(int(cells[dim]))
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
        rows.append(values)

    points = np.array(rows, dtype=float).reshape(len(rows), dim)
    if kind == "id":
        return LabeledDataset(points=points, labels=np.array(labels, int))
    return OodDataset(points=points, family=family)


def ood_params_for(spec: MixtureSpec, box: float = DEFAULT_BOX,
                   **overrides) -> OodParams:
    """Default params with field overrides (convenience for configs)."""
    return replace(default_ood_params(spec, box=box), **overrides)
