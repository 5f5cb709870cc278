"""Experiment configuration: flat ``key = value`` text with dotted keys.

Unknown keys, unparseable values, and invalid geometry raise
:class:`ConfigError` naming the offending key path.  A profile switch
toggles the Monte-Carlo sample count and attack step count between the
quick desk setting and the full protocol; explicit config values win
over the profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .errors import ConfigError
from .mlp import TrainConfig
from .smoothing import SmoothingConfig
from .synthdata import (
    DEFAULT_BOX,
    OOD_FAMILIES,
    MixtureSpec,
    OodParams,
    default_geometry,
    ood_params_for,
)

PROFILES = ("quick", "paper-protocol")

# profile-controlled values: (n_samples, attack steps)
_PROFILE_SETTINGS = {"quick": (2000, 50), "paper-protocol": (10000, 200)}


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s: str) -> tuple:
    return tuple(float(v.strip()) for v in s.split(",") if v.strip())


def _parse_str_list(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _parse_delta(s: str):
    return "auto" if s.strip() == "auto" else float(s)


@dataclass
class ExperimentConfig:
    # data geometry
    dim: int = 2
    classes: int = 4
    mean_radius: float = 2.0
    cov_scale: float = 0.15
    box: float = DEFAULT_BOX
    n_train: int = 2000
    n_test: int = 1000
    n_ood: int = 1000
    data_seed: int = 7
    families: tuple = OOD_FAMILIES
    oe_family: str = "uniform_box"
    # classifier training
    train_epochs: int = 200
    train_batch_size: int = 128
    train_lr: float = 0.05
    train_momentum: float = 0.9
    oe_weight: float = 0.5
    train_seed: int = 11
    # discriminator training
    disc_epochs: int = 300
    disc_lr: float = 0.05
    disc_epsilon: float = 0.1
    disc_seed: int = 13
    disc_hidden: tuple = (32, 32)
    # denoiser
    denoiser_kind: str = "analytic"
    denoiser_epochs: int = 600
    denoiser_lr: float = 0.05
    denoiser_seed: int = 17
    # detector composition
    delta: object = "auto"
    pipelines: tuple = ("plain", "oe", "prood_like", "distro")
    # smoothing certification
    sigma: float = 0.12
    id_sigmas: tuple = (0.12, 0.25)
    n_samples: int | None = None          # None -> profile decides
    alpha: float = 0.001
    batch_size: int = 1000
    # attacks
    ood_epsilon: float = 0.1
    id_epsilons: tuple = (0.05, 0.1)
    attack_steps: int | None = None       # None -> profile decides
    attack_momentum: float = 0.9
    initial_step: float = 0.1
    shrink: float = 0.5
    grow: float = 1.1
    uniform_starts: int = 3
    gaussian_starts: int = 3
    gaussian_start_sigma: float = 1e-4
    attack_seed: int = 19
    # evaluation
    eval_seed: int = 23
    l2_id_side: str = "certified"
    # scale sweep
    beta_min: float = 1.0
    beta_max: float = 1000.0
    sweep_points: int = 30
    sweep_sample_index: int = 0
    # kde
    kde_bandwidth: float = 1.0
    kde_grid_min: float = -4.0
    kde_grid_max: float = 6.0
    kde_points: int = 201
    kde_pipeline: str = "distro"
    # output
    output_dir: str = "out"
    # resolved profile values
    profile: str = "paper-protocol"
    _explicit: set = field(default_factory=set, repr=False)


# key path -> (attribute, parser)
_KEY_SPECS = {
    "data.dim": ("dim", int),
    "data.classes": ("classes", int),
    "data.mean_radius": ("mean_radius", float),
    "data.cov_scale": ("cov_scale", float),
    "data.box": ("box", float),
    "data.n_train": ("n_train", int),
    "data.n_test": ("n_test", int),
    "data.n_ood": ("n_ood", int),
    "data.seed": ("data_seed", int),
    "data.families": ("families", _parse_str_list),
    "data.oe_family": ("oe_family", str),
    "train.epochs": ("train_epochs", int),
    "train.batch_size": ("train_batch_size", int),
    "train.lr": ("train_lr", float),
    "train.momentum": ("train_momentum", float),
    "train.oe_weight": ("oe_weight", float),
    "train.seed": ("train_seed", int),
    "disc.epochs": ("disc_epochs", int),
    "disc.lr": ("disc_lr", float),
    "disc.epsilon": ("disc_epsilon", float),
    "disc.seed": ("disc_seed", int),
    "denoiser.kind": ("denoiser_kind", str),
    "denoiser.epochs": ("denoiser_epochs", int),
    "denoiser.lr": ("denoiser_lr", float),
    "denoiser.seed": ("denoiser_seed", int),
    "detector.delta": ("delta", _parse_delta),
    "pipelines": ("pipelines", _parse_str_list),
    "smoothing.sigma": ("sigma", float),
    "smoothing.id_sigmas": ("id_sigmas", _parse_float_list),
    "smoothing.n_samples": ("n_samples", int),
    "smoothing.alpha": ("alpha", float),
    "smoothing.batch_size": ("batch_size", int),
    "attack.ood_epsilon": ("ood_epsilon", float),
    "attack.id_epsilons": ("id_epsilons", _parse_float_list),
    "attack.steps": ("attack_steps", int),
    "attack.momentum": ("attack_momentum", float),
    "attack.initial_step": ("initial_step", float),
    "attack.shrink": ("shrink", float),
    "attack.grow": ("grow", float),
    "attack.uniform_starts": ("uniform_starts", int),
    "attack.gaussian_starts": ("gaussian_starts", int),
    "attack.gaussian_start_sigma": ("gaussian_start_sigma", float),
    "attack.seed": ("attack_seed", int),
    "eval.seed": ("eval_seed", int),
    "eval.l2_id_side": ("l2_id_side", str),
    "sweep.beta_min": ("beta_min", float),
    "sweep.beta_max": ("beta_max", float),
    "sweep.points": ("sweep_points", int),
    "sweep.sample_index": ("sweep_sample_index", int),
    "kde.bandwidth": ("kde_bandwidth", float),
    "kde.grid_min": ("kde_grid_min", float),
    "kde.grid_max": ("kde_grid_max", float),
    "kde.points": ("kde_points", int),
    "kde.pipeline": ("kde_pipeline", str),
    "output_dir": ("output_dir", str),
}

_KNOWN_KINDS = ("plain", "oe", "prood_like", "distro")


def load_config(path=None, profile: str = "paper-protocol",
                overrides: dict | None = None) -> ExperimentConfig:
    """Parse a config file (or just defaults), apply the profile, validate."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = ExperimentConfig(profile=profile)
    if path is not None:
        _apply_file(cfg, Path(path))
    for key, value in (overrides or {}).items():
        _apply_entry(cfg, key, value, origin="override")
    n_samples, steps = _PROFILE_SETTINGS[profile]
    if cfg.n_samples is None:
        cfg.n_samples = n_samples
    if cfg.attack_steps is None:
        cfg.attack_steps = steps
    _validate(cfg)
    return cfg


def _apply_file(cfg: ExperimentConfig, path: Path) -> None:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _apply_entry(cfg, key, value, origin=f"{path}:{lineno}")


def _apply_entry(cfg: ExperimentConfig, key: str, value: str,
                 origin: str) -> None:
    if key not in _KEY_SPECS:
        raise ConfigError(f"{origin}: unknown config key {key!r}")
    attr, parser = _KEY_SPECS[key]
    try:
        setattr(cfg, attr, parser(value))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{origin}: bad value for {key}: {exc}") from exc
    cfg._explicit.add(key)


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _validate(cfg: ExperimentConfig) -> None:
    _require(cfg.dim >= 2, "data.dim", "must be >= 2")
    _require(cfg.classes >= 2, "data.classes", "must be >= 2")
    _require(cfg.cov_scale > 0, "data.cov_scale", "must be > 0")
    _require(cfg.mean_radius > 0, "data.mean_radius", "must be > 0")
    _require(cfg.box > cfg.mean_radius, "data.box",
             "must exceed data.mean_radius")
    for n_key, n_val in (("data.n_train", cfg.n_train),
                         ("data.n_test", cfg.n_test),
                         ("data.n_ood", cfg.n_ood)):
        _require(n_val >= 1, n_key, "must be >= 1")
    for fam in cfg.families:
        _require(fam in OOD_FAMILIES, "data.families",
                 f"unknown family {fam!r}")
    _require(cfg.oe_family in OOD_FAMILIES, "data.oe_family",
             f"unknown family {cfg.oe_family!r}")
    _require(cfg.denoiser_kind in ("analytic", "learned"), "denoiser.kind",
             "must be analytic or learned")
    for kind in cfg.pipelines:
        _require(kind in _KNOWN_KINDS, "pipelines",
                 f"unknown pipeline {kind!r}")
    _require(cfg.kde_pipeline in _KNOWN_KINDS, "kde.pipeline",
             f"unknown pipeline {cfg.kde_pipeline!r}")
    _require(cfg.sigma > 0, "smoothing.sigma", "must be > 0")
    for s in cfg.id_sigmas:
        _require(s > 0, "smoothing.id_sigmas", "entries must be > 0")
    _require(cfg.n_samples >= 100, "smoothing.n_samples", "must be >= 100")
    _require(0 < cfg.alpha < 1, "smoothing.alpha", "must be in (0, 1)")
    _require(cfg.ood_epsilon >= 0, "attack.ood_epsilon", "must be >= 0")
    for e in cfg.id_epsilons:
        _require(e >= 0, "attack.id_epsilons", "entries must be >= 0")
    _require(cfg.attack_steps >= 1, "attack.steps", "must be >= 1")
    _require(cfg.l2_id_side in ("certified", "clean"), "eval.l2_id_side",
             "must be certified or clean")
    _require(0 < cfg.beta_min <= cfg.beta_max, "sweep.beta_min",
             "need 0 < beta_min <= beta_max")
    _require(cfg.sweep_points >= 2, "sweep.points", "must be >= 2")
    _require(cfg.kde_bandwidth > 0, "kde.bandwidth", "must be > 0")
    _require(cfg.kde_points >= 2, "kde.points", "must be >= 2")
    _require(cfg.kde_grid_min < cfg.kde_grid_max, "kde.grid_min",
             "must be below kde.grid_max")


def mixture_spec(cfg: ExperimentConfig) -> MixtureSpec:
    return default_geometry(dim=cfg.dim, classes=cfg.classes,
                            radius=cfg.mean_radius, cov_scale=cfg.cov_scale)


def ood_params(cfg: ExperimentConfig) -> OodParams:
    return ood_params_for(mixture_spec(cfg), box=cfg.box)


def smoothing_config(cfg: ExperimentConfig,
                     sigma: float | None = None) -> SmoothingConfig:
    try:
        return SmoothingConfig(sigma=cfg.sigma if sigma is None else sigma,
                               n_samples=cfg.n_samples, alpha=cfg.alpha,
                               batch_size=cfg.batch_size)
    except ValueError as exc:
        raise ConfigError(f"smoothing: {exc}") from exc


def attack_config(cfg: ExperimentConfig, epsilon: float) -> AttackConfig:
    try:
        return AttackConfig(epsilon=epsilon, steps=cfg.attack_steps,
                            momentum=cfg.attack_momentum,
                            initial_step=cfg.initial_step, shrink=cfg.shrink,
                            grow=cfg.grow, uniform_starts=cfg.uniform_starts,
                            gaussian_starts=cfg.gaussian_starts,
                            gaussian_start_sigma=cfg.gaussian_start_sigma,
                            seed=cfg.attack_seed)
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from exc


def classifier_train_config(cfg: ExperimentConfig,
                            with_oe: bool) -> TrainConfig:
    return TrainConfig(epochs=cfg.train_epochs,
                       batch_size=cfg.train_batch_size,
                       learning_rate=cfg.train_lr,
                       momentum=cfg.train_momentum,
                       oe_weight=cfg.oe_weight if with_oe else 0.0,
                       seed=cfg.train_seed)


def resolved_delta(cfg: ExperimentConfig) -> float:
    from .detector import default_bias_shift
    if cfg.delta == "auto":
        return default_bias_shift(cfg.classes)
    return float(cfg.delta)


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def models_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "models"


def reports_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "reports"
