"""Command-line driver: smoothcert generate|train|certify|attack|evaluate|
scale-sweep|kde --config <path> [--profile quick|paper-protocol].

Exit codes: 0 success, 2 configuration or environment error, 3 invariant
violation (e.g. the metric ordering chain), 4 numeric failure.

Everything downstream of the config is seeded, so reruns with the same
config produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .attack import pgd_maximize_batch
from .detector import (
    JointDetector,
    joint_confidence,
    joint_msp_score_fn,
    load_detector,
    pipeline_margin_score_fn,
    save_detector,
    scale_sweep,
)
from .diffusion import CosineSchedule, analytic_denoiser, learned_denoiser, train_denoiser
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    InvariantViolation,
    NumericFailure,
    SmoothcertError,
)
from .fileio import atomic_write_text
from .ibp import train_discriminator
from .metrics import (
    ScoreSet,
    certify_points,
    guaranteed_scores_linf,
    scoreset_metrics,
    validate_ordering,
)
from .mlp import TrainConfig, train_classifier
from .numerics import RngStream, gaussian_kde
from .report import (
    EvalReport,
    write_id_accuracy_csv,
    write_report_csv,
    write_report_markdown,
)
from .synthdata import load_csv, sample_id, sample_ood, save_csv

PIPE_INDEX = {"plain": 0, "oe": 1, "prood_like": 2, "distro": 3}

CERTIFY_HEADER = "point_id,side,p_lower,radius,certified_score,certified"
ATTACK_HEADER = "point_id,side,clean_score,attacked_score"
SWEEP_HEADER = "beta,pipeline,msp,energy"
KDE_HEADER = "grid,id_density,ood_density"


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DataFormatError, FileNotFoundError) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except SmoothcertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothcert",
        description="Certified and adversarial OOD detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "certify", "attack", "evaluate",
                 "scale-sweep", "kde"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="key = value config file (defaults if omitted)")
        p.add_argument("--profile", choices=cfgmod.PROFILES,
                       default="paper-protocol")
        if name in ("train", "certify", "attack", "kde"):
            p.add_argument("--pipeline", default=None,
                           help="pipeline kind (default: all configured, "
                                "or kde.pipeline for kde)")
    return parser


def _dispatch(args) -> None:
    cfg = cfgmod.load_config(args.config, profile=args.profile)
    command = args.command.replace("-", "_")
    pipeline = getattr(args, "pipeline", None)
    if command == "generate":
        cmd_generate(cfg)
    elif command == "train":
        cmd_train(cfg, _pipeline_list(cfg, pipeline))
    elif command == "certify":
        for kind in _pipeline_list(cfg, pipeline):
            cmd_certify(cfg, kind)
    elif command == "attack":
        for kind in _pipeline_list(cfg, pipeline):
            cmd_attack(cfg, kind)
    elif command == "evaluate":
        cmd_evaluate(cfg)
    elif command == "scale_sweep":
        cmd_scale_sweep(cfg)
    elif command == "kde":
        cmd_kde(cfg, pipeline or cfg.kde_pipeline)
    else:
        raise ConfigError(f"unknown command {command!r}")


def _pipeline_list(cfg, pipeline):
    if pipeline is None:
        return list(cfg.pipelines)
    if pipeline not in PIPE_INDEX:
        raise ConfigError(f"pipelines: unknown pipeline {pipeline!r}")
    return [pipeline]


# ---------------------------------------------------------------- data

def cmd_generate(cfg) -> None:
    spec = cfgmod.mixture_spec(cfg)
    params = cfgmod.ood_params(cfg)
    root = RngStream(cfg.data_seed)
    out = cfgmod.data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(sample_id(spec, cfg.n_train, root.child(0), box=cfg.box),
             out / "id_train.csv")
    save_csv(sample_id(spec, cfg.n_test, root.child(1), box=cfg.box),
             out / "id_test.csv")
    for i, family in enumerate(cfg.families):
        data = sample_ood(family, cfg.dim, cfg.n_ood, params,
                          root.child(2, i))
        save_csv(data, out / f"ood_{family}.csv")
    print(f"wrote {2 + len(cfg.families)} dataset files to {out}")


def _load_data(cfg):
    out = cfgmod.data_dir(cfg)
    try:
        id_train = load_csv(out / "id_train.csv")
        id_test = load_csv(out / "id_test.csv")
        ood = {family: load_csv(out / f"ood_{family}.csv")
               for family in cfg.families}
    except FileNotFoundError as exc:
        raise ConfigError(
            f"dataset file missing ({exc}); run 'smoothcert generate' first"
        ) from exc
    return id_train, id_test, ood


def _oe_outliers(cfg):
    """Training outliers for OE and the discriminator (not persisted)."""
    params = cfgmod.ood_params(cfg)
    return sample_ood(cfg.oe_family, cfg.dim, cfg.n_train, params,
                      RngStream(cfg.data_seed).child(100))


# ---------------------------------------------------------------- train

def cmd_train(cfg, kinds) -> None:
    id_train, _, _ = _load_data(cfg)
    out = cfgmod.models_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfgmod.mixture_spec(cfg)
    oe_data = _oe_outliers(cfg)
    delta = cfgmod.resolved_delta(cfg)
    schedule = CosineSchedule.create()

    cache = {}

    def plain_classifier():
        if "plain_cls" not in cache:
            cache["plain_cls"] = train_classifier(
                id_train, cfgmod.classifier_train_config(cfg, with_oe=False))
        return cache["plain_cls"]

    def oe_classifier():
        if "oe_cls" not in cache:
            cache["oe_cls"] = train_classifier(
                id_train, cfgmod.classifier_train_config(cfg, with_oe=True),
                ood=oe_data)
        return cache["oe_cls"]

    def discriminator():
        if "disc" not in cache:
            cache["disc"] = train_discriminator(
                id_train.points, oe_data.points,
                TrainConfig(epochs=cfg.disc_epochs,
                            batch_size=cfg.train_batch_size,
                            learning_rate=cfg.disc_lr,
                            momentum=cfg.train_momentum, seed=cfg.disc_seed),
                epsilon=cfg.disc_epsilon, box_bound=cfg.box,
                hidden=cfg.disc_hidden)
        return cache["disc"]

    def denoiser_spec():
        if "denoiser" not in cache:
            if cfg.denoiser_kind == "analytic":
                cache["denoiser"] = analytic_denoiser(spec)
            else:
                model = train_denoiser(
                    id_train, schedule,
                    TrainConfig(epochs=cfg.denoiser_epochs,
                                batch_size=cfg.train_batch_size,
                                learning_rate=cfg.denoiser_lr,
                                momentum=cfg.train_momentum,
                                seed=cfg.denoiser_seed),
                    clip_bound=cfg.box)
            if cfg.denoiser_kind == "learned":
                cache["denoiser"] = learned_denoiser(model,
                                                     clip_bound=cfg.box)
        return cache["denoiser"]

    for kind in kinds:
        if kind == "plain":
            det = JointDetector(kind="plain", classifier=plain_classifier(),
                                class_count=cfg.classes, box_bound=cfg.box)
        elif kind == "oe":
            det = JointDetector(kind="oe", classifier=oe_classifier(),
                                class_count=cfg.classes, box_bound=cfg.box)
        elif kind == "prood_like":
            det = JointDetector(kind="prood_like", classifier=oe_classifier(),
                                class_count=cfg.classes,
                                discriminator=discriminator(),
                                bias_shift=delta, box_bound=cfg.box)
        else:
            det = JointDetector(kind="distro", classifier=oe_classifier(),
                                class_count=cfg.classes,
                                discriminator=discriminator(),
                                bias_shift=delta, denoiser=denoiser_spec(),
                                sigma=cfg.sigma, schedule=schedule,
                                box_bound=cfg.box)
        path = save_detector(det, out, kind)
        print(f"trained {kind} -> {path}")


def _load_detector_for(cfg, kind) -> JointDetector:
    path = cfgmod.models_dir(cfg) / f"{kind}.detector"
    if not path.exists():
        raise ConfigError(
            f"detector bundle {path} missing; run 'smoothcert train' first")
    return load_detector(path)


# ------------------------------------------------------------- certify

def _sigma_key(sigma: float) -> int:
    return int(round(sigma * 1e9))


def _certify_id(det, cfg, id_points, pipe_stream, sigma):
    scfg = cfgmod.smoothing_config(cfg, sigma)
    return certify_points(det, id_points, scfg,
                          pipe_stream.child(20, _sigma_key(sigma)))


def _certify_family(det, cfg, points, family_stream):
    scfg = cfgmod.smoothing_config(cfg)
    return certify_points(det, points, scfg, family_stream.child(4))


def _pipe_stream(cfg, kind) -> RngStream:
    return RngStream(cfg.eval_seed).child(PIPE_INDEX[kind])


def _family_stream(cfg, kind, family) -> RngStream:
    from .synthdata import OOD_FAMILIES
    return _pipe_stream(cfg, kind).child(10 + OOD_FAMILIES.index(family))


def cmd_certify(cfg, kind) -> None:
    _, id_test, ood = _load_data(cfg)
    det = _load_detector_for(cfg, kind)
    pipe_stream = _pipe_stream(cfg, kind)
    lines = [CERTIFY_HEADER]

    def rows(tag, side, certified_scores):
        for i, s in enumerate(certified_scores):
            lines.append(f"{tag}/{i},{side},{s.p_lower:.9f},{s.radius:.9f},"
                         f"{s.score:.9f},{int(s.certified)}")

    rows("id_test", "ID",
         _certify_id(det, cfg, id_test.points, pipe_stream, cfg.sigma))
    for family in cfg.families:
        rows(family, "OOD",
             _certify_family(det, cfg, ood[family].points,
                             _family_stream(cfg, kind, family)))
    out = cfgmod.reports_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"certified_{kind}.csv"
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"certified {kind} -> {path}")


# -------------------------------------------------------------- attack

def cmd_attack(cfg, kind) -> None:
    _, id_test, ood = _load_data(cfg)
    det = _load_detector_for(cfg, kind)
    fn = joint_msp_score_fn(det)
    pipe_stream = _pipe_stream(cfg, kind)
    attack_cfg = cfgmod.attack_config(cfg, cfg.ood_epsilon)
    lines = [ATTACK_HEADER]
    id_clean, _ = fn(id_test.points, pipe_stream.child(1))
    for i, v in enumerate(id_clean):
        lines.append(f"id_test/{i},ID,{v:.9f},{v:.9f}")
    for family in cfg.families:
        stream = _family_stream(cfg, kind, family)
        clean, _ = fn(ood[family].points, stream.child(3).child(0, 0))
        _, attacked = pgd_maximize_batch(fn, ood[family].points, attack_cfg,
                                         stream.child(3), det.box_bound)
        for i, (c, a) in enumerate(zip(clean, attacked)):
            lines.append(f"{family}/{i},OOD,{c:.9f},{a:.9f}")
    out = cfgmod.reports_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"attacked_{kind}.csv"
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"attacked {kind} -> {path}")


# ------------------------------------------------------------ evaluate

def _id_accuracy_block(det, cfg, id_test, pipe_stream, id_certified):
    probs, _ = joint_confidence(det, id_test.points, pipe_stream.child(1))
    clean_acc = float((probs.argmax(axis=1) == id_test.labels).mean())
    adversarial = {}
    for j, eps in enumerate(cfg.id_epsilons):
        margin_fn = pipeline_margin_score_fn(det, id_test.labels)
        _, scores = pgd_maximize_batch(margin_fn, id_test.points,
                                       cfgmod.attack_config(cfg, eps),
                                       pipe_stream.child(30, j),
                                       det.box_bound)
        adversarial[eps] = float((scores < 0).mean())
    certified = {}
    for sigma in cfg.id_sigmas:
        scores = id_certified[sigma]
        hits = [s.certified and s.top_class == label
                for s, label in zip(scores, id_test.labels)]
        certified[sigma] = float(np.mean(hits))
    return {"clean": clean_acc, "adversarial": adversarial,
            "certified": certified}


def cmd_evaluate(cfg) -> None:
    _, id_test, ood = _load_data(cfg)
    out = cfgmod.reports_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport()

    for kind in cfg.pipelines:
        det = _load_detector_for(cfg, kind)
        fn = joint_msp_score_fn(det)
        pipe_stream = _pipe_stream(cfg, kind)

        id_clean, _ = fn(id_test.points, pipe_stream.child(1))

        sigma_set = list(dict.fromkeys([cfg.sigma, *cfg.id_sigmas]))
        id_certified = {s: _certify_id(det, cfg, id_test.points, pipe_stream,
                                       s) for s in sigma_set}
        id_block = _id_accuracy_block(det, cfg, id_test, pipe_stream,
                                      id_certified)
        report.id_block[kind] = id_block

        if cfg.l2_id_side == "certified":
            gl2_id = np.array([s.score for s in id_certified[cfg.sigma]])
        else:
            gl2_id = id_clean

        for family in cfg.families:
            points = ood[family].points
            stream = _family_stream(cfg, kind, family)
            ood_clean, _ = fn(points, stream.child(3).child(0, 0))
            clean = ScoreSet(id_scores=id_clean, ood_scores=ood_clean,
                             variant="clean")
            _, ood_adv = pgd_maximize_batch(
                fn, points, cfgmod.attack_config(cfg, cfg.ood_epsilon),
                stream.child(3), det.box_bound)
            adv = ScoreSet(id_scores=id_clean, ood_scores=ood_adv,
                           variant="adversarial")
            glinf = None
            if det.has_discriminator:
                glinf = guaranteed_scores_linf(det, id_test.points, points,
                                               cfg.ood_epsilon,
                                               id_scores=id_clean)
            validate_ordering(clean, adv, glinf)

            gl2_ood = np.array([s.score for s in
                                _certify_family(det, cfg, points, stream)])
            gl2 = ScoreSet(id_scores=gl2_id, ood_scores=gl2_ood,
                           variant="guaranteed_l2")

            m_clean = scoreset_metrics(clean)
            m_adv = scoreset_metrics(adv)
            m_gl2 = scoreset_metrics(gl2)
            if glinf is not None:
                m_glinf = scoreset_metrics(glinf)
            else:
                m_glinf = {"auc": 0.0, "aupr": 0.0, "fpr": 1.0}
            report.add_row(kind, family, {
                "acc": id_block["clean"],
                "auc": m_clean["auc"], "aupr": m_clean["aupr"],
                "fpr": m_clean["fpr"],
                "gauc_l2": m_gl2["auc"], "gaupr_l2": m_gl2["aupr"],
                "gfpr_l2": m_gl2["fpr"],
                "gauc_linf": m_glinf["auc"], "gaupr_linf": m_glinf["aupr"],
                "gfpr_linf": m_glinf["fpr"],
                "aauc": m_adv["auc"], "aaupr": m_adv["aupr"],
                "afpr": m_adv["fpr"]})

    report.add_average_rows()
    report.validate()
    write_report_csv(report, out / "report.csv")
    write_report_markdown(report, out / "report.md")
    write_id_accuracy_csv(report, out / "id_accuracy.csv")
    print(f"evaluation report -> {out / 'report.csv'}")


# ----------------------------------------------------- sweep and kde

def cmd_scale_sweep(cfg) -> None:
    _, id_test, _ = _load_data(cfg)
    if not 0 <= cfg.sweep_sample_index < len(id_test):
        raise ConfigError("sweep.sample_index: outside the test set")
    x = id_test.points[cfg.sweep_sample_index]
    betas = np.logspace(np.log10(cfg.beta_min), np.log10(cfg.beta_max),
                        cfg.sweep_points)
    lines = [SWEEP_HEADER]
    for kind in cfg.pipelines:
        det = _load_detector_for(cfg, kind)
        stream = _pipe_stream(cfg, kind).child(40)
        msp_curve = scale_sweep(det, x, betas, score="msp", stream=stream)
        energy_curve = scale_sweep(det, x, betas, score="energy",
                                   stream=stream)
        for beta, m, e in zip(betas, msp_curve, energy_curve):
            lines.append(f"{beta:.9g},{kind},{m:.9f},{e:.9f}")
    out = cfgmod.reports_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scale_sweep.csv"
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"scale sweep -> {path}")


def cmd_kde(cfg, kind) -> None:
    if kind not in PIPE_INDEX:
        raise ConfigError(f"kde.pipeline: unknown pipeline {kind!r}")
    certified_path = cfgmod.reports_dir(cfg) / f"certified_{kind}.csv"
    if certified_path.exists():
        id_scores, ood_scores = _read_certified_scores(certified_path)
    else:
        _, id_test, ood = _load_data(cfg)
        det = _load_detector_for(cfg, kind)
        pipe_stream = _pipe_stream(cfg, kind)
        id_scores = [s.score for s in
                     _certify_id(det, cfg, id_test.points, pipe_stream,
                                 cfg.sigma)]
        ood_scores = []
        for family in cfg.families:
            ood_scores += [s.score for s in
                           _certify_family(det, cfg, ood[family].points,
                                           _family_stream(cfg, kind, family))]
    grid = np.linspace(cfg.kde_grid_min, cfg.kde_grid_max, cfg.kde_points)
    id_density = gaussian_kde(id_scores, cfg.kde_bandwidth, grid)
    ood_density = gaussian_kde(ood_scores, cfg.kde_bandwidth, grid)
    lines = [KDE_HEADER]
    for g, a, b in zip(grid, id_density, ood_density):
        lines.append(f"{g:.9g},{a:.9g},{b:.9g}")
    out = cfgmod.reports_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"kde_{kind}.csv"
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"kde -> {path}")


def _read_certified_scores(path):
    id_scores, ood_scores = [], []
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CERTIFY_HEADER:
        raise DataFormatError(f"{path}: unexpected certified-score header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 6:
            raise DataFormatError(f"{path}: line {lineno}: bad column count")
        (id_scores if cells[1] == "ID" else ood_scores).append(float(cells[4]))
    return id_scores, ood_scores


if __name__ == "__main__":
    sys.exit(main())
