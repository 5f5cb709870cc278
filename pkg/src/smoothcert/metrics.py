"""Clean, guaranteed, and adversarial detection metrics.

AUC follows the pairwise definition (ID score above OOD score wins, ties
count one half) computed exactly via midranks; AUPR sweeps thresholds
descending with tie groups atomic and the ID side as the positive class;
FPR@95 uses the empirical 95% ID quantile with no interpolation.

Score sides for the robust variants: the guaranteed l2 set scores both
sides with the certified confidence bound (0 on abstention); the
guaranteed l-infinity set keeps clean ID scores and upper-bounds the OOD
side via IBP; the adversarial set keeps clean ID scores and attacks the
OOD side.  Scored this way the l-infinity chain holds pointwise:
guaranteed >= attacked >= clean on every OOD point, hence GAUC <= AAUC
<= AUC and GFPR >= AFPR >= FPR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, pgd_maximize_batch
from .detector import (
    JointDetector,
    certified_l2_score,
    guaranteed_linf_msp_upper,
    joint_msp_score_fn,
)
from .errors import InvariantViolation
from .numerics import RngStream
from .smoothing import CertifiedScore, SmoothingConfig

VARIANTS = ("clean", "guaranteed_l2", "guaranteed_linf", "adversarial")

# substream tags shared by clean scoring and the attack engine: the
# attack's trajectory r draws from stream.child(0, r), and trajectory 0
# starts at the clean input, so clean OOD scores evaluated under
# stream.child(0, 0) are exactly the attack's starting values.
_CLEAN_TRAJECTORY = (0, 0)


@dataclass(frozen=True)
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    variant: str

    def __post_init__(self):
        id_scores = np.asarray(self.id_scores, dtype=float)
        ood_scores = np.asarray(self.ood_scores, dtype=float)
        object.__setattr__(self, "id_scores", id_scores)
        object.__setattr__(self, "ood_scores", ood_scores)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if id_scores.size == 0 or ood_scores.size == 0:
            raise ValueError("both score sides must be nonempty")
        if not (np.all(np.isfinite(id_scores))
                and np.all(np.isfinite(ood_scores))):
            raise ValueError("scores must be finite")


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties averaged (exact halves in float64)."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: ScoreSet) -> float:
    """Pairwise P(id > ood) + 0.5 P(id = ood), exactly."""
    n_id, n_ood = len(scores.id_scores), len(scores.ood_scores)
    combined = np.concatenate([scores.id_scores, scores.ood_scores])
    ranks = _midranks(combined)
    rank_sum = ranks[:n_id].sum()
    return (rank_sum - n_id * (n_id + 1) / 2.0) / (n_id * n_ood)


def aupr(scores: ScoreSet) -> float:
    """Average precision with ID positive, descending thresholds, ties
    grouped atomically, precision held constant between recalls."""
    id_scores, ood_scores = scores.id_scores, scores.ood_scores
    n_id = len(id_scores)
    thresholds = np.unique(np.concatenate([id_scores, ood_scores]))[::-1]
    id_sorted = np.sort(id_scores)
    ood_sorted = np.sort(ood_scores)
    area, prev_recall = 0.0, 0.0
    for t in thresholds:
        tp = n_id - np.searchsorted(id_sorted, t, side="left")
        fp = len(ood_sorted) - np.searchsorted(ood_sorted, t, side="left")
        recall = tp / n_id
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def fpr_at_95_tpr(scores: ScoreSet) -> float:
    """OOD fraction above the largest threshold keeping ID TPR >= 95%."""
    n_id = len(scores.id_scores)
    if n_id < 20:
        raise ValueError(f"need >= 20 ID scores for FPR@95, got {n_id}")
    k = (95 * n_id + 99) // 100          # ceil(0.95 n) in exact integers
    tau = np.sort(scores.id_scores)[n_id - k]
    return float((scores.ood_scores >= tau).mean())


def certify_points(det: JointDetector, points: np.ndarray,
                   cfg: SmoothingConfig, stream: RngStream,
                   ) -> list[CertifiedScore]:
    """Certify each row with its own point-indexed substream."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return [certified_l2_score(det, p, cfg, stream.child(i))
            for i, p in enumerate(points)]


def guaranteed_scores_l2(det: JointDetector, id_points: np.ndarray,
                         ood_points: np.ndarray, cfg: SmoothingConfig,
                         stream: RngStream,
                         id_side: str = "certified") -> ScoreSet:
    """Certified-bound scores on both sides (the certified-score
    separability reading); ``id_side="clean"`` scores ID with the plain
    joint confidence instead."""
    if id_side not in ("certified", "clean"):
        raise ValueError(f"unknown id_side {id_side!r}")
    ood = [s.score for s in certify_points(det, ood_points, cfg,
                                           stream.child(1))]
    if id_side == "certified":
        ids = [s.score for s in certify_points(det, id_points, cfg,
                                               stream.child(0))]
    else:
        fn = joint_msp_score_fn(det)
        ids, _ = fn(id_points, stream.child(0))
    return ScoreSet(id_scores=np.asarray(ids), ood_scores=np.asarray(ood),
                    variant="guaranteed_l2")


def clean_scores(det: JointDetector, id_points: np.ndarray,
                 ood_points: np.ndarray, stream: RngStream) -> ScoreSet:
    """Single-evaluation joint confidence on both sides.

    The OOD side is evaluated on the attack's clean-trajectory substream
    so adversarial scores dominate it pointwise by construction.
    """
    fn = joint_msp_score_fn(det)
    id_vals, _ = fn(id_points, stream.child(1))
    ood_vals, _ = fn(ood_points, stream.child(3).child(*_CLEAN_TRAJECTORY))
    return ScoreSet(id_scores=id_vals, ood_scores=ood_vals, variant="clean")


def adversarial_scores(det: JointDetector, id_points: np.ndarray,
                       ood_points: np.ndarray, attack_cfg: AttackConfig,
                       stream: RngStream,
                       id_scores: np.ndarray | None = None) -> ScoreSet:
    """Clean ID side; OOD side maximized by the PGD restart ensemble."""
    fn = joint_msp_score_fn(det)
    if id_scores is None:
        id_scores, _ = fn(id_points, stream.child(1))
    _, ood_vals = pgd_maximize_batch(fn, ood_points, attack_cfg,
                                     stream.child(3), det.box_bound)
    return ScoreSet(id_scores=np.asarray(id_scores), ood_scores=ood_vals,
                    variant="adversarial")


def guaranteed_scores_linf(det: JointDetector, id_points: np.ndarray,
                           ood_points: np.ndarray, epsilon: float,
                           stream: RngStream | None = None,
                           id_scores: np.ndarray | None = None) -> ScoreSet:
    """Clean ID side; OOD side replaced by the IBP confidence bound.

    Raises ValueError for detectors without a discriminator (reports
    translate that into the 0.00 guaranteed row).
    """
    if id_scores is None:
        fn = joint_msp_score_fn(det)
        id_scores, _ = fn(id_points, (stream or RngStream(0)).child(1))
    ood_vals = guaranteed_linf_msp_upper(det, ood_points, epsilon)
    return ScoreSet(id_scores=np.asarray(id_scores),
                    ood_scores=np.asarray(ood_vals),
                    variant="guaranteed_linf")


def scoreset_metrics(scores: ScoreSet) -> dict:
    return {"auc": auc(scores), "aupr": aupr(scores),
            "fpr": fpr_at_95_tpr(scores)}


def validate_ordering(clean: ScoreSet, adversarial: ScoreSet,
                      guaranteed_linf: ScoreSet | None,
                      atol: float = 1e-9) -> None:
    """Hard score-wise dominance check behind the metric ordering chain.

    guaranteed >= attacked >= clean on every OOD point, identical ID
    sides.  Raises InvariantViolation on failure.
    """
    if not np.array_equal(clean.id_scores, adversarial.id_scores):
        raise InvariantViolation("adversarial ID side differs from clean")
    if np.any(adversarial.ood_scores < clean.ood_scores - atol):
        worst = float((clean.ood_scores - adversarial.ood_scores).max())
        raise InvariantViolation(
            f"attacked OOD score fell below clean by {worst}")
    if guaranteed_linf is not None:
        if not np.array_equal(clean.id_scores, guaranteed_linf.id_scores):
            raise InvariantViolation("guaranteed ID side differs from clean")
        if np.any(guaranteed_linf.ood_scores
                  < adversarial.ood_scores - atol):
            worst = float((adversarial.ood_scores
                           - guaranteed_linf.ood_scores).max())
            raise InvariantViolation(
                f"guaranteed OOD bound fell below attacked score by {worst}")


def ordering_chain_holds(metrics_clean: dict, metrics_adv: dict,
                         metrics_glinf: dict | None,
                         atol: float = 1e-9) -> bool:
    """Metric-level restatement of the chain (follows from score-wise
    dominance; checked as a belt-and-braces report validation)."""
    ok = (metrics_glinf is None
          or (metrics_glinf["auc"] <= metrics_adv["auc"] + atol
              and metrics_glinf["aupr"] <= metrics_adv["aupr"] + atol
              and metrics_glinf["fpr"] >= metrics_adv["fpr"] - atol))
    return ok and (metrics_adv["auc"] <= metrics_clean["auc"] + atol
                   and metrics_adv["aupr"] <= metrics_clean["aupr"] + atol
                   and metrics_adv["fpr"] >= metrics_clean["fpr"] - atol)
