"""Evaluation report assembly and dual CSV/markdown emission.

A report holds one metric row per (pipeline, OOD family) plus a
cross-family average row, and an ID accuracy block (clean, adversarial
per epsilon, certified per sigma).  All percentages are written times
100 with two decimals in both formats, which therefore always encode
identical numbers.  Before writing, the metric-level ordering chain is
re-validated: GAUC(linf) <= AAUC <= AUC, GAUPR(linf) <= AAUPR <= AUPR,
GFPR(linf) >= AFPR >= FPR (pipelines without a discriminator carry the
0.00 / 100.0 sentinel guaranteed entries).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvariantViolation

METRIC_COLUMNS = ("acc", "auc", "gauc_l2", "gauc_linf", "aauc",
                  "aupr", "gaupr_l2", "gaupr_linf", "aaupr",
                  "fpr", "gfpr_l2", "gfpr_linf", "afpr")

CSV_HEADER = ("pipeline,ood_family,Acc,AUC,GAUC_l2,GAUC_linf,AAUC,"
              "AUPR,GAUPR_l2,GAUPR_linf,AAUPR,FPR,GFPR_l2,GFPR_linf,AFPR")

AVERAGE_FAMILY = "average"

_CHAIN_TOLERANCE = 1e-9


@dataclass
class EvalReport:
    # (pipeline, family) -> {metric: value in [0, 1]}
    rows: dict = field(default_factory=dict)
    # pipeline -> {"clean": v, "adversarial": {eps: v}, "certified": {sigma: v}}
    id_block: dict = field(default_factory=dict)

    def add_row(self, pipeline: str, family: str, metrics: dict) -> None:
        missing = set(METRIC_COLUMNS) - set(metrics)
        if missing:
            raise ValueError(f"row missing metrics: {sorted(missing)}")
        self.rows[(pipeline, family)] = dict(metrics)

    def add_average_rows(self) -> None:
        """Append the cross-family mean row per pipeline."""
        pipelines = {p for p, f in self.rows if f != AVERAGE_FAMILY}
        for pipeline in sorted(pipelines):
            fams = [m for (p, f), m in self.rows.items()
                    if p == pipeline and f != AVERAGE_FAMILY]
            avg = {k: sum(m[k] for m in fams) / len(fams)
                   for k in METRIC_COLUMNS}
            self.rows[(pipeline, AVERAGE_FAMILY)] = avg

    def validate(self) -> None:
        """Range and ordering-chain checks; raises InvariantViolation."""
        tol = _CHAIN_TOLERANCE
        for (pipeline, family), m in self.rows.items():
            for key, value in m.items():
                if not -tol <= value <= 1.0 + tol:
                    raise InvariantViolation(
                        f"{pipeline}/{family}: {key} = {value} outside [0, 1]")
            if not (m["gauc_linf"] <= m["aauc"] + tol
                    and m["aauc"] <= m["auc"] + tol):
                raise InvariantViolation(
                    f"{pipeline}/{family}: AUC ordering chain violated")
            if not (m["gaupr_linf"] <= m["aaupr"] + tol
                    and m["aaupr"] <= m["aupr"] + tol):
                raise InvariantViolation(
                    f"{pipeline}/{family}: AUPR ordering chain violated")
            if not (m["gfpr_linf"] >= m["afpr"] - tol
                    and m["afpr"] >= m["fpr"] - tol):
                raise InvariantViolation(
                    f"{pipeline}/{family}: FPR ordering chain violated")


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def _ordered_rows(report: EvalReport):
    def key(item):
        (pipeline, family), _ = item
        return (pipeline, family == AVERAGE_FAMILY, family)
    return sorted(report.rows.items(), key=key)


def write_report_csv(report: EvalReport, path) -> None:
    lines = [CSV_HEADER]
    for (pipeline, family), m in _ordered_rows(report):
        cells = [pipeline, family] + [_pct(m[k]) for k in METRIC_COLUMNS]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_markdown(report: EvalReport, path) -> None:
    header_cells = CSV_HEADER.split(",")
    lines = ["# OOD detection metrics", "",
             "| " + " | ".join(header_cells) + " |",
             "|" + "---|" * len(header_cells)]
    for (pipeline, family), m in _ordered_rows(report):
        cells = [pipeline, family] + [_pct(m[k]) for k in METRIC_COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    if report.id_block:
        eps_list = sorted({e for blk in report.id_block.values()
                           for e in blk["adversarial"]})
        sig_list = sorted({s for blk in report.id_block.values()
                           for s in blk["certified"]})
        head = (["pipeline", "clean"]
                + [f"adv eps={e:g}" for e in eps_list]
                + [f"cert sigma={s:g}" for s in sig_list])
        lines += ["# ID accuracy", "",
                  "| " + " | ".join(head) + " |",
                  "|" + "---|" * len(head)]
        for pipeline in sorted(report.id_block):
            blk = report.id_block[pipeline]
            cells = [pipeline, _pct(blk["clean"])]
            cells += [_pct(blk["adversarial"][e]) for e in eps_list]
            cells += [_pct(blk["certified"][s]) for s in sig_list]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def write_id_accuracy_csv(report: EvalReport, path) -> None:
    if not report.id_block:
        return
    eps_list = sorted({e for blk in report.id_block.values()
                       for e in blk["adversarial"]})
    sig_list = sorted({s for blk in report.id_block.values()
                       for s in blk["certified"]})
    header = (["pipeline", "clean"]
              + [f"adv_eps_{e:g}" for e in eps_list]
              + [f"cert_sigma_{s:g}" for s in sig_list])
    lines = [",".join(header)]
    for pipeline in sorted(report.id_block):
        blk = report.id_block[pipeline]
        cells = [pipeline, _pct(blk["clean"])]
        cells += [_pct(blk["adversarial"][e]) for e in eps_list]
        cells += [_pct(blk["certified"][s]) for s in sig_list]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
