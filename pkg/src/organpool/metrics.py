"""Missing-label-aware classification metrics and report assembly.

Every metric first drops positions whose target is -1 (missing); those
samples never enter numerators or denominators.  Metrics that need both
classes (or any positives) return None when the restriction leaves them
undefined, and macro means average only the defined labels.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .validation import check_array

METRIC_NAMES = ("auroc", "auprc", "f1", "ba")


def _valid_pairs(scores, targets):
    s = check_array(scores, name="scores", ndim=1)
    t = np.asarray(targets)
    if t.shape != s.shape:
        raise DataError(f"scores shape {s.shape} != targets shape {t.shape}")
    keep = t != -1
    return s[keep], t[keep].astype(np.int64)


def auroc(scores, targets) -> float | None:
    """Mann-Whitney AUROC with 0.5 tie credit; None if a class is absent.

    Computed from average ranks, which equals the pairwise U-statistic
    exactly, ties included.
    """
    s, t = _valid_pairs(scores, targets)
    n_pos = int(np.count_nonzero(t == 1))
    n_neg = int(np.count_nonzero(t == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[t == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, targets) -> float | None:
    """Average precision over a descending sweep with tie blocks; None if
    no positives survive the -1 exclusion."""
    s, t = _valid_pairs(scores, targets)
    n_pos = int(np.count_nonzero(t == 1))
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    ap = 0.0
    seen_pos = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = s.shape[0]
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        seen_pos += int(np.count_nonzero(t[i:j] == 1))
        seen += j - i
        recall = seen_pos / n_pos
        precision = seen_pos / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(ap)


def f1_ba(probs, targets, threshold: float) -> tuple[float | None, float | None]:
    """F1 and balanced accuracy of the rule predict-positive iff p >= threshold.

    F1 is 0 when its denominator vanishes and None only with no valid
    samples; BA is None whenever either class is absent.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold must lie in [0, 1], got {threshold}")
    p, t = _valid_pairs(probs, targets)
    if p.size == 0:
        return None, None
    pred = p >= threshold
    tp = int(np.count_nonzero(pred & (t == 1)))
    fp = int(np.count_nonzero(pred & (t == 0)))
    fn = int(np.count_nonzero(~pred & (t == 1)))
    tn = int(np.count_nonzero(~pred & (t == 0)))
    denom = 2 * tp + fp + fn
    f1 = 2.0 * tp / denom if denom > 0 else 0.0
    n_pos, n_neg = tp + fn, tn + fp
    if n_pos == 0 or n_neg == 0:
        return f1, None
    ba = 0.5 * (tp / n_pos + tn / n_neg)
    return f1, float(ba)


@dataclass
class LabelMetrics:
    label: str
    auroc: float | None
    auprc: float | None
    f1: float | None
    ba: float | None
    n_valid: int

    def as_dict(self) -> dict:
        return {"label": self.label, "auroc": self.auroc, "auprc": self.auprc,
                "f1": self.f1, "ba": self.ba, "n_valid": self.n_valid}


@dataclass
class MetricReport:
    per_label: list[LabelMetrics]
    macro: dict[str, float | None] = field(default_factory=dict)
    undefined: dict[str, list[str]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"per_label": [m.as_dict() for m in self.per_label],
                "macro": self.macro, "undefined": self.undefined}


def macro_summary(per_label: list[LabelMetrics]) -> MetricReport:
    """Unweighted macro means over labels whose metric is defined."""
    macro: dict[str, float | None] = {}
    undefined: dict[str, list[str]] = {}
    for name in METRIC_NAMES:
        values = [getattr(m, name) for m in per_label]
        defined = [v for v in values if v is not None]
        macro[name] = float(np.mean(defined)) if defined else None
        undefined[name] = [m.label for m in per_label if getattr(m, name) is None]
    return MetricReport(per_label=per_label, macro=macro, undefined=undefined)


def evaluate_labels(probs: np.ndarray, targets: np.ndarray, labels: list[str],
                    thresholds: np.ndarray) -> MetricReport:
    """Per-label metrics over an (n, L) probability/target pair."""
    p = check_array(probs, name="probs", ndim=2)
    t = np.asarray(targets)
    if t.shape != p.shape or len(labels) != p.shape[1] or len(thresholds) != p.shape[1]:
        raise DataError("probs, targets, labels and thresholds disagree on label count")
    out = []
    for j, label in enumerate(labels):
        n_valid = int(np.count_nonzero(t[:, j] != -1))
        a = auroc(p[:, j], t[:, j])
        ap = auprc(p[:, j], t[:, j])
        f1, ba = f1_ba(p[:, j], t[:, j], float(thresholds[j])) if n_valid else (None, None)
        out.append(LabelMetrics(label=label, auroc=a, auprc=ap, f1=f1, ba=ba,
                                n_valid=n_valid))
    return macro_summary(out)


def report_to_json(report: MetricReport) -> str:
    return json.dumps(report.as_dict(), indent=2, sort_keys=True)


def _fmt(value: float | None) -> str:
    return "   -  " if value is None else f"{value:6.4f}"


def report_to_text(report: MetricReport, title: str = "metrics") -> str:
    """Aligned-column plain-text rendering of a metric report."""
    width = max([len(m.label) for m in report.per_label] + [len("macro"), 5])
    lines = [title,
             f"{'label':<{width}}  {'auroc':>6}  {'auprc':>6}  {'f1':>6}  {'ba':>6}  {'n':>5}"]
    for m in report.per_label:
        lines.append(f"{m.label:<{width}}  {_fmt(m.auroc)}  {_fmt(m.auprc)}  "
                     f"{_fmt(m.f1)}  {_fmt(m.ba)}  {m.n_valid:>5}")
    mac = report.macro
    lines.append(f"{'macro':<{width}}  {_fmt(mac['auroc'])}  {_fmt(mac['auprc'])}  "
                 f"{_fmt(mac['f1'])}  {_fmt(mac['ba'])}  {'':>5}")
    excluded = {k: v for k, v in report.undefined.items() if v}
    if excluded:
        lines.append(f"undefined (excluded from macro): {json.dumps(excluded, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def report_to_csv(report: MetricReport) -> str:
    """Per-class CSV with columns label, auroc, auprc, f1, ba, n_valid."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "auroc", "auprc", "f1", "ba", "n_valid"])
    for m in report.per_label:
        writer.writerow([m.label,
                         "" if m.auroc is None else repr(m.auroc),
                         "" if m.auprc is None else repr(m.auprc),
                         "" if m.f1 is None else repr(m.f1),
                         "" if m.ba is None else repr(m.ba),
                         m.n_valid])
    return buf.getvalue()
