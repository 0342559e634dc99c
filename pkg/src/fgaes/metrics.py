"""Evaluation suite: pair-level accuracy/F1, length-weighted series metrics,
and coarse rank/linear correlations.

Conventions (also recorded in every report header): series weights equal the
image count n (pair count n-1 available via `weight_pairs`), predicted-score
ties count against the model, and F1 is the macro average over the
symmetric both-orders pair materialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricsError",
    "EvalReport",
    "pair_metrics",
    "series_metrics",
    "corr",
    "rankdata",
    "spearman",
    "build_report",
]


class MetricsError(Exception):
    pass


REPORT_NOTES = (
    "series weight = image count n (n-1 via weight_pairs flag)",
    "predicted-score ties count as incorrect",
    "F1 = macro over symmetric both-orders pair materialization",
)


def rankdata(values) -> np.ndarray:
    """Ranks starting at 1, ties get the average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        raise MetricsError("correlation undefined: constant vector")
    return float((a * b).sum() / denom)


def spearman(a, b) -> float:
    return _pearson(rankdata(a), rankdata(b))


def _gt_pairs(ranking):
    """(better, worse) index pairs implied by a best-first ranking."""
    for ai in range(len(ranking)):
        for bi in range(ai + 1, len(ranking)):
            yield ranking[ai], ranking[bi]


def pair_metrics(scores_by_series: dict, rankings: dict) -> tuple[float, float]:
    """Accuracy and macro-F1 over all ground-truth-ordered pairs.

    A pair is correct iff score(better) > score(worse); ties are errors.
    Each pair is materialized in both orders for the F1 confusion counts.
    """
    correct = total = 0
    tp = fp = fn = tn = 0
    for sid, ranking in rankings.items():
        scores = scores_by_series.get(sid)
        if scores is None or len(scores) != len(ranking):
            raise MetricsError(f"missing or mismatched scores for series {sid!r}")
        for better, worse in _gt_pairs(ranking):
            ok = scores[better] > scores[worse]
            total += 1
            if ok:
                correct += 1
                tp += 1  # (better, worse) instance, label positive
                tn += 1  # (worse, better) instance, label negative
            else:
                fn += 1
                fp += 1
    if total == 0:
        raise MetricsError("no pairs to evaluate")
    acc = correct / total

    def f1(tp_, fp_, fn_):
        denom = 2 * tp_ + fp_ + fn_
        return 2 * tp_ / denom if denom else 0.0

    macro_f1 = 0.5 * (f1(tp, fp, fn) + f1(tn, fn, fp))
    return acc, macro_f1


def series_metrics(
    scores_by_series: dict, rankings: dict, weight_pairs: bool = False
) -> tuple[float, float]:
    """Length-weighted best-pick accuracy and Spearman correlation.

    Per series: hit iff the unique score argmax is the ground-truth best;
    rho compares predicted scores against ground-truth quality order.
    """
    num_acc = num_rho = denom = 0.0
    for sid, ranking in rankings.items():
        scores = scores_by_series.get(sid)
        if scores is None or len(scores) != len(ranking):
            raise MetricsError(f"missing or mismatched scores for series {sid!r}")
        n = len(ranking)
        if n < 2:
            raise MetricsError(f"series {sid!r} shorter than 2")
        s = np.asarray(scores, dtype=np.float64)
        top = np.flatnonzero(s == s.max())
        hit = 1.0 if (len(top) == 1 and top[0] == ranking[0]) else 0.0
        quality = np.empty(n)
        for pos, img in enumerate(ranking):
            quality[img] = n - pos  # higher = better
        rho = spearman(s, quality) if len(set(scores)) > 1 else 0.0
        w = (n - 1) if weight_pairs else n
        num_acc += w * hit
        num_rho += w * rho
        denom += w
    if denom == 0:
        raise MetricsError("no series to evaluate")
    return num_acc / denom, num_rho / denom


def corr(pred, gt) -> tuple[float, float]:
    """Spearman and Pearson coefficients for coarse scoring."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise MetricsError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if len(pred) < 3:
        raise MetricsError("need at least 3 samples for correlations")
    if np.all(pred == pred[0]) or np.all(gt == gt[0]):
        raise MetricsError("correlation undefined: constant vector")
    return spearman(pred, gt), _pearson(pred, gt)


@dataclass
class EvalReport:
    overall: dict[str, float]
    per_source: dict[str, dict[str, float]]
    coarse: dict[str, float] | None = None
    counts: dict[str, int] = field(default_factory=dict)
    notes: tuple[str, ...] = REPORT_NOTES

    def to_json(self) -> str:
        payload = {
            "notes": list(self.notes),
            "overall": self.overall,
            "per_source": self.per_source,
            "coarse": self.coarse,
            "counts": self.counts,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = ["acc", "f1", "s_acc", "s_srcc"]
        names = ["bucket"] + cols + ["n_series"]
        rows = []
        for src in sorted(self.per_source):
            m = self.per_source[src]
            rows.append([src] + [f"{m[c]:.4f}" for c in cols]
                        + [str(self.counts.get(src, 0))])
        rows.append(["overall"] + [f"{self.overall[c]:.4f}" for c in cols]
                    + [str(self.counts.get("overall", 0))])
        widths = [max(len(r[k]) for r in [names] + rows) for k in range(len(names))]
        lines = ["# " + "; ".join(self.notes)]
        for r in [names] + rows:
            lines.append("  ".join(x.ljust(w) for x, w in zip(r, widths)))
        if self.coarse:
            lines.append(
                f"coarse: srcc={self.coarse['srcc']:.4f}  plcc={self.coarse['plcc']:.4f}"
            )
        return "\n".join(lines)


def build_report(
    scores_by_series: dict,
    rankings: dict,
    sources: dict,
    coarse_pred=None,
    coarse_gt=None,
    weight_pairs: bool = False,
) -> EvalReport:
    """Assemble the full report: per-source buckets plus overall and coarse."""

    def bucket(sids):
        sb = {sid: scores_by_series[sid] for sid in sids}
        rk = {sid: rankings[sid] for sid in sids}
        acc, f1 = pair_metrics(sb, rk)
        s_acc, s_srcc = series_metrics(sb, rk, weight_pairs)
        return {"acc": acc, "f1": f1, "s_acc": s_acc, "s_srcc": s_srcc}

    all_sids = list(rankings.keys())
    per_source: dict[str, dict[str, float]] = {}
    counts = {"overall": len(all_sids)}
    for src in sorted(set(sources.values())):
        sids = [sid for sid in all_sids if sources[sid] == src]
        if sids:
            per_source[src] = bucket(sids)
            counts[src] = len(sids)
    report = EvalReport(
        overall=bucket(all_sids),
        per_source=per_source,
        counts=counts,
    )
    if coarse_pred is not None and coarse_gt is not None:
        srcc, plcc = corr(coarse_pred, coarse_gt)
        report.coarse = {"srcc": srcc, "plcc": plcc}
    return report
