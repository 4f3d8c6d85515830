"""Evaluation harness: ROC/PR metrics, performance gap, and advantage.

Orientation: ID is the positive class and a higher score means "more
ID-like".  AUROC below 0.5 therefore signals an inverted detector.  Ties
receive half credit per tied pair (Mann-Whitney convention).  All metrics
are computed in 64-bit reals.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import SPLIT_ID_TEST, OOD_PREFIX


@dataclass(frozen=True)
class ScoreColumn:
    """A named score over samples; higher = more ID-like."""

    name: str
    values: dict[str, float]

    def __post_init__(self):
        bad = [s for s, v in self.values.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite score for sample(s) {bad[:5]}")

    def subset(self, sample_ids):
        missing = [s for s in sample_ids if s not in self.values]
        if missing:
            raise ValueError(
                f"column {self.name!r} missing sample(s) {missing[:5]}"
            )
        return np.array([self.values[s] for s in sample_ids])


def _check(scores, name):
    arr = np.asarray(scores, dtype=float)
    if arr.size == 0:
        raise ValueError(f"{name} scores must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} scores must be finite")
    return arr


def _tied_ranks(values):
    """1-based ranks with ties assigned their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(id_scores, ood_scores):
    """Area under the ROC curve by the rank statistic.

    Equals (#{id > ood pairs} + 0.5 * #{tied pairs}) / (|ID| * |OOD|).
    """
    ids = _check(id_scores, "ID")
    oods = _check(ood_scores, "OOD")
    ranks = _tied_ranks(np.concatenate([ids, oods]))
    n_id, n_ood = len(ids), len(oods)
    rank_sum = float(np.sum(ranks[:n_id]))
    return (rank_sum - n_id * (n_id + 1) / 2.0) / (n_id * n_ood)


def auprc(id_scores, ood_scores):
    """Area under the precision-recall step curve, ID positive.

    The curve is swept across all distinct thresholds in descending order;
    the area is sum over thresholds of (recall step) * precision.
    """
    ids = _check(id_scores, "ID")
    oods = _check(ood_scores, "OOD")
    n_id = len(ids)
    scores = np.concatenate([ids, oods])
    labels = np.concatenate([np.ones(n_id), np.zeros(len(oods))])
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    l_sorted = labels[order]
    tp = np.cumsum(l_sorted)
    fp = np.cumsum(1.0 - l_sorted)
    # last index of each block of equal scores = one point per threshold
    ends = np.append(np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1)
    recall = tp[ends] / n_id
    precision = tp[ends] / (tp[ends] + fp[ends])
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def fpr_at_tpr(id_scores, ood_scores, target_tpr=0.8):
    """False positive rate at the given true positive rate.

    The threshold is the largest observed ID score tau with
    #{id >= tau}/|ID| >= target_tpr; no interpolation.  Returns
    #{ood >= tau}/|OOD|.
    """
    ids = _check(id_scores, "ID")
    oods = _check(ood_scores, "OOD")
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"target_tpr must be in (0, 1], got {target_tpr}")
    candidates = np.unique(ids)[::-1]  # descending
    n_id = len(ids)
    for tau in candidates:
        if np.count_nonzero(ids >= tau) / n_id >= target_tpr:
            return float(np.count_nonzero(oods >= tau) / len(oods))
    # unreachable: tau = min(ids) always achieves tpr 1
    raise AssertionError("no threshold reached the target TPR")


def gap(id_scores, ood_scores):
    """Performance gap: mean ID score minus mean OOD score, in nats."""
    ids = _check(id_scores, "ID")
    oods = _check(ood_scores, "OOD")
    return float(np.mean(ids) - np.mean(oods))


def advantage(score_col, likelihood_col, ds, ood_split=None):
    """Incremental effectiveness of a score over the likelihood baseline.

    gap(S) - gap(likelihood), both over id_test vs the selected OOD split
    (all OOD records when ``ood_split`` is None).
    """
    id_ids = [r.sample_id for r in ds.by_split(SPLIT_ID_TEST)]
    if ood_split is None:
        ood_ids = [r.sample_id for r in ds.records if r.is_ood]
    else:
        ood_ids = [r.sample_id for r in ds.by_split(OOD_PREFIX + ood_split)]
    g_s = gap(score_col.subset(id_ids), score_col.subset(ood_ids))
    g_l = gap(likelihood_col.subset(id_ids), likelihood_col.subset(ood_ids))
    return g_s - g_l


def classify(scores, threshold):
    """Threshold classifier: ID iff S(x) > threshold, boundary goes to OOD."""
    return {
        sid: ("ID" if v > threshold else "OOD") for sid, v in scores.values.items()
    }


@dataclass(frozen=True)
class EvalRow:
    score: str
    ood_split: str
    auroc: float
    auprc: float
    fpr80: float
    gap: float
    advantage: float


@dataclass(frozen=True)
class EvalReport:
    """AUROC/AUPRC/FPR80 plus gap and advantage for each score column."""

    rows: tuple[EvalRow, ...]

    def to_jsonl(self):
        lines = []
        for r in self.rows:
            lines.append(json.dumps({
                "score": r.score,
                "ood": r.ood_split,
                "auroc": r.auroc,
                "auprc": r.auprc,
                "fpr80": r.fpr80,
                "gap": r.gap,
                "advantage": r.advantage,
            }))
        return "\n".join(lines) + "\n"

    def to_table(self):
        """Human-readable table, 4 significant digits (full precision kept
        internally and in the JSONL form)."""
        header = f"{'score':<12} {'ood':<16} {'auroc':>8} {'auprc':>8} " \
                 f"{'fpr80':>8} {'gap':>12} {'advantage':>12}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.score:<12} {r.ood_split:<16} {r.auroc:>8.4g} "
                f"{r.auprc:>8.4g} {r.fpr80:>8.4g} {r.gap:>12.4g} "
                f"{r.advantage:>12.4g}"
            )
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        rows = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            obj = json.loads(raw)
            rows.append(EvalRow(
                score=obj["score"], ood_split=obj["ood"], auroc=obj["auroc"],
                auprc=obj["auprc"], fpr80=obj["fpr80"], gap=obj["gap"],
                advantage=obj["advantage"],
            ))
        return cls(rows=tuple(rows))
