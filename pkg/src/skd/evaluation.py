"""Stack scoring, ROC AUC and DeLong statistics."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .datamodel import Dataset, StackRecord
from .model import DualHeadModel, predict_scores

POOLED = "all"


def stack_score(model: DualHeadModel, stack: StackRecord) -> float:
    """Maximum slice classification score over the stack."""
    if not stack.slices:
        raise ValueError(f"stack {stack.id} is empty")
    return float(predict_scores(model, stack.images()).max())


def _check_classes(pos, neg):
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    return pos, neg


def placements(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    """DeLong placement values (V10 over positives, V01 over negatives).

    V10[i] = mean_j psi(pos_i, neg_j), V01[j] = mean_i psi(pos_i, neg_j) with
    psi = 1 / 0.5 / 0 for >, =, <.  Computed from midranks in O(N log N).
    """
    pos, neg = _check_classes(pos, neg)
    m, n = pos.size, neg.size
    r_all = stats.rankdata(np.concatenate([pos, neg]))
    r_pos = stats.rankdata(pos)
    r_neg = stats.rankdata(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return v10, v01


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC (ties count one half).

    Computed as ``2U / (2mn)`` where ``2U`` is an exact integer (midranks are
    half-integers), so the result is the correctly rounded pair-count ratio.
    """
    pos, neg = _check_classes(pos_scores, neg_scores)
    m, n = pos.size, neg.size
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    two_u = int(round(2.0 * ranks[:m].sum())) - m * (m + 1)
    return two_u / (2 * m * n)


@dataclasses.dataclass
class AucCI:
    auc: float
    ci_low: float
    ci_high: float
    variance: float
    degenerate: bool = False


def delong_variance(pos, neg) -> float:
    v10, v01 = placements(pos, neg)
    m, n = v10.size, v01.size
    if m < 2 or n < 2:
        raise ValueError("DeLong variance needs at least two cases per class")
    return float(np.var(v10, ddof=1) / m + np.var(v01, ddof=1) / n)


def delong_ci(pos_scores, neg_scores, level: float = 0.95) -> AucCI:
    """AUC with a normal-approximation DeLong interval, clipped to [0, 1].

    A zero variance (e.g. perfect separation) yields a zero-width interval
    flagged ``degenerate``.
    """
    a = auc(pos_scores, neg_scores)
    var = delong_variance(pos_scores, neg_scores)
    if var <= 0:
        return AucCI(a, a, a, 0.0, True)
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * math.sqrt(var)
    return AucCI(a, max(0.0, a - half), min(1.0, a + half), var)


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return scores[labels == 1], scores[labels == 0]


def delong_paired_test(scores_a, scores_b, labels) -> float:
    """Two-sided p-value for equal AUCs of two scorers on the same cases."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    if not (len(scores_a) == len(scores_b) == len(labels)):
        raise ValueError("scores and labels must have the same length")
    if len(np.unique(labels)) != 2:
        raise ValueError("labels must contain both classes")
    z, _ = delong_paired_statistic(scores_a, scores_b, labels)
    if z is None:
        return 1.0
    if math.isinf(z):
        return 0.0
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def delong_paired_statistic(scores_a, scores_b, labels):
    """(z, components) where z = (auc_a - auc_b) / sd; z is None when both the
    difference and its variance vanish."""
    pa, na = _split(scores_a, labels)
    pb, nb = _split(scores_b, labels)
    m, n = pa.size, na.size
    if m < 2 or n < 2:
        raise ValueError("paired DeLong test needs at least two cases per class")
    v10a, v01a = placements(pa, na)
    v10b, v01b = placements(pb, nb)
    s10 = np.cov(np.vstack([v10a, v10b]), ddof=1)
    s01 = np.cov(np.vstack([v01a, v01b]), ddof=1)
    cov = s10 / m + s01 / n
    diff = v10a.mean() - v10b.mean()
    var = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    parts = {"auc_a": v10a.mean(), "auc_b": v10b.mean(), "var_a": cov[0, 0],
             "var_b": cov[1, 1], "cov": cov[0, 1], "var_diff": var}
    if var <= 1e-15:
        if abs(diff) <= 1e-15:
            return None, parts
        return math.copysign(math.inf, diff), parts
    return float(diff / math.sqrt(var)), parts


# --------------------------------------------------------------------------
# evaluation tables


@dataclasses.dataclass
class DomainMetrics:
    auc: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int
    degenerate: bool = False


@dataclasses.dataclass
class ScoreRow:
    stack_id: str
    domain: str
    label: int
    score: float


@dataclasses.dataclass
class EvalResult:
    domains: dict[str, DomainMetrics | None]
    scores: list[ScoreRow]
    pairwise: dict[tuple[str, str], float] = dataclasses.field(default_factory=dict)

    def auc(self, domain: str = POOLED) -> float | None:
        m = self.domains.get(domain)
        return None if m is None else m.auc

    def to_dict(self) -> dict:
        return {
            "domains": {
                k: (None if v is None else dataclasses.asdict(v))
                for k, v in self.domains.items()
            },
            "pairwise": [
                {"model_a": a, "model_b": b, "p_value": p}
                for (a, b), p in sorted(self.pairwise.items())
            ],
        }


def metrics_for(pos, neg) -> DomainMetrics | None:
    pos, neg = list(pos), list(neg)
    if not pos or not neg:
        return None
    if len(pos) < 2 or len(neg) < 2:
        a = auc(pos, neg)
        return DomainMetrics(a, a, a, len(pos), len(neg), True)
    ci = delong_ci(pos, neg)
    return DomainMetrics(ci.auc, ci.ci_low, ci.ci_high, len(pos), len(neg), ci.degenerate)


def metrics_from_scores(rows: Sequence[ScoreRow]) -> dict[str, DomainMetrics | None]:
    out: dict[str, DomainMetrics | None] = {}
    for domain in sorted({r.domain for r in rows}):
        sel = [r for r in rows if r.domain == domain]
        out[domain] = metrics_for([r.score for r in sel if r.label == 1],
                                  [r.score for r in sel if r.label == 0])
    out[POOLED] = metrics_for([r.score for r in rows if r.label == 1],
                              [r.score for r in rows if r.label == 0])
    return out


def score_stacks(model: DualHeadModel, ds: Dataset, split: str = "test") -> list[ScoreRow]:
    stacks = sorted(ds.in_split(split), key=lambda s: s.id)
    if not stacks:
        raise ValueError(f"split {split!r} is empty")
    return [ScoreRow(s.id, s.domain, int(ds.eval_truth[s.id]), stack_score(model, s))
            for s in stacks]


def evaluate(model: DualHeadModel, ds: Dataset, split: str = "test") -> EvalResult:
    rows = score_stacks(model, ds, split)
    return EvalResult(metrics_from_scores(rows), rows)


def evaluate_scores(rows: Sequence[ScoreRow]) -> EvalResult:
    return EvalResult(metrics_from_scores(rows), list(rows))


def write_scores(rows: Sequence[ScoreRow], path: str | os.PathLike):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stack_id", "domain", "label", "score"])
        for r in rows:
            w.writerow([r.stack_id, r.domain, r.label, repr(float(r.score))])


def read_scores(path: str | os.PathLike) -> list[ScoreRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [ScoreRow(r["stack_id"], r["domain"], int(r["label"]), float(r["score"]))
                for r in csv.DictReader(f)]


def pairwise_pvalues(runs: Mapping[str, Sequence[ScoreRow]], reference: str) -> dict:
    """Paired DeLong p-values of every run against ``reference`` (pooled)."""
    ref = {r.stack_id: r for r in runs[reference]}
    out = {}
    for name, rows in runs.items():
        if name == reference:
            continue
        by_id = {r.stack_id: r for r in rows}
        if set(by_id) != set(ref):
            raise ValueError(f"run {name} was scored on different stacks than {reference}")
        ids = sorted(ref)
        out[(reference, name)] = delong_paired_test(
            [ref[i].score for i in ids], [by_id[i].score for i in ids],
            [ref[i].label for i in ids],
        )
    return out
