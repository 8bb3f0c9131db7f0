"""Threshold metrics (FAR/FRR/EER/HTER) and rank-based AUC.

Threshold semantics are fixed and documented: a sample is accepted as live
iff its score is >= tau (boundary inclusive). FAR is the fraction of fakes
accepted, FRR the fraction of reals rejected. The EER threshold is found by
sweeping the midpoints between adjacent distinct scores plus -inf/+inf
sentinels and minimizing |FAR - FRR|; ties prefer smaller FAR + FRR, then
smaller tau. AUC is the Mann-Whitney statistic (probability a random real
outscores a random fake, ties counted one half), computed from midranks in
O(n log n).

Score files are UTF-8 CSV with header ``score,label,domain``; reports are
plain JSON dicts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fasdg.errors import MetricError

THRESHOLD_CONVENTIONS = ("eer-target", "fixed", "eer-dev")


@dataclass
class ScoreSet:
    """Paired (score, binary label, domain) arrays; labels are 1 real, 0 fake."""

    scores: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if not (self.scores.shape == self.labels.shape == self.domains.shape):
            raise MetricError("scores, labels and domains must have equal length")
        if self.scores.ndim != 1:
            raise MetricError("score set must be one-dimensional")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise MetricError("labels must be binary")

    @classmethod
    def from_entries(cls, entries) -> "ScoreSet":
        arr = np.asarray(list(entries), dtype=np.float64)
        if arr.size == 0:
            raise MetricError("empty score set")
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    @property
    def real_scores(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def fake_scores(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def require_both_classes(self) -> None:
        if self.real_scores.size == 0 or self.fake_scores.size == 0:
            raise MetricError(
                f"threshold metrics need both classes; got {self.real_scores.size} real "
                f"and {self.fake_scores.size} fake"
            )


def far_frr(scores: ScoreSet, tau: float) -> tuple[float, float]:
    """False accept / false reject rates at threshold tau (accept iff score >= tau)."""
    scores.require_both_classes()
    far = float(np.mean(scores.fake_scores >= tau))
    frr = float(np.mean(scores.real_scores < tau))
    return far, frr


def threshold_candidates(scores: ScoreSet) -> np.ndarray:
    distinct = np.unique(scores.scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def eer_threshold(scores: ScoreSet) -> tuple[float, float]:
    """Threshold minimizing |FAR - FRR| and the equal error rate there."""
    scores.require_both_classes()
    best = None
    for tau in threshold_candidates(scores):
        far, frr = far_frr(scores, tau)
        key = (abs(far - frr), far + frr, tau)
        if best is None or key < best[0]:
            best = (key, tau, (far + frr) / 2.0)
    return best[1], best[2]


def hter(scores: ScoreSet, tau: float) -> float:
    """Half total error rate at tau: (FAR + FRR) / 2."""
    far, frr = far_frr(scores, tau)
    return (far + frr) / 2.0


def auc(scores: ScoreSet) -> float:
    """Mann-Whitney AUC via midranks; exact tie handling, O(n log n)."""
    scores.require_both_classes()
    s = scores.scores
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    n_real = int(scores.labels.sum())
    n_fake = s.size - n_real
    u = ranks[scores.labels == 1].sum() - n_real * (n_real + 1) / 2.0
    return float(u / (n_real * n_fake))


def select_threshold(
    target: ScoreSet, convention: str, fixed_value: float = 0.5, dev: ScoreSet | None = None
) -> float:
    """Pick the operating threshold per the named convention.

    ``eer-target`` takes the EER threshold on the target set itself (the
    predominant cross-dataset reporting convention), ``fixed`` uses the given
    constant, and ``eer-dev`` computes the EER threshold on a held-out
    source-domain score set.
    """
    if convention == "eer-target":
        tau, _ = eer_threshold(target)
        return tau
    if convention == "fixed":
        return fixed_value
    if convention == "eer-dev":
        if dev is None:
            raise MetricError("eer-dev threshold requires a dev score set")
        tau, _ = eer_threshold(dev)
        return tau
    raise MetricError(f"unknown threshold convention {convention!r}")


def metrics_report(scores: ScoreSet, tau: float, convention: str = "eer-target") -> dict:
    """Full metrics dict: {auc, hter, eer, tau, far, frr, n_real, n_fake, threshold}."""
    far, frr = far_frr(scores, tau)
    _, eer = eer_threshold(scores)
    return {
        "auc": auc(scores),
        "hter": (far + frr) / 2.0,
        "eer": eer,
        "tau": float(tau),
        "far": far,
        "frr": frr,
        "n_real": int(scores.real_scores.size),
        "n_fake": int(scores.fake_scores.size),
        "threshold": convention,
    }


def write_scores_csv(scores: ScoreSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "label", "domain"])
        for s, l, d in zip(scores.scores, scores.labels, scores.domains):
            writer.writerow([repr(float(s)), int(l), int(d)])


def read_scores_csv(path) -> ScoreSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["score", "label", "domain"]:
            raise MetricError(f"bad score CSV header in {path}: {header}")
        rows = [(float(r[0]), int(r[1]), int(r[2])) for r in reader]
    if not rows:
        raise MetricError(f"no scores in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    return ScoreSet(arr[:, 0], arr[:, 1], arr[:, 2])


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
