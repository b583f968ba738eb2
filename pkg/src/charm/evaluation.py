"""Score regression metrics and distribution losses.

Covers both labeling conventions used by aesthetic/quality datasets: plain
scalar scores and per-image score histograms (a probability over B ordered
bins). CSV loading accepts either form; see read_scores_csv.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DEFAULT_ACC_THRESHOLD = 5.0


@dataclass(frozen=True)
class ScoreDistribution:
    """Probabilities over ordered score bins (e.g. a 1..10 rating histogram)."""

    probabilities: np.ndarray
    bin_values: np.ndarray

    def __post_init__(self):
        p, v = self.probabilities, self.bin_values
        if p.ndim != 1 or p.shape != v.shape:
            raise ValueError("probabilities and bin_values must be equal-length 1-D")
        if p.size < 2:
            raise ValueError("need at least two bins")
        if np.any(p < 0):
            raise ValueError("negative probability")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {float(p.sum())}, expected 1")
        if np.any(np.diff(v) <= 0):
            raise ValueError("bin_values must be strictly increasing")

    def mean(self) -> float:
        return mean_score(self.probabilities, self.bin_values)


def mean_score(probabilities: np.ndarray, bin_values: np.ndarray) -> float:
    """Expected value of a binned score distribution."""
    return float(np.asarray(probabilities, dtype=np.float64) @ np.asarray(bin_values, dtype=np.float64))


def emd_loss(pred: ScoreDistribution, gt: ScoreDistribution, r: float = 2.0) -> float:
    """Earth mover's distance between binned distributions.

    ((1/B) * sum |CDF_pred - CDF_gt|**r) ** (1/r) over the B shared bins.
    """
    if pred.probabilities.shape != gt.probabilities.shape:
        raise ValueError("distributions must share bin count")
    if not np.array_equal(pred.bin_values, gt.bin_values):
        raise ValueError("distributions must share bin values")
    if r <= 0:
        raise ValueError("r must be positive")
    diff = np.abs(np.cumsum(pred.probabilities) - np.cumsum(gt.probabilities))
    return float((np.mean(diff**r)) ** (1.0 / r))


def l1_loss(pred: float, gt: float) -> float:
    return abs(float(pred) - float(gt))


def _as_clean_vector(x, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ValueError(f"{name} needs at least two values")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite values in {name}")
    return v


def plcc(pred, gt) -> float:
    """Pearson linear correlation; raises on zero variance."""
    p = _as_clean_vector(pred, "pred")
    g = _as_clean_vector(gt, "gt")
    if p.size != g.size:
        raise ValueError("length mismatch")
    pc = p - p.mean()
    gc = g - g.mean()
    denom = np.sqrt((pc @ pc) * (gc @ gc))
    if denom == 0.0:
        raise ValueError("correlation undefined: an input has zero variance")
    return float((pc @ gc) / denom)


def _midranks(v: np.ndarray) -> np.ndarray:
    # ranks 1..n with ties sharing the mean of the positions they occupy
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(pred, gt) -> float:
    """Spearman rank correlation: Pearson over mid-ranks."""
    p = _as_clean_vector(pred, "pred")
    g = _as_clean_vector(gt, "gt")
    if p.size != g.size:
        raise ValueError("length mismatch")
    return plcc(_midranks(p), _midranks(g))


def acc(pred, gt, threshold: float = DEFAULT_ACC_THRESHOLD) -> float:
    """Fraction of pairs that fall on the same side of a decision threshold."""
    p = _as_clean_vector(pred, "pred")
    g = _as_clean_vector(gt, "gt")
    if p.size != g.size:
        raise ValueError("length mismatch")
    return float(np.mean((p > threshold) == (g > threshold)))


@dataclass(frozen=True)
class ScoreTable:
    """Parsed score CSV: per-id scalar scores, plus distributions if given."""

    ids: tuple[str, ...]
    scores: np.ndarray
    distributions: np.ndarray | None = None
    bin_values: np.ndarray | None = None

    def distribution(self, i: int) -> ScoreDistribution:
        if self.distributions is None:
            raise ValueError("table holds scalar scores only")
        return ScoreDistribution(self.distributions[i], self.bin_values)


def read_scores_csv(path) -> ScoreTable:
    """Load a score table from CSV.

    Two layouts, chosen by header: `id,score` for scalars, or `id,p1,...,pB`
    for distributions over bins valued 1..B (scalar scores then being the
    distribution means). Raises on malformed headers, rows, or probabilities.
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty CSV {path}") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "id":
            raise ValueError(f"{path}: first column must be 'id', got {header[:1]}")
        rows = [row for row in reader if row]

    if header[1:] == ["score"]:
        ids, scores = [], []
        for row in rows:
            if len(row) != 2:
                raise ValueError(f"{path}: expected 2 columns, got {len(row)}")
            ids.append(row[0].strip())
            scores.append(float(row[1]))
        return ScoreTable(tuple(ids), np.asarray(scores, dtype=np.float64))

    expected = [f"p{i}" for i in range(1, len(header))]
    if len(header) < 3 or header[1:] != expected:
        raise ValueError(
            f"{path}: columns must be 'id,score' or 'id,p1..pB', got {header}"
        )
    bins = len(header) - 1
    bin_values = np.arange(1, bins + 1, dtype=np.float64)
    ids, dists = [], []
    for row in rows:
        if len(row) != bins + 1:
            raise ValueError(f"{path}: expected {bins + 1} columns, got {len(row)}")
        ids.append(row[0].strip())
        dists.append([float(x) for x in row[1:]])
    dists = np.asarray(dists, dtype=np.float64)
    for i, d in enumerate(dists):
        ScoreDistribution(d, bin_values)  # validates
    scores = dists @ bin_values
    return ScoreTable(tuple(ids), scores, dists, bin_values)


def _join_order(pred: ScoreTable, gt: ScoreTable) -> list[int]:
    if set(pred.ids) != set(gt.ids):
        missing = set(gt.ids) ^ set(pred.ids)
        raise ValueError(f"id sets differ (symmetric difference size {len(missing)})")
    index = {k: i for i, k in enumerate(pred.ids)}
    return [index[k] for k in gt.ids]


def aligned_scores(pred: ScoreTable, gt: ScoreTable) -> tuple[np.ndarray, np.ndarray]:
    """Scalar score vectors joined on id, in gt order."""
    return pred.scores[_join_order(pred, gt)], gt.scores


def metric_report(
    pred: ScoreTable, gt: ScoreTable, acc_threshold: float = DEFAULT_ACC_THRESHOLD, emd_r: float = 2.0
) -> dict:
    """Standard metric bundle over two aligned score tables.

    Tables are joined on id (order taken from gt); a mismatch in the id sets
    is an error. EMD is included only when both sides carry distributions.
    """
    order = _join_order(pred, gt)
    p = pred.scores[order]
    g = gt.scores
    report = {
        "count": int(g.size),
        "plcc": plcc(p, g),
        "srcc": srcc(p, g),
        "acc": acc(p, g, acc_threshold),
        "l1": float(np.mean(np.abs(p - g))),
        "acc_threshold": float(acc_threshold),
    }
    if pred.distributions is not None and gt.distributions is not None:
        emds = [
            emd_loss(pred.distribution(i), gt.distribution(j), r=emd_r)
            for j, i in enumerate(order)
        ]
        report["emd"] = float(np.mean(emds))
        report["emd_r"] = float(emd_r)
    return report
