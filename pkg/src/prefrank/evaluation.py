"""Evaluation harness: Spearman correlation against gold scores, score
shifting to [0, 1], per-segment mean ranking distance, and plot-ready report
files."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .bws import ScoreVector

N_HISTOGRAM_BINS = 20
REPORT_HEADER = "# prefrank-report v1"


class EvalError(ValueError):
    """Raised for mismatched score coverage or malformed reports."""


def _aligned(pred: ScoreVector, gold: ScoreVector):
    if pred.ids() != gold.ids():
        only_pred = sorted(pred.ids() - gold.ids())[:5]
        only_gold = sorted(gold.ids() - pred.ids())[:5]
        raise EvalError(
            f"prediction and gold cover different ids "
            f"(pred-only: {only_pred}, gold-only: {only_gold})"
        )
    ids = sorted(pred.ids())
    p = np.array([pred[d] for d in ids])
    g = np.array([gold[d] for d in ids])
    return ids, p, g


def spearman(pred: ScoreVector, gold: ScoreVector) -> float:
    """Spearman's rank correlation with average-rank tie handling."""
    ids, p, g = _aligned(pred, gold)
    if len(ids) < 2:
        raise EvalError("need at least two documents for a rank correlation")
    rho = stats.spearmanr(p, g).statistic
    return float(rho)


def shift_scores(scores: ScoreVector) -> ScoreVector:
    """Map scores in [-1, 1] to [0, 1] via r -> (r + 1) * 0.5."""
    for d, r in scores.entries.items():
        if not (-1.0 <= r <= 1.0):
            raise EvalError(f"score {r} for id {d!r} is outside [-1, 1]")
    return ScoreVector(
        {d: (r + 1.0) * 0.5 for d, r in scores.entries.items()}, scores.provenance
    )


def _positions(values, ids):
    """0-based global rank position per id, ascending by value then id."""
    order = sorted(range(len(ids)), key=lambda i: (values[i], ids[i]))
    pos = np.empty(len(ids), dtype=np.int64)
    for rank, i in enumerate(order):
        pos[i] = rank
    return pos


def segment_sizes(n: int, n_segments: int) -> list[int]:
    """Equal segment sizes with the remainder spread over the earliest ones."""
    base, rem = divmod(n, n_segments)
    return [base + (1 if s < rem else 0) for s in range(n_segments)]


def mrd_segments(pred: ScoreVector, gold: ScoreVector, n_segments: int = 10):
    """Mean normalized absolute rank displacement per gold-score segment.

    Documents are sorted ascending by gold score (ties by id) and cut into
    `n_segments` contiguous segments; each segment's value is
    sum(|pos_pred - pos_gold|) / (N * segment_size).
    """
    ids, p, g = _aligned(pred, gold)
    n = len(ids)
    if n < n_segments:
        raise EvalError(f"need at least {n_segments} documents, got {n}")
    pos_gold = _positions(g, ids)
    pos_pred = _positions(p, ids)
    displacement = np.abs(pos_pred - pos_gold)

    by_gold = np.argsort(pos_gold)
    out = []
    start = 0
    for size in segment_sizes(n, n_segments):
        members = by_gold[start : start + size]
        out.append(float(displacement[members].sum()) / (n * size))
        start += size
    return out


@dataclass(frozen=True)
class EvalReport:
    spearman: float
    mrd_per_segment: tuple
    n_test: int
    histogram: tuple          # ((lo, hi, count), ...) over shifted scores
    scatter: tuple            # ((id, pred, gold), ...) sorted by id
    model_id: str = ""
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.mrd_per_segment) != 10:
            raise EvalError("reports carry exactly 10 ranking-distance segments")
        if any(v < 0 for v in self.mrd_per_segment):
            raise EvalError("ranking distances cannot be negative")


def _to_unit_interval(values):
    """Shift [-1, 1] scores to [0, 1]; out-of-range score vectors (e.g. raw
    GP utilities) are min-max mapped to [-1, 1] first, which preserves the
    ranking and the histogram shape."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if lo < -1.0 or hi > 1.0:
        span = hi - lo
        values = (2.0 * (values - lo) / span - 1.0) if span > 0 else np.zeros_like(values)
    return (values + 1.0) * 0.5


def build_report(pred: ScoreVector, gold: ScoreVector, model_id: str = "",
                 fraction: float = 1.0, seed: int = 0) -> EvalReport:
    ids, p, g = _aligned(pred, gold)
    shifted = _to_unit_interval(p)
    edges = np.linspace(0.0, 1.0, N_HISTOGRAM_BINS + 1)
    counts, _ = np.histogram(shifted, bins=edges)
    histogram = tuple(
        (float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(N_HISTOGRAM_BINS)
    )
    scatter = tuple((d, float(pred[d]), float(gold[d])) for d in ids)
    return EvalReport(
        spearman=spearman(pred, gold),
        mrd_per_segment=tuple(mrd_segments(pred, gold)),
        n_test=len(ids),
        histogram=histogram,
        scatter=scatter,
        model_id=model_id,
        fraction=fraction,
        seed=seed,
    )


def emit_report(report: EvalReport, path) -> None:
    """Write the versioned report: header fields, then TSV blocks for the
    ranking-distance bars, score histogram, and pred-vs-gold scatter."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write(f"spearman\t{report.spearman!r}\n")
        fh.write(f"n_test\t{report.n_test}\n")
        fh.write(f"model\t{report.model_id}\n")
        fh.write(f"fraction\t{report.fraction!r}\n")
        fh.write(f"seed\t{report.seed}\n")
        fh.write("[mrd]\n")
        for s, v in enumerate(report.mrd_per_segment):
            fh.write(f"{s}\t{v!r}\n")
        fh.write("[histogram]\n")
        for lo, hi, count in report.histogram:
            fh.write(f"{lo!r}\t{hi!r}\t{count}\n")
        fh.write("[scatter]\n")
        for doc_id, p, g in report.scatter:
            fh.write(f"{doc_id}\t{p!r}\t{g!r}\n")


def parse_report(path) -> EvalReport:
    fields = {}
    mrd, histogram, scatter = [], [], []
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != REPORT_HEADER:
            raise EvalError(f"{path}: not a v1 report file")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("["):
                section = line
                continue
            cols = line.split("\t")
            if section is None:
                fields[cols[0]] = cols[1]
            elif section == "[mrd]":
                mrd.append(float(cols[1]))
            elif section == "[histogram]":
                histogram.append((float(cols[0]), float(cols[1]), int(cols[2])))
            elif section == "[scatter]":
                scatter.append((cols[0], float(cols[1]), float(cols[2])))
    return EvalReport(
        spearman=float(fields["spearman"]),
        mrd_per_segment=tuple(mrd),
        n_test=int(fields["n_test"]),
        histogram=tuple(histogram),
        scatter=tuple(scatter),
        model_id=fields.get("model", ""),
        fraction=float(fields.get("fraction", 1.0)),
        seed=int(fields.get("seed", 0)),
    )
