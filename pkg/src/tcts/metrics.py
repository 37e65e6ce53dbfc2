"""Latency, translation-quality and forecasting metrics.

All functions are pure.  A read/write trace ``g`` lists, for each emitted
target token, how many source tokens had been read.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    """Input outside a metric's domain."""


def _check_trace(g: Sequence[int], src_len: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.int64)
    if g.ndim != 1 or g.size == 0:
        raise MetricError("trace must be a non-empty 1-D sequence")
    if src_len < 1:
        raise MetricError("source length must be >= 1")
    if g.min() < 1 or g.max() > src_len:
        raise MetricError(f"trace values must lie in [1, {src_len}]")
    if np.any(np.diff(g) < 0):
        raise MetricError("trace must be non-decreasing")
    return g


def waitk_trace(k: int, src_len: int, tgt_len: int) -> list[int]:
    """``g(t) = min(t + k - 1, |x|)`` for ``t = 1..|y|``."""
    return [min(t + k - 1, src_len) for t in range(1, tgt_len + 1)]


def average_proportion(g: Sequence[int], src_len: int) -> float:
    """Mean fraction of the source read per emitted token, in (0, 1]."""
    g = _check_trace(g, src_len)
    return float(g.sum()) / (src_len * g.size)


def average_lagging(g: Sequence[int], src_len: int, tgt_len: int | None = None) -> float:
    """Average lag behind an ideal policy, up to the first step reading the whole source.

    ``tgt_len`` sets the rate ``|y|/|x|``; it defaults to the trace length,
    which is the hypothesis length for decoded output.
    """
    g = _check_trace(g, src_len)
    tgt_len = g.size if tgt_len is None else tgt_len
    if tgt_len < 1:
        raise MetricError("target length must be >= 1")
    full = np.nonzero(g == src_len)[0]
    if full.size == 0:
        raise MetricError("trace never reads the whole source")
    tau = int(full[0]) + 1
    t = np.arange(1, tau + 1)
    rate = tgt_len / src_len
    return float(np.mean(g[:tau] - (t - 1) / rate))


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4,
                smooth: bool = False, epsilon: float = 1e-9) -> float:
    """Corpus BLEU in [0, 100] with clipped n-gram counts and a brevity penalty.

    With ``smooth`` a zero match count is replaced by ``epsilon``.
    """
    if len(hypotheses) != len(references):
        raise MetricError(f"corpus sizes differ: {len(hypotheses)} hypotheses, {len(references)} references")
    if not hypotheses:
        raise MetricError("empty corpus")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    if smooth:
        matches = np.where(matches > 0, matches, epsilon)
    if np.any(matches == 0) or np.any(totals == 0):
        return 0.0
    log_p = float(np.mean(np.log(matches / totals)))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman correlation with average ranks for ties; NaN if either side is constant."""
    ra = rankdata(a)
    rb = rankdata(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        return math.nan
    return float(np.clip(ra @ rb / den, -1.0, 1.0))


def daily_rank_ic(dates: Sequence, preds: Sequence[float], labels: Sequence[float]) -> dict:
    """Cross-sectional Spearman correlation for each date with at least two instruments.

    Dates where predictions or labels are constant have no defined
    correlation and are skipped.
    """
    dates = np.asarray(dates)
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if not (len(dates) == len(preds) == len(labels)):
        raise MetricError("dates, predictions and labels must have equal length")
    if not (np.all(np.isfinite(preds)) and np.all(np.isfinite(labels))):
        raise MetricError("predictions and labels must be finite")
    out = {}
    order = np.argsort(dates, kind="stable")
    uniq, starts = np.unique(dates[order], return_index=True)
    bounds = list(starts) + [len(order)]
    for j, d in enumerate(uniq):
        idx = order[bounds[j]:bounds[j + 1]]
        if idx.size < 2:
            continue
        ic = spearman(preds[idx], labels[idx])
        if not math.isnan(ic):
            out[d.item() if hasattr(d, "item") else d] = ic
    return out


def rank_ic(dates: Sequence, preds: Sequence[float], labels: Sequence[float],
            return_daily: bool = False):
    """Mean over dates of the cross-sectional Spearman correlation."""
    daily = daily_rank_ic(dates, preds, labels)
    if not daily:
        raise MetricError("no date has two or more instruments with varying values")
    value = float(np.mean(list(daily.values())))
    return (value, daily) if return_daily else value


def icir(daily_ics: Sequence[float]) -> float:
    """Mean over population standard deviation of daily information coefficients."""
    ics = np.asarray(list(daily_ics), dtype=np.float64)
    if ics.size < 2:
        raise MetricError("ICIR needs at least two days")
    sd = float(ics.std())
    if sd == 0 or sd < 1e-15 * max(1.0, abs(float(ics.mean()))):
        raise MetricError("daily ICs have zero standard deviation")
    return float(ics.mean()) / sd


def mse(preds: Sequence[float], labels: Sequence[float]) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size == 0:
        raise MetricError("predictions and labels must be non-empty with equal shapes")
    return float(np.mean((preds - labels) ** 2))


def write_metric_rows(path, rows: Sequence[tuple[str, str, str, float]]) -> None:
    """CSV rows of (run id, split, metric name, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "split", "metric", "value"])
        for run_id, split, name, value in rows:
            w.writerow([run_id, split, name, repr(float(value))])
