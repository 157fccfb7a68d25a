"""Evaluation metrics: errors, contrast, correlation, and rank tests.

Percent relative error against a positive reference, generalized contrast-
to-noise ratio from histogram overlap, Pearson correlation, and a two-sided
Mann-Whitney U test (exact by enumeration for small samples, tie-corrected
normal approximation otherwise). Summaries report median +/- half the
interquartile range.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .volio import write_csv

GCNR_BINS = 256
EXACT_MW_LIMIT = 8  # exact enumeration when both samples are this small


def abs_error(reference, estimate):
    return float(abs(float(estimate) - float(reference)))


def rel_error(reference, estimate):
    """Percent relative error |x - xhat| / x * 100; reference must be > 0."""
    reference = float(reference)
    if not np.isfinite(reference) or reference <= 0:
        raise DomainError(f"relative error needs a positive reference, got {reference}")
    return abs(float(estimate) - reference) / reference * 100.0


def gcnr(region_a, region_b, n_bins=GCNR_BINS):
    """Generalized contrast-to-noise: 1 minus the histogram overlap of the
    two pixel populations, binned jointly over their pooled range."""
    a = np.asarray(region_a, dtype=float).ravel()
    b = np.asarray(region_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise DomainError("gCNR needs non-empty regions")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DomainError("gCNR regions must be finite")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0  # identical constants are indistinguishable
    edges = np.linspace(lo, hi, n_bins + 1)
    pa, _ = np.histogram(a, bins=edges)
    pb, _ = np.histogram(b, bins=edges)
    overlap = np.minimum(pa / a.size, pb / b.size).sum()
    return float(1.0 - overlap)


def pearson_r(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise DomainError("correlation needs two equal-length samples of >= 2")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("correlation inputs must be finite")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DomainError("correlation undefined for a constant sample")
    return float(np.corrcoef(x, y)[0, 1])


def _average_ranks(pooled):
    """Ranks 1..N with ties sharing the average rank."""
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=float)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_statistic(ranks, idx_x, n_x, n_y):
    # pairs (x, y) with x > y, ties counting half
    r_x = ranks[list(idx_x)].sum()
    return r_x - n_x * (n_x + 1) / 2.0


def mann_whitney_u(x, y, method="auto"):
    """Two-sided Mann-Whitney U; returns (U of the first sample, p).

    Exact permutation enumeration when both samples have <= 8 values
    (tie-safe: every reassignment is ranked on the actual pooled values);
    otherwise a tie-corrected normal approximation with continuity
    correction. `method` forces one path: "exact" (only valid at small n),
    "approx", or the size-based "auto". The p-value measures deviations
    |U - n1 n2 / 2| at least as large as observed.
    """
    if method not in ("auto", "exact", "approx"):
        raise DomainError(f"unknown method {method!r}")
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size == 0 or y.size == 0:
        raise DomainError("rank test needs non-empty samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("rank test inputs must be finite")
    n_x, n_y = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = _average_ranks(pooled)
    u_obs = _u_statistic(ranks, range(n_x), n_x, n_y)
    center = n_x * n_y / 2.0
    dev_obs = abs(u_obs - center)

    small = n_x <= EXACT_MW_LIMIT and n_y <= EXACT_MW_LIMIT
    if method == "exact" and not small:
        raise DomainError(
            f"exact enumeration limited to samples of <= {EXACT_MW_LIMIT}")
    if method == "exact" or (method == "auto" and small):
        total = 0
        extreme = 0
        for combo in itertools.combinations(range(n_x + n_y), n_x):
            total += 1
            if abs(_u_statistic(ranks, combo, n_x, n_y) - center) >= dev_obs - 1e-12:
                extreme += 1
        return float(u_obs), extreme / total

    n = n_x + n_y
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = ((counts ** 3 - counts).sum()) / (n * (n - 1.0))
    sigma2 = n_x * n_y / 12.0 * ((n + 1.0) - tie_term)
    if sigma2 <= 0:
        return float(u_obs), 1.0  # all values tied
    z = max(dev_obs - 0.5, 0.0) / math.sqrt(sigma2)
    p = math.erfc(z / math.sqrt(2.0))
    return float(u_obs), min(p, 1.0)


def summarize(values):
    """(median, half-interquartile-range) with linear-interpolation quantiles."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise DomainError("summary of an empty sample")
    if not np.all(np.isfinite(v)):
        raise DomainError("summary inputs must be finite")
    q25, q50, q75 = np.percentile(v, [25.0, 50.0, 75.0])
    return float(q50), float((q75 - q25) / 2.0)


@dataclass
class MetricReport:
    """Accumulates labeled metric rows; writes a flat CSV."""

    rows: list = field(default_factory=list)

    def add(self, metric, value, **context):
        row = {"metric": str(metric), "value": float(value)}
        row.update({str(k): v for k, v in context.items()})
        self.rows.append(row)

    def values(self, metric):
        return [r["value"] for r in self.rows if r["metric"] == metric]

    def write(self, path):
        if not self.rows:
            raise DomainError("empty metric report")
        keys = ["metric", "value"]
        for row in self.rows:
            for k in row:
                if k not in keys:
                    keys.append(k)
        return write_csv(path, self.rows, fieldnames=keys)
