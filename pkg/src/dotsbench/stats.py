"""Paired statistical comparison primitives.

Wilcoxon signed-rank with an exact null distribution for small samples
(sign-assignment enumeration via dynamic programming, average ranks on
ties) and a tie-corrected, continuity-corrected normal approximation
beyond that. McNemar's exact two-sided binomial test with the
continuity-corrected chi-square alongside. Percentile-bootstrap
confidence intervals under a fixed seed.

scipy's exact Wilcoxon path refuses ties, and we need the exact
distribution over the observed (possibly tied) ranks, so the null
enumeration is implemented here; the test suite checks it against a full
2^n sign enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXACT_WILCOXON_MAX_N = 25


@dataclass
class WilcoxonResult:
    statistic: float      # min(W+, W-)
    p_two_sided: float
    n_effective: int      # after zero removal
    method: str           # "exact" | "normal" | "degenerate"
    all_zero: bool = False


@dataclass
class McNemarResult:
    b: int                # discordant improved
    c: int                # discordant worsened
    p_exact: float
    p_chi2_corrected: float


@dataclass
class MeanEffect:
    mean: float
    ci_low: float
    ci_high: float
    level: float
    n: int
    ci_defined: bool


def _normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _average_ranks(values: list[float]) -> list[float]:
    """Ranks of |values| with average ranks on ties (1-based)."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0  # mean of 1-based positions i+1..j+1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_tail_prob(ranks: list[float], t_obs: float) -> float:
    """P(W <= t_obs) where W is the rank sum of a uniformly random sign
    assignment over the given ranks. Ranks are doubled so tied average
    ranks (k + 0.5) become integers for the DP table."""
    doubled = [int(round(2.0 * r)) for r in ranks]
    total = sum(doubled)
    counts = [0] * (total + 1)
    counts[0] = 1
    for d in doubled:
        for s in range(total, d - 1, -1):
            counts[s] += counts[s - d]
    limit = int(math.floor(2.0 * t_obs + 1e-9))
    hits = sum(counts[: min(limit, total) + 1])
    return hits / float(2 ** len(ranks))


def wilcoxon_signed_rank(deltas: list[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zeros are removed first. For n_effective <= 25 the exact null
    distribution over the observed ranks is enumerated; beyond that a
    normal approximation with tie and continuity corrections is used.
    All-zero input is degenerate: p = 1.0 with n_effective = 0.
    """
    if not deltas:
        raise ValueError("need at least one delta")
    nonzero = [d for d in deltas if d != 0.0]
    n = len(nonzero)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", all_zero=True)
    ranks = _average_ranks([abs(d) for d in nonzero])
    w_plus = sum(r for d, r in zip(nonzero, ranks) if d > 0)
    w_minus = sum(r for d, r in zip(nonzero, ranks) if d < 0)
    t = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        p = min(1.0, 2.0 * _exact_tail_prob(ranks, t))
        return WilcoxonResult(t, p, n, "exact")
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: subtract sum(t^3 - t)/48 over tie groups
    groups: dict[float, int] = {}
    for d in nonzero:
        groups[abs(d)] = groups.get(abs(d), 0) + 1
    var -= sum(g ** 3 - g for g in groups.values()) / 48.0
    if var <= 0:
        return WilcoxonResult(t, 1.0, n, "normal")
    z = (t - mean + 0.5) / math.sqrt(var)  # continuity correction toward the mean
    p = min(1.0, 2.0 * _normal_cdf(z))
    return WilcoxonResult(t, p, n, "normal")


def mcnemar(b: int, c: int) -> McNemarResult:
    """McNemar's test on discordant pair counts.

    Exact two-sided p = min(1, 2 * P(X <= min(b, c))) with
    X ~ Binomial(b + c, 1/2); the continuity-corrected chi-square p is
    reported alongside. No discordance at all gives p = 1.
    """
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be >= 0")
    n = b + c
    if n == 0:
        return McNemarResult(b, c, 1.0, 1.0)
    m = min(b, c)
    tail = sum(math.comb(n, k) for k in range(m + 1)) / float(2 ** n)
    p_exact = min(1.0, 2.0 * tail)
    num = (abs(b - c) - 1.0)
    chi2 = (num * num / n) if abs(b - c) > 1 else 0.0
    p_chi2 = math.erfc(math.sqrt(chi2 / 2.0))  # survival of chi-square, 1 df
    return McNemarResult(b, c, p_exact, min(1.0, p_chi2))


def mean_effect_ci(
    deltas: list[float],
    level: float = 0.95,
    resamples: int = 10_000,
    seed: int = 0,
) -> MeanEffect:
    """Mean paired difference with a seeded percentile-bootstrap CI.

    Resample indices come from ``np.random.default_rng(seed)`` in a single
    (resamples, n) draw; quantiles use linear interpolation. With n < 2
    the CI is undefined and flagged.
    """
    data = np.asarray(deltas, dtype=float)
    n = data.size
    if n == 0:
        raise ValueError("need at least one delta")
    mean = float(data.mean())
    if n < 2:
        return MeanEffect(mean, math.nan, math.nan, level, n, ci_defined=False)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    means = data[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha], method="linear")
    return MeanEffect(mean, float(lo), float(hi), level, n, ci_defined=True)
