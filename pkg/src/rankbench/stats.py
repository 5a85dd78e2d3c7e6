"""Rank tests and effect sizes.

Exact null distributions are built by counting (subset sums of ranks for
Mann-Whitney, sign patterns for Wilcoxon). Larger samples use the normal
approximation with tie and continuity corrections.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import DataError, UsageError

ALTERNATIVES = ("two-sided", "less", "greater")
MWU_EXACT_MAX_N = 12
WILCOXON_EXACT_MAX_N = 20


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str
    alternative: str
    n1: int
    n2: int
    exact: bool = False
    details: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self):
        return asdict(self)


def _check_alternative(alternative):
    if alternative not in ALTERNATIVES:
        raise UsageError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")


def _tail_p(p_less, p_greater, alternative):
    if alternative == "less":
        p = p_less
    elif alternative == "greater":
        p = p_greater
    else:
        p = 2.0 * min(p_less, p_greater)
    return float(min(1.0, max(0.0, p)))


def _normal_p(stat, mean, sd, alternative):
    if sd <= 0:
        return 1.0
    if alternative == "less":
        return float(ndtr((stat - mean + 0.5) / sd))
    if alternative == "greater":
        return float(ndtr(-(stat - mean - 0.5) / sd))
    z = max(abs(stat - mean) - 0.5, 0.0) / sd
    return float(min(1.0, 2.0 * ndtr(-z)))


def _tie_term(ranks_source):
    _, counts = np.unique(ranks_source, return_counts=True)
    return float(np.sum(counts.astype(float) ** 3 - counts))


def rank_sum_distribution(n1, n):
    """Counts of size-n1 subsets of ranks 1..n by rank sum (index = sum)."""
    top = n * (n + 1) // 2
    counts = np.zeros((n1 + 1, top + 1), dtype=object)
    counts[0, 0] = 1
    for r in range(1, n + 1):
        for k in range(min(r, n1), 0, -1):
            counts[k, r:] = counts[k, r:] + counts[k - 1, : top + 1 - r]
    return counts[n1]


def signed_rank_distribution(doubled_ranks):
    """Counts of sign patterns by (doubled) positive-rank sum."""
    doubled_ranks = [int(r) for r in doubled_ranks]
    dist = np.zeros(sum(doubled_ranks) + 1, dtype=object)
    dist[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: dist.size - r]
        dist = dist + shifted
    return dist


def mann_whitney_u(group_a, group_b, alternative="two-sided"):
    """Mann-Whitney U for group_a against group_b.

    ``less`` tests whether group_a tends to be smaller. The statistic is
    U_a = R_a - n_a(n_a + 1)/2 with mid-ranks for ties.
    """
    _check_alternative(alternative)
    a = np.asarray(group_a, dtype=float).ravel()
    b = np.asarray(group_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise UsageError("both groups must be nonempty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise UsageError("groups must be finite")
    n1, n2 = a.size, b.size
    n = n1 + n2
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    ties = _tie_term(pooled)
    if n <= MWU_EXACT_MAX_N and ties == 0:
        dist = rank_sum_distribution(n1, n)
        total = sum(dist)
        offset = n1 * (n1 + 1) // 2
        k = int(round(u)) + offset
        p_less = float(sum(dist[: k + 1]) / total)
        p_greater = float(sum(dist[k:]) / total)
        return TestResult(u, _tail_p(p_less, p_greater, alternative), "mann-whitney exact enumeration", alternative, n1, n2, True)
    mean = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    p = _normal_p(u, mean, np.sqrt(max(var, 0.0)), alternative)
    return TestResult(
        u, p, "mann-whitney normal approximation (tie-corrected, continuity-corrected)", alternative, n1, n2, False,
        {"tie_term": ties},
    )


def wilcoxon_signed_rank(paired_diffs, alternative="two-sided"):
    """Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped before ranking. The statistic is T+, the sum
    of mid-ranks of |d| over positive d.
    """
    _check_alternative(alternative)
    d = np.asarray(paired_diffs, dtype=float).ravel()
    if not np.all(np.isfinite(d)):
        raise UsageError("differences must be finite")
    n_zero = int(np.sum(d == 0))
    d = d[d != 0]
    if d.size == 0:
        raise DataError("all paired differences are zero")
    n = d.size
    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    ties = _tie_term(np.abs(d))
    details = {"n_zero_dropped": n_zero}
    if n <= WILCOXON_EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        dist = signed_rank_distribution(doubled)
        total = sum(dist)
        k = int(round(2 * t_plus))
        p_less = float(sum(dist[: k + 1]) / total)
        p_greater = float(sum(dist[k:]) / total)
        return TestResult(
            t_plus, _tail_p(p_less, p_greater, alternative), "wilcoxon exact enumeration (zeros dropped)",
            alternative, n, 0, True, details,
        )
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - ties / 48.0
    p = _normal_p(t_plus, mean, np.sqrt(max(var, 0.0)), alternative)
    return TestResult(
        t_plus, p, "wilcoxon normal approximation (zeros dropped, tie-corrected, continuity-corrected)",
        alternative, n, 0, False, details,
    )


def cohens_d_pooled(group_a, group_b):
    """(mean_a - mean_b) / pooled sd, pooled variance on n1 + n2 - 2 df.

    None when the pooled sd is zero.
    """
    a = np.asarray(group_a, dtype=float).ravel()
    b = np.asarray(group_b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise UsageError("each group needs at least 2 values")
    pooled_var = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if pooled_var <= 0:
        return None
    return float((a.mean() - b.mean()) / np.sqrt(pooled_var))


def biomarker_stratify(truth, mutation_status, drug_id, alternative="less"):
    """Compare one drug's responses in mutant vs wild-type cells.

    The default alternative is that mutant responses are lower. Cohen's d is
    mean(mutant) - mean(wild type) over the pooled sd.
    """
    if drug_id not in truth.drug_slices:
        raise DataError(f"drug {drug_id!r} not in response table")
    cells, values = truth.drug_values(drug_id)
    status = np.array([mutation_status.get(c, -1) for c in cells.tolist()])
    mutant = values[status == 1]
    wild = values[status == 0]
    if mutant.size == 0:
        raise DataError(f"no mutant cells with responses for {drug_id!r}")
    if wild.size == 0:
        raise DataError(f"no wild-type cells with responses for {drug_id!r}")
    res = mann_whitney_u(mutant, wild, alternative)
    d = cohens_d_pooled(mutant, wild) if mutant.size >= 2 and wild.size >= 2 else None
    sizes = {"mutant": int(mutant.size), "wild_type": int(wild.size), "unannotated": int(np.sum(status == -1))}
    return res, d, sizes
