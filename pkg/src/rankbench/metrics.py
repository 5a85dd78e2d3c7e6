"""Global and per-drug Pearson r, the exact between/within covariance
decomposition of global r, and concordance ceilings.

Variances and covariances use the population (n) denominator throughout.
The spread of per-drug r across drugs is reported with the n-1 denominator.
"""

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .errors import DataError, UsageError

ZERO_VARIANCE_POLICIES = ("zero", "skip")
_REL_TOL = 1e-13


def _degenerate(x):
    """True when x is constant up to rounding relative to its magnitude."""
    if x.size == 0 or np.ptp(x) == 0:
        return True
    scale = max(float(np.max(np.abs(x))), np.finfo(float).tiny)
    return float(np.std(x)) <= _REL_TOL * scale


def pearson(x, y):
    """Pearson correlation, or None when either vector has zero variance."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise UsageError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UsageError("pearson needs at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UsageError("pearson inputs must be finite")
    if _degenerate(x) or _degenerate(y):
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def _join(pred, truth):
    """Align predictions onto truth. Returns (drug_ids, y_true, y_pred) in pred order."""
    idx = truth.key_index
    pos = np.empty(len(pred), dtype=np.int64)
    for i, k in enumerate(zip(pred.drug_ids.tolist(), pred.cell_ids.tolist())):
        j = idx.get(k)
        if j is None:
            raise DataError(f"prediction key {k} not present in evaluation table")
        pos[i] = j
    return pred.drug_ids, truth.values[pos], pred.values


@dataclass
class MetricReport:
    global_r: float = None
    per_drug_r_mean: float = None
    per_drug_r_sd: float = None
    n_drugs_evaluated: int = 0
    n_drugs_skipped: int = 0
    per_drug_values: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class DecompositionReport:
    cov_total: float
    cov_between: float
    cov_within: float
    cov_cross_1: float
    cov_cross_2: float
    r_between: float
    r_within: float
    omega_b: float
    omega_w: float
    global_r_exact: float
    global_r_approx: float
    sigma_y: float = 0.0
    sigma_pred: float = 0.0
    sigma_between_y: float = 0.0
    sigma_within_y: float = 0.0
    sigma_between_pred: float = 0.0
    sigma_within_pred: float = 0.0
    n_drugs: int = 0
    n_pairs: int = 0

    def to_dict(self):
        return asdict(self)


def global_r(pred, truth):
    """Pearson r over every shared (drug, cell) pair."""
    _, y, yhat = _join(pred, truth)
    if y.size < 2:
        raise DataError("global r needs at least 2 shared pairs")
    return pearson(y, yhat)


def _group_starts(drug_ids):
    return np.flatnonzero(np.r_[True, drug_ids[1:] != drug_ids[:-1]])


def _per_group_pearson(starts, y, yhat):
    """Vectorised within-group Pearson. Returns (r, n, degenerate_truth, degenerate_pred)."""
    n = np.diff(np.r_[starts, y.size])
    group = np.repeat(np.arange(starts.size), n)
    my = np.add.reduceat(y, starts) / n
    mp = np.add.reduceat(yhat, starts) / n
    yc = y - my[group]
    pc = yhat - mp[group]
    syy = np.add.reduceat(yc * yc, starts)
    spp = np.add.reduceat(pc * pc, starts)
    syp = np.add.reduceat(yc * pc, starts)

    def degenerate(v, ss):
        ptp = np.maximum.reduceat(v, starts) - np.minimum.reduceat(v, starts)
        scale = np.maximum(np.maximum.reduceat(np.abs(v), starts), np.finfo(float).tiny)
        return (ptp == 0) | (np.sqrt(ss / n) <= _REL_TOL * scale)

    dy = degenerate(y, syy)
    dp = degenerate(yhat, spp)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.clip(syp / np.sqrt(syy * spp), -1.0, 1.0)
    return r, n, dy, dp


def per_drug_r(pred, truth, min_obs=5, zero_variance_policy="zero"):
    """Within-drug Pearson r averaged over drugs with at least ``min_obs`` cells.

    Drugs whose truth is constant are skipped. Drugs whose predictions are
    constant score 0 under policy ``zero`` and are skipped under ``skip``.
    """
    if zero_variance_policy not in ZERO_VARIANCE_POLICIES:
        raise UsageError(f"zero_variance_policy must be one of {ZERO_VARIANCE_POLICIES}")
    if min_obs < 2:
        raise UsageError("min_obs must be >= 2")
    drug_ids, y, yhat = _join(pred, truth)
    starts = _group_starts(drug_ids)
    r, n, dy, dp = _per_group_pearson(starts, y, yhat)
    values, skipped = {}, {}
    for g, s in enumerate(starts):
        d = str(drug_ids[s])
        if n[g] < min_obs:
            skipped[d] = "min_obs"
        elif dy[g]:
            skipped[d] = "constant_truth"
        elif dp[g]:
            if zero_variance_policy == "zero":
                values[d] = 0.0
            else:
                skipped[d] = "constant_prediction"
        else:
            values[d] = float(r[g])
    if not values:
        if not (n >= min_obs).any():
            raise DataError(f"no drug has >= {min_obs} observations (max available {int(n.max())})")
        raise DataError("no drug could be evaluated (all skipped for zero variance)")
    v = np.array(list(values.values()))
    g = pearson(y, yhat) if y.size >= 2 else None
    return MetricReport(
        global_r=g,
        per_drug_r_mean=float(v.mean()),
        per_drug_r_sd=float(v.std(ddof=1)) if v.size > 1 else 0.0,
        n_drugs_evaluated=len(values),
        n_drugs_skipped=len(skipped),
        per_drug_values=values,
        metadata={
            "min_obs": int(min_obs),
            "zero_variance_policy": zero_variance_policy,
            "sd_ddof": 1,
            "skipped": skipped,
        },
    )


def decompose_global_r(pred, truth):
    """Split Cov(y, y_hat) into between-drug, within-drug and two cross terms.

    Each series is written as its per-drug mean plus a within-drug residual,
    with means taken over the shared cells of that drug. All moments are
    pair-weighted population moments, so the four terms sum to the total.
    """
    drug_ids, y, yhat = _join(pred, truth)
    if y.size < 2:
        raise DataError("decomposition needs at least 2 shared pairs")
    starts = _group_starts(drug_ids)
    if starts.size < 2:
        raise DataError("decomposition needs at least 2 drugs")
    n = np.diff(np.r_[starts, y.size])
    group = np.repeat(np.arange(starts.size), n)
    ybar = (np.add.reduceat(y, starts) / n)[group]
    pbar = (np.add.reduceat(yhat, starts) / n)[group]
    eps = y - ybar
    peps = yhat - pbar

    def cov(a, b):
        return float(np.mean((a - a.mean()) * (b - b.mean())))

    sigma_y = float(np.std(y))
    if _degenerate(y):
        raise DataError("truth has zero variance; decomposition undefined")
    sigma_p = 0.0 if _degenerate(yhat) else float(np.std(yhat))
    sb_y, sw_y = float(np.std(ybar)), float(np.std(eps))
    sb_p = 0.0 if _degenerate(pbar) else float(np.std(pbar))
    sw_p = float(np.std(peps))
    if sw_p <= _REL_TOL * max(float(np.max(np.abs(yhat))), np.finfo(float).tiny):
        sw_p = 0.0

    c_total = cov(y, yhat)
    c_between = cov(ybar, pbar)
    c_within = cov(eps, peps)
    c_cross1 = cov(ybar, peps)
    c_cross2 = cov(eps, pbar)

    r_between = c_between / (sb_y * sb_p) if sb_y > 0 and sb_p > 0 else None
    r_within = c_within / (sw_y * sw_p) if sw_y > 0 and sw_p > 0 else None
    if r_between is not None:
        r_between = min(1.0, max(-1.0, r_between))
    if r_within is not None:
        r_within = min(1.0, max(-1.0, r_within))
    if sigma_p > 0:
        omega_b = sb_y * sb_p / (sigma_y * sigma_p)
        omega_w = sw_y * sw_p / (sigma_y * sigma_p)
    else:
        omega_b = omega_w = 0.0
    exact = pearson(y, yhat)
    approx = omega_b * (r_between or 0.0) + omega_w * (r_within or 0.0)
    return DecompositionReport(
        cov_total=c_total,
        cov_between=c_between,
        cov_within=c_within,
        cov_cross_1=c_cross1,
        cov_cross_2=c_cross2,
        r_between=r_between,
        r_within=r_within,
        omega_b=omega_b,
        omega_w=omega_w,
        global_r_exact=exact,
        global_r_approx=approx,
        sigma_y=sigma_y,
        sigma_pred=sigma_p,
        sigma_between_y=sb_y,
        sigma_within_y=sw_y,
        sigma_between_pred=sb_p,
        sigma_within_pred=sw_p,
        n_drugs=int(starts.size),
        n_pairs=int(y.size),
    )


def _summary(values, skipped, extra=None):
    v = np.array(list(values.values()))
    meta = {"sd_ddof": 1, "skipped": skipped}
    if v.size:
        meta["per_drug_range"] = [float(v.min()), float(v.max())]
    meta.update(extra or {})
    return MetricReport(
        per_drug_r_mean=float(v.mean()) if v.size else None,
        per_drug_r_sd=(float(v.std(ddof=1)) if v.size > 1 else 0.0) if v.size else None,
        n_drugs_evaluated=len(values),
        n_drugs_skipped=len(skipped),
        per_drug_values=values,
        metadata=meta,
    )


def _paired_values(a_cells, a_vals, b_cells, b_vals):
    _, ia, ib = np.intersect1d(a_cells, b_cells, assume_unique=True, return_indices=True)
    return a_vals[ia], b_vals[ib]


def replicate_concordance(table_a, table_b, anchor_drugs, min_obs=5):
    """Per-drug r between two assays of the same drugs on their shared cells."""
    values, skipped = {}, {}
    for d in sorted(set(anchor_drugs)):
        if d not in table_a.drug_slices or d not in table_b.drug_slices:
            skipped[d] = "absent"
            continue
        a, b = _paired_values(*table_a.drug_values(d), *table_b.drug_values(d))
        if a.size < min_obs:
            skipped[d] = "min_obs"
            continue
        r = pearson(a, b)
        if r is None:
            skipped[d] = "constant"
            continue
        values[d] = r
    if not values:
        raise DataError("no anchor drug could be evaluated")
    return _summary(values, skipped, {"min_obs": int(min_obs)})


def profile_concordance(truth, moa, class_label, min_obs=5):
    """Mean and sd of Pearson r over same-class drug pairs, on shared cells.

    Returns ``(mean, sd, n_pairs)``. Pairs with fewer than ``min_obs`` shared
    cells or a constant profile are left out.
    """
    drugs = [d for d in moa.members(class_label) if d in truth.drug_slices]
    if len(drugs) < 2:
        raise DataError(f"class {class_label!r} has {len(drugs)} drug(s) with responses; need >= 2")
    rs = []
    for a, b in combinations(drugs, 2):
        x, y = _paired_values(*truth.drug_values(a), *truth.drug_values(b))
        if x.size < min_obs:
            continue
        r = pearson(x, y)
        if r is not None:
            rs.append(r)
    if not rs:
        raise DataError(f"class {class_label!r} has no drug pair sharing >= {min_obs} cells")
    rs = np.array(rs)
    return float(rs.mean()), float(rs.std(ddof=1)) if rs.size > 1 else 0.0, int(rs.size)
