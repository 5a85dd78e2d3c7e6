"""K-shot response-profile matching for new drugs.

A new drug is measured on K pilot cells. Training drugs whose responses on
those cells correlate best with the pilot vector lend their full profiles,
which are blended with the cell-mean prior.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .dataio import PredictionTable
from .errors import DataError, UsageError
from .models import cell_mean_predictor
from .runtime import derive_rng, parallel_map

DEFAULT_K_LIST = (0, 1, 3, 5, 10, 20, 50)
DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class KShotTask:
    """Pilot observations for one test drug. Eval-cell truth is never stored here."""

    test_drug: str
    observed_cells: tuple
    observed_values: np.ndarray
    eval_cells: tuple

    def __post_init__(self):
        self.observed_cells = tuple(str(c) for c in self.observed_cells)
        self.eval_cells = tuple(str(c) for c in self.eval_cells)
        self.observed_values = np.asarray(self.observed_values, dtype=float)
        if len(self.observed_cells) != self.observed_values.size:
            raise UsageError("observed cells and values differ in length")
        if set(self.observed_cells) & set(self.eval_cells):
            raise UsageError("observed and eval cells overlap")

    @property
    def K(self):
        return len(self.observed_cells)


@dataclass
class MatchSet:
    matched: list  # (drug_id, correlation, weight)
    N: int
    empty: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class CurvePoint:
    K: int
    selected_w: float
    per_drug_r_mean: float
    per_drug_r_sd: float
    n_drugs: int
    n_skipped: int = 0
    n_fallback_cells: int = 0
    n_empty_matches: int = 0
    per_drug_values: dict = field(default_factory=dict)


@dataclass
class BlendCurve:
    points: dict  # K -> CurvePoint
    metadata: dict = field(default_factory=dict)

    def r(self, K):
        return self.points[K].per_drug_r_mean

    def to_dict(self):
        return {"points": {str(k): asdict(p) for k, p in sorted(self.points.items())}, "metadata": self.metadata}


class _Profiles:
    """Training responses as a dense drugs x cells matrix with NaN holes.

    ``skip`` arguments name a row index to leave out, which is how inner
    selection holds a training drug out without rebuilding the matrix.
    """

    def __init__(self, train):
        if train.n_records == 0:
            raise DataError("training table is empty")
        self.table = train
        self.drugs = list(train.drugs)
        self.cells = list(train.cells)
        self.Y, self.mask = train.to_matrix(self.drugs, self.cells)
        self.Y0 = np.where(self.mask, self.Y, 0.0)
        self.cell_index = {c: j for j, c in enumerate(self.cells)}
        self.drug_index = {d: i for i, d in enumerate(self.drugs)}
        self.col_sum = self.Y0.sum(axis=0)
        self.col_n = self.mask.sum(axis=0)
        self.total = float(self.Y0.sum())
        self.count = int(self.mask.sum())

    def cell_idx(self, cells):
        return np.array([self.cell_index.get(c, -1) for c in cells], dtype=int)

    def prior(self, cells, skip=None):
        """Cell-mean prior for cells; grand mean (flagged) where a cell is unseen."""
        idx = self.cell_idx(cells) if not isinstance(cells, np.ndarray) else cells
        sums, n = self.col_sum.copy(), self.col_n.copy()
        total, count = self.total, self.count
        if skip is not None:
            sums -= self.Y0[skip]
            n -= self.mask[skip]
            total -= float(self.Y0[skip].sum())
            count -= int(self.mask[skip].sum())
        grand = total / count if count else 0.0
        ok = idx >= 0
        ok[ok] = n[idx[ok]] > 0
        out = np.full(idx.size, grand)
        out[ok] = sums[idx[ok]] / n[idx[ok]]
        return out, ~ok

    def columns(self, idx):
        Y = np.full((len(self.drugs), idx.size), np.nan)
        ok = idx >= 0
        Y[:, ok] = self.Y[:, idx[ok]]
        return Y


def _masked_pearson(M, x):
    """Row-wise Pearson of each row of M (NaN = missing) with x on shared entries."""
    m = ~np.isnan(M)
    n = m.sum(axis=1)
    X = np.where(m, x[None, :], 0.0)
    V = np.where(m, M, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mx = X.sum(axis=1) / n
        mv = V.sum(axis=1) / n
        xc = np.where(m, X - mx[:, None], 0.0)
        vc = np.where(m, V - mv[:, None], 0.0)
        sxx = (xc * xc).sum(axis=1)
        svv = (vc * vc).sum(axis=1)
        r = (xc * vc).sum(axis=1) / np.sqrt(sxx * svv)
    scale_x = np.maximum(np.abs(X).max(axis=1), np.finfo(float).tiny)
    scale_v = np.maximum(np.abs(V).max(axis=1), np.finfo(float).tiny)
    bad = (sxx <= (1e-13 * scale_x) ** 2 * n) | (svv <= (1e-13 * scale_v) ** 2 * n)
    r = np.clip(r, -1.0, 1.0)
    r[bad] = np.nan
    return r, n


def _match(profiles, task, N, min_overlap, skip=None):
    if task.K < min_overlap:
        raise UsageError(f"K={task.K} is below min_overlap={min_overlap}")
    r, n = _masked_pearson(profiles.columns(profiles.cell_idx(task.observed_cells)), task.observed_values)
    ok = (n >= min_overlap) & ~np.isnan(r)
    if skip is not None:
        ok[skip] = False
    cand = [(-abs(r[i]), profiles.drugs[i], i) for i in np.flatnonzero(ok)]
    cand.sort()
    top = cand[:N]
    matched = [(d, float(r[i]), max(float(r[i]), 0.0)) for _, d, i in top]
    idx = np.array([i for _, _, i in top], dtype=int)
    weights = np.array([m[2] for m in matched])
    ms = MatchSet(matched, N, empty=not (weights > 0).any())
    eval_idx = profiles.cell_idx(task.eval_cells)
    prior, _ = profiles.prior(eval_idx, skip)
    if ms.empty:
        return prior, np.ones(len(prior), dtype=bool), ms
    E = profiles.columns(eval_idx)[idx]
    have = ~np.isnan(E)
    wsum = (weights[:, None] * have).sum(axis=0)
    num = (weights[:, None] * np.where(have, E, 0.0)).sum(axis=0)
    covered = wsum > 0
    pred = np.where(covered, num / np.where(covered, wsum, 1.0), prior)
    return pred, ~covered, ms


def match_predict(train, task, N=5, min_overlap=2):
    """Predict the eval cells of ``task`` from the top-N correlated training drugs.

    Ranking is by |r| (drug id breaks ties); weights are max(r, 0). Cells no
    matched drug covers, or an all-zero weight set, fall back to the
    cell-mean prior and are flagged.
    """
    if N < 1:
        raise UsageError("N must be >= 1")
    profiles = train if isinstance(train, _Profiles) else _Profiles(train)
    pred, fb, ms = _match(profiles, task, N, min_overlap)
    drugs = [task.test_drug] * len(task.eval_cells)
    return PredictionTable(drugs, list(task.eval_cells), pred, fallback=fb), ms


def _standardise(v):
    c = v - v.mean()
    sd = np.sqrt(np.mean(c * c))
    if v.size < 2 or np.ptp(v) == 0 or sd <= 1e-13 * max(float(np.abs(v).max()), np.finfo(float).tiny):
        return c * 0.0
    return c / sd


def _blend_values(prior, matched, w, standardize=True):
    if standardize:
        prior, matched = _standardise(prior), _standardise(matched)
    return (1.0 - w) * prior + w * matched


def blend(prior, matched, w, standardize=True):
    """Convex blend of two prediction tables, each standardised per drug first."""
    if not 0.0 <= w <= 1.0:
        raise UsageError("w must lie in [0, 1]")
    if prior.keys() != matched.keys():
        raise UsageError("prior and matched predictions cover different keys")
    out = np.empty(len(prior))
    for d, sl in prior.drug_slices.items():
        out[sl] = _blend_values(prior.values[sl], matched.values[sl], w, standardize)
    return PredictionTable(prior.drug_ids, prior.cell_ids, out)


def _r_or_zero(truth, pred):
    r = metrics.pearson(truth, pred)
    return 0.0 if r is None else r


def _sample_task(drug, cells, values, K, rng):
    pick = np.sort(rng.choice(cells.size, size=K, replace=False))
    rest = np.setdiff1d(np.arange(cells.size), pick)
    task = KShotTask(drug, cells[pick].tolist(), values[pick], cells[rest].tolist())
    return task, values[rest]


def _task_components(profiles, task, N, min_overlap, skip=None):
    """(prior, matched, n_fallback, empty) for a task; K below min_overlap maps to the pure prior."""
    prior, pflag = profiles.prior(profiles.cell_idx(task.eval_cells), skip)
    if task.K < min_overlap:
        return prior, prior, int(pflag.sum()), True
    matched, fb, ms = _match(profiles, task, N, min_overlap, skip)
    return prior, matched, int(fb.sum()), ms.empty


def _grid_r(truth, prior, matched, grid, standardize=True):
    """Pearson of truth with the blend at every grid weight (0 where undefined)."""
    if standardize:
        prior, matched = _standardise(prior), _standardise(matched)
    w = np.asarray(grid)[:, None]
    B = (1.0 - w) * prior[None, :] + w * matched[None, :]
    t = truth - truth.mean()
    Bc = B - B.mean(axis=1, keepdims=True)
    sbb = (Bc * Bc).sum(axis=1)
    stt = float(t @ t)
    tiny = np.finfo(float).tiny
    if truth.size < 2 or np.sqrt(stt / truth.size) <= 1e-13 * max(float(np.abs(truth).max()), tiny):
        return np.zeros(len(grid))
    bad = np.sqrt(sbb / truth.size) <= 1e-13 * np.maximum(np.abs(B).max(axis=1), tiny)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.clip(Bc @ t / np.sqrt(sbb * stt), -1.0, 1.0)
    r[bad] = 0.0
    return r


def _check_grid(grid):
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise UsageError("blend grid is empty")
    if grid[0] < 0 or grid[-1] > 1:
        raise UsageError("blend grid values must lie in [0, 1]")
    return grid


def select_blend_weight(train, K, grid=DEFAULT_GRID, inner_trials=1, seed=42, N=5, min_overlap=2, min_obs=5, standardize=True):
    """Choose w by simulating K-shot tasks on the training drugs alone.

    Each training drug is held out in turn and matched against the others,
    with a prior computed without it. Returns the grid value with the best
    mean per-drug r (ties go to the smaller w).
    """
    grid = _check_grid(grid)
    profiles = train if isinstance(train, _Profiles) else _Profiles(train)
    if len(profiles.drugs) < 2:
        raise DataError("weight selection needs >= 2 training drugs")
    if len(grid) == 1 or K == 0:
        return grid[0]
    scores = np.zeros(len(grid))
    used = 0
    for d in profiles.drugs:
        cells, values = profiles.table.drug_values(d)
        if cells.size < K + min_obs:
            continue
        skip = profiles.drug_index[d]
        per_w = np.zeros(len(grid))
        for t in range(inner_trials):
            task, truth = _sample_task(d, cells, values, K, derive_rng(seed, "inner", d, K, t))
            prior, matched, _, _ = _task_components(profiles, task, N, min_overlap, skip)
            per_w += _grid_r(truth, prior, matched, grid, standardize)
        scores += per_w / inner_trials
        used += 1
    if used == 0:
        return grid[0]
    best = int(np.argmax(scores))  # argmax returns the first (smallest) w on ties
    return grid[best]


def _eligible(test, K, min_obs):
    ok, skipped = [], 0
    for d in test.drugs:
        if test.drug_slices[d].stop - test.drug_slices[d].start >= K + min_obs:
            ok.append(d)
        else:
            skipped += 1
    return ok, skipped


def _point(K, w, per_drug, skipped, fallback, empty):
    v = np.array(list(per_drug.values()))
    return CurvePoint(
        K=int(K), selected_w=float(w), per_drug_r_mean=float(v.mean()),
        per_drug_r_sd=float(v.std(ddof=1)) if v.size > 1 else 0.0, n_drugs=int(v.size),
        n_skipped=int(skipped), n_fallback_cells=int(fallback), n_empty_matches=int(empty), per_drug_values=per_drug,
    )


def _run_tasks(profiles, test, drugs, K, w, trials, seed, N, min_overlap, standardize, threads, donors=None):
    """Per-drug r averaged over trials; ``donors`` maps drug -> drug supplying pilot values."""

    def one(d):
        cells, values = test.drug_values(d)
        rs, fb, empty = [], 0, 0
        for t in range(trials):
            task, truth = _sample_task(d, cells, values, K, derive_rng(seed, d, K, t))
            if donors is not None:
                dc, dv = test.drug_values(donors[d])
                lookup = dict(zip(dc.tolist(), dv.tolist()))
                keep = [c for c in task.observed_cells if c in lookup]
                task = KShotTask(d, keep, [lookup[c] for c in keep], task.eval_cells)
            prior, matched, nfb, emp = _task_components(profiles, task, N, min_overlap)
            rs.append(_r_or_zero(truth, _blend_values(prior, matched, w, standardize)))
            fb += nfb
            empty += int(emp)
        return float(np.mean(rs)), fb, empty

    out = parallel_map(one, drugs, threads)
    return {d: o[0] for d, o in zip(drugs, out)}, sum(o[1] for o in out), sum(o[2] for o in out)


def kshot_curve(
    train, test, K_list=DEFAULT_K_LIST, trials_per_drug=5, N=5, grid=DEFAULT_GRID, seed=42,
    min_obs=5, min_overlap=2, inner_trials=1, standardize=True, threads=None,
):
    """Per-drug r of blended matching as a function of the pilot size K.

    K = 0 is the cell-mean prior scored on every cell of the test drug.
    """
    grid = _check_grid(grid)
    K_list = sorted({int(k) for k in K_list})
    if any(k < 0 for k in K_list):
        raise UsageError("K values must be >= 0")
    profiles = _Profiles(train)
    points = {}
    for K in K_list:
        drugs, skipped = _eligible(test, K, min_obs)
        if not drugs:
            continue
        if K == 0:
            prior = cell_mean_predictor(train).predict_table(test.restrict(drugs=drugs))
            per_drug = metrics.per_drug_r(prior, test, min_obs=max(min_obs, 2)).per_drug_values
            points[0] = _point(0, 0.0, per_drug, skipped, int(prior.fallback.sum()), 0)
            continue
        w = select_blend_weight(profiles, K, grid, inner_trials, seed, N, min_overlap, min_obs, standardize)
        per_drug, fb, empty = _run_tasks(profiles, test, drugs, K, w, trials_per_drug, seed, N, min_overlap, standardize, threads)
        points[K] = _point(K, w, per_drug, skipped, fb, empty)
    if not points:
        raise DataError("no test drug has enough cells for any K")
    meta = {"N": N, "trials_per_drug": trials_per_drug, "grid": grid, "seed": seed, "min_obs": min_obs,
            "min_overlap": min_overlap, "standardize": standardize}
    return BlendCurve(points, meta)


def derangement(items, rng):
    """Seeded permutation with no fixed points (rejection sampling)."""
    items = list(items)
    if len(items) < 2:
        raise DataError("need >= 2 drugs to derange")
    while True:
        perm = rng.permutation(len(items))
        if np.all(perm != np.arange(len(items))):
            return {items[i]: items[j] for i, j in enumerate(perm)}


def permuted_pairing_control(
    train, test, K=50, seed=42, w=None, trials_per_drug=5, N=5, grid=DEFAULT_GRID,
    min_obs=5, min_overlap=2, inner_trials=1, standardize=True, threads=None,
):
    """K-shot matching with pilot vectors taken from the wrong test drug.

    Observed cells stay those of the true drug; their values come from a
    deranged partner. ``w`` defaults to the weight selected for the
    unpermuted curve at the same K.
    """
    drugs, skipped = _eligible(test, K, min_obs)
    if len(drugs) < 2:
        raise DataError("permuted control needs >= 2 eligible test drugs")
    profiles = _Profiles(train)
    if w is None:
        w = select_blend_weight(profiles, K, grid, inner_trials, seed, N, min_overlap, min_obs, standardize)
    donors = derangement(drugs, derive_rng(seed, "derangement", K))
    per_drug, fb, empty = _run_tasks(profiles, test, drugs, K, w, trials_per_drug, seed, N, min_overlap, standardize, threads, donors)
    point = _point(K, w, per_drug, skipped, fb, empty)
    return point, donors
