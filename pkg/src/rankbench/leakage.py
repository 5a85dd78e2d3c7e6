"""Checkpoint-selection leakage with a gradient-descent ridge learner.

Each epoch emits predictions for a validation split and a test split. Picking
the epoch by test r instead of validation r, or reporting the best fold, makes
the reported number look better than a fair protocol would.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .dataio import PredictionTable
from .errors import DataError, NumericalError, UsageError
from .protocols import make_folds
from .runtime import derive_rng, parallel_map

POLICIES = ("validation_max", "test_max", "last")


@dataclass(eq=False)
class EpochTrace:
    epochs: list  # (epoch, val PredictionTable, test PredictionTable), epoch from 1
    val_truth: object
    test_truth: object
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.epochs)

    def split(self, which):
        """(list of predictions per epoch, truth) for one split only."""
        if which == "val":
            return [e[1] for e in self.epochs], self.val_truth
        if which == "test":
            return [e[2] for e in self.epochs], self.test_truth
        raise UsageError(f"unknown split {which!r}")


@dataclass
class LeakageReport:
    fair_global_r: float
    snooped_global_r: float
    last_epoch_global_r: float
    fair_per_drug_r: float
    snooped_per_drug_r: float
    snoop_inflation: float
    per_drug_inflation: float
    best_fold_global_r: float
    mean_fold_global_r: float
    best_fold_inflation: float
    selected_epochs: dict
    per_fold: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _design(table, cell_fm, drug_fm, stats=None):
    X = cell_fm.rows(table.cell_ids.tolist())
    if drug_fm is not None:
        X = np.hstack([X, drug_fm.rows(table.drug_ids.tolist())])
    if stats is None:
        mean = X.mean(axis=0) if X.shape[1] else np.zeros(0)
        sd = X.std(axis=0) if X.shape[1] else np.zeros(0)
        sd[sd == 0] = 1.0
        stats = (mean, sd)
    return (X - stats[0]) / stats[1], stats


def iterative_learner_trace(train, val, test, cell_features, drug_features=None, lr=0.05, epochs=50, alpha=1.0, standardize=True):
    """Full-batch gradient descent on the ridge objective from zero.

    Minimises (|y - Xb - c|^2 + alpha |b|^2) / (2n) with an unpenalised
    intercept c, so the iterates approach ``ridge_fit(X, y, alpha)``.
    """
    if epochs < 1:
        raise UsageError("epochs must be >= 1")
    if lr <= 0:
        raise UsageError("lr must be > 0")
    keys = [set(t.keys()) for t in (train, val, test)]
    if keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2]:
        raise UsageError("train, val and test splits overlap")
    Xtr, stats = _design(train, cell_features, drug_features)
    if not standardize:
        stats = (np.zeros(Xtr.shape[1]), np.ones(Xtr.shape[1]))
        Xtr, _ = _design(train, cell_features, drug_features, stats)
    Xva, _ = _design(val, cell_features, drug_features, stats)
    Xte, _ = _design(test, cell_features, drug_features, stats)
    y = train.values
    n = y.size
    beta = np.zeros(Xtr.shape[1])
    c = 0.0
    trace = []
    for epoch in range(1, epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            r = y - Xtr @ beta - c
            grad_b = -(Xtr.T @ r) / n + alpha * beta / n
            grad_c = -r.mean()
            beta = beta - lr * grad_b
            c = c - lr * grad_c
            loss = (float(r @ r) + alpha * float(beta @ beta)) / (2 * n)
        if not (np.isfinite(loss) and np.all(np.isfinite(beta)) and np.isfinite(c)):
            raise NumericalError(f"gradient descent diverged at epoch {epoch}")
        trace.append((
            epoch,
            PredictionTable(val.drug_ids, val.cell_ids, Xva @ beta + c),
            PredictionTable(test.drug_ids, test.cell_ids, Xte @ beta + c),
        ))
    config = {"lr": lr, "epochs": epochs, "alpha": alpha, "standardize": standardize, "n_features": int(Xtr.shape[1])}
    return EpochTrace(trace, val, test, config)


def _best_epoch(preds, truth):
    """Earliest epoch with the highest global r on one split."""
    best, best_r = None, None
    for i, p in enumerate(preds):
        r = metrics.global_r(p, truth)
        if r is not None and (best_r is None or r > best_r):
            best, best_r = i + 1, r
    if best is None:
        raise DataError("global r is undefined at every epoch")
    return best


def select_checkpoint(trace, policy):
    if policy not in POLICIES:
        raise UsageError(f"policy must be one of {POLICIES}")
    if not trace.epochs:
        raise DataError("empty trace")
    if policy == "last":
        return trace.epochs[-1][0]
    preds, truth = trace.split("val" if policy == "validation_max" else "test")
    return _best_epoch(preds, truth)


def _fold_summary(trace, min_obs):
    ep = {p: select_checkpoint(trace, p) for p in POLICIES}
    preds, truth = trace.split("test")
    g = {p: metrics.global_r(preds[e - 1], truth) for p, e in ep.items()}
    assert all(g["test_max"] >= v for v in g.values())
    pd = {
        p: metrics.per_drug_r(preds[ep[p] - 1], truth, min_obs=min_obs).per_drug_r_mean
        for p in ("validation_max", "test_max")
    }
    return {"epochs": ep, "global_r": g, "per_drug_r": pd}


def inflation_report(folds, min_obs=5):
    """Fair vs snooped vs best-fold numbers over a set of fold traces."""
    if len(folds) < 2:
        raise UsageError("need >= 2 folds")
    if len({len(t) for t in folds}) != 1:
        raise UsageError("folds have different epoch counts")
    rows = [_fold_summary(t, min_obs) for t in folds]

    def mean(kind, policy):
        return float(np.mean([r[kind][policy] for r in rows]))

    fair, snooped = mean("global_r", "validation_max"), mean("global_r", "test_max")
    fair_pd, snooped_pd = mean("per_drug_r", "validation_max"), mean("per_drug_r", "test_max")
    best = float(max(r["global_r"]["test_max"] for r in rows))
    return LeakageReport(
        fair_global_r=fair,
        snooped_global_r=snooped,
        last_epoch_global_r=mean("global_r", "last"),
        fair_per_drug_r=fair_pd,
        snooped_per_drug_r=snooped_pd,
        snoop_inflation=snooped - fair,
        per_drug_inflation=snooped_pd - fair_pd,
        best_fold_global_r=best,
        mean_fold_global_r=snooped,
        best_fold_inflation=best - snooped,
        selected_epochs={p: [r["epochs"][p] for r in rows] for p in POLICIES},
        per_fold=rows,
    )


def simulate_leakage(dataset, n_folds=10, epochs=50, lr=0.05, alpha=1.0, seed=0, val_fraction=0.1, threads=None):
    """Drug-blind folds; a seeded slice of each fold's training drugs is the validation split."""
    response = dataset.response
    folds = make_folds(response.drugs, "drug_blind", n_folds, seed)

    def one(f):
        test_drugs = set(folds.members(f))
        train_drugs = sorted(d for d in response.drugs if d not in test_drugs)
        n_val = max(1, int(round(val_fraction * len(train_drugs))))
        pick = derive_rng(seed, "validation", f).permutation(len(train_drugs))[:n_val]
        val_drugs = {train_drugs[i] for i in pick}
        train = response.exclude(drugs=test_drugs | val_drugs)
        return iterative_learner_trace(
            train, response.restrict(drugs=val_drugs), response.restrict(drugs=test_drugs),
            dataset.cell_features, dataset.drug_features, lr=lr, epochs=epochs, alpha=alpha,
        )

    traces = parallel_map(one, range(n_folds), threads)
    return inflation_report(traces)
