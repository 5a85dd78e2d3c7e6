"""PCA, weighted ridge regression and the reference predictors."""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .dataio import FeatureMatrix, PredictionTable, ResponseTable
from .errors import DataError, NumericalError, SchemaError, UsageError

JITTERS = (0.0, 1e-10, 1e-8)


# ---------------------------------------------------------------- PCA


@dataclass(eq=False)
class PcaModel:
    mean_vector: np.ndarray
    components: np.ndarray  # k x n_features, orthonormal rows
    k: int
    explained_variance: np.ndarray
    feature_names: tuple = ()
    prefix: str = ""
    total_variance: float = 0.0
    report: dict = field(default_factory=dict)

    @property
    def output_names(self):
        head = f"{self.prefix}:" if self.prefix else ""
        return tuple(f"{head}pc{i + 1}" for i in range(self.k))


def _as_matrix(X):
    if isinstance(X, FeatureMatrix):
        return X.values, X.feature_names
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise UsageError("expected a 2-D matrix")
    return X, tuple(f"x{j}" for j in range(X.shape[1]))


def pca_fit(X, k, prefix=""):
    """Mean-centred SVD PCA keeping ``k`` components.

    ``k`` is clipped to the numerical rank of the centred data with a warning.
    Each component is signed so its largest-magnitude entry is positive.
    """
    values, names = _as_matrix(X)
    n, p = values.shape
    if k < 1:
        raise UsageError("k must be >= 1")
    if n < 2:
        raise DataError("PCA needs at least 2 rows")
    mean = values.mean(axis=0)
    Xc = values - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    tol = max(n, p) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    report = {"requested_k": int(k), "rank": rank}
    if k > rank:
        warnings.warn(f"PCA k={k} exceeds numerical rank {rank}; clipping", stacklevel=2)
        report["clipped"] = True
        k = rank
    if k < 1:
        raise DataError("PCA input has zero centred variance")
    comps = vt[:k].copy()
    lead = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), lead])
    comps *= signs[:, None]
    return PcaModel(
        mean_vector=mean,
        components=comps,
        k=k,
        explained_variance=s[:k] ** 2 / n,
        feature_names=tuple(names),
        prefix=prefix,
        total_variance=float(np.sum(s**2) / n),
        report=report,
    )


def pca_transform(model, X):
    """Project rows onto the components; returns a FeatureMatrix of scores."""
    if isinstance(X, FeatureMatrix):
        if X.feature_names != model.feature_names:
            raise SchemaError("feature names do not match the PCA training order")
        scores = (X.values - model.mean_vector) @ model.components.T
        return FeatureMatrix(X.entity_ids, model.output_names, scores, X.kind)
    values = np.asarray(X, dtype=float)
    if values.shape[-1] != model.mean_vector.size:
        raise SchemaError("feature count does not match the PCA model")
    return (values - model.mean_vector) @ model.components.T


def pca_inverse(model, scores):
    scores = scores.values if isinstance(scores, FeatureMatrix) else np.asarray(scores, dtype=float)
    return scores @ model.components + model.mean_vector


# ---------------------------------------------------------------- ridge


@dataclass(eq=False)
class RidgeModel:
    weights: np.ndarray
    intercept: float
    alpha: float
    feature_names: tuple = ()
    jitter: float = 0.0


def _spd_solve(A, b):
    """Cholesky solve, escalating a diagonal jitter on failure."""
    for jitter in JITTERS:
        try:
            c = cho_factor(A + jitter * np.eye(A.shape[0]), lower=True, check_finite=False)
            x = cho_solve(c, b, check_finite=False)
        except LinAlgError:
            continue
        if np.all(np.isfinite(x)):
            return x, jitter
    raise NumericalError(f"ridge system not positive definite (condition estimate {np.linalg.cond(A):.3g})")


def _check_weights(w, n):
    w = np.asarray(w, dtype=float).ravel()
    if w.size != n:
        raise UsageError("sample_weights length must match rows")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise UsageError("sample_weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise UsageError("sample_weights are all zero")
    return w


def ridge_fit(X, y, alpha=1.0, sample_weights=None, feature_names=None):
    """Weighted ridge with an unpenalised intercept.

    Solves (Xc' W Xc + alpha I) w = Xc' W yc on weighted-mean-centred data and
    recovers the intercept from the weighted means.
    """
    values, names = _as_matrix(X)
    if feature_names is not None:
        names = tuple(feature_names)
    y = np.asarray(y, dtype=float).ravel()
    n, p = values.shape
    if n != y.size or n < 2:
        raise UsageError("X rows must equal len(y) and be >= 2")
    if alpha <= 0:
        raise UsageError("alpha must be > 0")
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(y))):
        raise DataError("ridge inputs must be finite")
    w = np.ones(n) if sample_weights is None else _check_weights(sample_weights, n)
    sw = w.sum()
    xm = w @ values / sw
    ym = float(w @ y / sw)
    Xc = values - xm
    yc = y - ym
    A = Xc.T @ (Xc * w[:, None]) + alpha * np.eye(p)
    b = Xc.T @ (w * yc)
    coef, jitter = _spd_solve(A, b)
    return RidgeModel(coef, ym - float(xm @ coef), float(alpha), tuple(names), jitter)


def ridge_predict(model, X):
    if isinstance(X, FeatureMatrix):
        if X.feature_names != model.feature_names:
            raise SchemaError("feature names do not match the ridge model")
        values = X.values
    else:
        values = np.atleast_2d(np.asarray(X, dtype=float))
        if values.shape[1] != model.weights.size:
            raise SchemaError(f"expected {model.weights.size} features, got {values.shape[1]}")
    return values @ model.weights + model.intercept


def ridge_fit_grouped(cell_X, Y, alpha=1.0, W=None, drug_F=None, feature_names=None):
    """Ridge on the implicit design rows [x_c | f_d] of a drugs x cells grid.

    Equivalent to ``ridge_fit`` on one row per observed (d, c) pair, but built
    from per-cell and per-drug moments so the full design is never formed.
    ``Y`` holds NaN where unobserved; ``W`` (default 1 on observed pairs)
    carries sample weights.
    """
    Y = np.asarray(Y, dtype=float)
    cell_X = np.asarray(cell_X, dtype=float)
    mask = ~np.isnan(Y)
    W = mask.astype(float) if W is None else np.where(mask, np.asarray(W, dtype=float), 0.0)
    if np.any(W < 0):
        raise UsageError("weights must be nonnegative")
    if alpha <= 0:
        raise UsageError("alpha must be > 0")
    S = W.sum()
    if S <= 0 or mask.sum() < 2:
        raise DataError("ridge needs at least 2 weighted observations")
    Y0 = np.where(mask, Y, 0.0)
    wc = W.sum(axis=0)
    ym = float((W * Y0).sum() / S)
    xm = wc @ cell_X / S
    Xc = cell_X - xm
    R = W * np.where(mask, Y0 - ym, 0.0)
    blocks_A = [[Xc.T @ (Xc * wc[:, None])]]
    blocks_b = [Xc.T @ R.sum(axis=0)]
    fm = None
    if drug_F is not None and drug_F.shape[1] > 0:
        drug_F = np.asarray(drug_F, dtype=float)
        wd = W.sum(axis=1)
        fm = wd @ drug_F / S
        Fc = drug_F - fm
        cross = Xc.T @ W.T @ Fc
        blocks_A = [[blocks_A[0][0], cross], [cross.T, Fc.T @ (Fc * wd[:, None])]]
        blocks_b.append(Fc.T @ R.sum(axis=1))
    A = np.block(blocks_A)
    A[np.diag_indices_from(A)] += alpha
    b = np.concatenate(blocks_b)
    coef, jitter = _spd_solve(A, b)
    means = xm if fm is None else np.concatenate([xm, fm])
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(coef.size))
    return RidgeModel(coef, ym - float(means @ coef), float(alpha), names, jitter)


def predict_grouped(model, cell_X, drug_F, drug_idx, cell_idx):
    """Predictions for records given row indices into cell_X / drug_F."""
    p = cell_X.shape[1]
    cell_part = cell_X @ model.weights[:p]
    out = cell_part[cell_idx] + model.intercept
    if drug_F is not None and drug_F.shape[1] > 0:
        out = out + (drug_F @ model.weights[p:])[drug_idx]
    return out


# ---------------------------------------------------------------- reference predictors


@dataclass(eq=False)
class Predictor:
    """Lookup predictor keyed on drug or cell, with a grand-mean fallback."""

    kind: str
    key: str
    table: dict
    fallback: float
    fallback_policy: str = "grand_mean"
    provenance: dict = field(default_factory=dict)

    def predict(self, drug_ids, cell_ids):
        ids = drug_ids if self.key == "drug" else cell_ids
        ids = [str(i) for i in ids]
        hit = np.array([i in self.table for i in ids], dtype=bool)
        vals = np.array([self.table.get(i, self.fallback) for i in ids], dtype=float)
        return PredictionTable(drug_ids, cell_ids, vals, fallback=~hit)

    def predict_table(self, table):
        return self.predict(table.drug_ids, table.cell_ids)


def _group_means(ids, values):
    uniq, inv = np.unique(ids, return_inverse=True)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    return dict(zip(uniq.tolist(), (sums / counts).tolist()))


def drug_mean_predictor(train):
    """Predict each drug's training mean regardless of cell."""
    return Predictor(
        "drug_mean", "drug", _group_means(train.drug_ids, train.values), float(train.values.mean()),
        provenance={"n_train_records": train.n_records},
    )


def cell_mean_predictor(train):
    """Predict each cell's mean response over training drugs."""
    return Predictor(
        "cell_mean", "cell", _group_means(train.cell_ids, train.values), float(train.values.mean()),
        provenance={"n_train_records": train.n_records},
    )


def zscore_per_drug(train):
    """Standardise each drug's values to mean 0, sd 1 (population sd).

    Drugs with fewer than 2 observations or zero sd are only centred, and
    listed under ``report['flagged']``.
    """
    out = train.values.copy()
    flagged = []
    for d, sl in train.drug_slices.items():
        v = train.values[sl]
        c = v - v.mean()
        sd = float(np.sqrt(np.mean(c * c)))
        if v.size < 2 or np.ptp(v) == 0 or sd <= 1e-13 * max(float(np.max(np.abs(v))), 1e-300):
            out[sl] = 0.0
            flagged.append(d)
        else:
            out[sl] = c / sd
    return ResponseTable(train.drug_ids, train.cell_ids, out, units=train.units, report={"flagged": flagged})
