"""Fold construction and cross-validation pipelines.

Every pipeline fits ridge on the implicit design [cell features | drug
features] of the training grid, predicts held-out records and scores them
with global and per-drug r.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .dataio import MoaMap, PredictionTable
from .errors import DataError, UsageError
from .models import pca_fit, pca_transform, predict_grouped, ridge_fit_grouped, zscore_per_drug
from .runtime import derive_rng, parallel_map

SCHEMES = ("drug_blind", "cell_blind", "scaffold", "within_moa_loo", "mixed")
DRUG_FEATURE_MODES = ("none", "matrix", "moa_onehot", "random_vector")
DEFAULT_WEIGHT_GRID = (1.0, 2.0, 5.0, 10.0, 20.0)


# ---------------------------------------------------------------- folds


@dataclass(eq=False)
class FoldSpec:
    scheme: str
    k: int
    seed: int
    assignment: dict

    def members(self, fold):
        return tuple(sorted(e for e, f in self.assignment.items() if f == fold))

    def sizes(self):
        return [sum(1 for f in self.assignment.values() if f == i) for i in range(self.k)]

    def to_dict(self):
        return {"scheme": self.scheme, "k": self.k, "seed": self.seed, "sizes": self.sizes()}


def make_folds(entities, scheme="drug_blind", k=5, seed=42, scaffold=None):
    """Deterministic fold assignment.

    Random schemes shuffle the sorted entity list with a seeded generator and
    deal entities round-robin. ``scaffold`` packs scaffold groups, largest
    first, into the currently lightest fold. ``within_moa_loo`` puts each
    entity in its own fold.
    """
    if scheme not in SCHEMES:
        raise UsageError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    ents = sorted(set(entities))
    if scheme == "within_moa_loo":
        return FoldSpec(scheme, len(ents), seed, {e: i for i, e in enumerate(ents)})
    if k < 2:
        raise UsageError("k must be >= 2")
    if len(ents) < k:
        raise DataError(f"{len(ents)} entities cannot fill {k} folds")
    if scheme == "scaffold":
        if scaffold is None:
            raise UsageError("scaffold scheme needs a scaffold map")
        groups = {}
        for e in ents:
            groups.setdefault(scaffold.get(e, f"__singleton__{e}"), []).append(e)
        if len(groups) < k:
            raise DataError(f"{len(groups)} scaffold groups cannot fill {k} folds")
        order = sorted(groups, key=lambda g: (-len(groups[g]), g))
        load = [0] * k
        assignment = {}
        for g in order:
            f = min(range(k), key=lambda i: (load[i], i))
            for e in groups[g]:
                assignment[e] = f
            load[f] += len(groups[g])
        return FoldSpec(scheme, k, seed, assignment)
    perm = derive_rng(seed, scheme, "shuffle").permutation(len(ents))
    return FoldSpec(scheme, k, seed, {ents[j]: i % k for i, j in enumerate(perm)})


def permute_moa(moa, seed=42):
    """Shuffle drug -> class assignments, keeping every class size."""
    drugs = moa.drugs
    labels = [moa[d] for d in drugs]
    perm = np.random.default_rng(seed).permutation(len(drugs))
    return MoaMap({drugs[j]: labels[i] for i, j in enumerate(perm)})


# ---------------------------------------------------------------- config / result


@dataclass
class ModalitySpec:
    """One cell-feature modality: features named ``<prefix>:...``; PCA dims or None."""

    prefix: str
    n_components: int = None


@dataclass
class CvConfig:
    scheme: str = "drug_blind"
    k: int = 5
    seed: int = 42
    fold_spec: FoldSpec = None
    cell_pipeline: tuple = ()  # ModalitySpecs; empty = all cell features, raw
    standardize: bool = False
    drug_feature_mode: str = "none"
    drug_pca: int = None
    random_dim: int = 2048
    random_seed: int = 0
    target_mode: str = "raw"
    weighting_mode: str = "uniform"
    moa_weight: float = 1.0
    moa_class: str = None
    alpha: float = 1.0
    min_obs: int = 5
    zero_variance_policy: str = "zero"
    threads: int = None

    def validate(self):
        if self.scheme not in SCHEMES:
            raise UsageError(f"unknown scheme {self.scheme!r}")
        if self.drug_feature_mode not in DRUG_FEATURE_MODES:
            raise UsageError(f"unknown drug_feature_mode {self.drug_feature_mode!r}")
        if self.target_mode not in ("raw", "zscore"):
            raise UsageError("target_mode must be raw or zscore")
        if self.weighting_mode not in ("uniform", "moa_weight"):
            raise UsageError("weighting_mode must be uniform or moa_weight")
        if self.weighting_mode == "moa_weight" and (self.moa_class is None or self.moa_weight <= 0):
            raise UsageError("moa_weight mode needs moa_class and a positive weight")
        if self.alpha <= 0:
            raise UsageError("alpha must be > 0")
        return self

    def echo(self):
        d = dataclasses.asdict(self)
        d.pop("fold_spec")
        d.pop("threads")
        d["cell_pipeline"] = [dataclasses.asdict(m) if dataclasses.is_dataclass(m) else dict(m) for m in self.cell_pipeline]
        return d


@dataclass(eq=False)
class CvResult:
    report: metrics.MetricReport
    per_fold: list
    predictions: PredictionTable
    decomposition: metrics.DecompositionReport = None
    global_r_zscored_truth: float = None
    config: dict = field(default_factory=dict)
    folds: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def per_drug_values(self):
        return self.report.per_drug_values

    def class_mean(self, drugs):
        v = [self.report.per_drug_values[d] for d in drugs if d in self.report.per_drug_values]
        return float(np.mean(v)) if v else None

    def to_dict(self):
        return {
            "report": self.report.to_dict(),
            "per_fold": [r.to_dict() if r is not None else None for r in self.per_fold],
            "decomposition": self.decomposition.to_dict() if self.decomposition is not None else None,
            "global_r_zscored_truth": self.global_r_zscored_truth,
            "config": self.config,
            "folds": self.folds,
            "dropped": self.dropped,
            "extra": self.extra,
        }


# ---------------------------------------------------------------- feature assembly


class _Grid:
    """Dense drugs x cells view of a dataset plus its feature blocks."""

    def __init__(self, dataset, config, moa=None):
        self.dataset = dataset
        self.config = config
        self.moa = moa if moa is not None else dataset.moa
        self.dropped = {}
        drugs = list(dataset.drugs)
        if config.drug_feature_mode == "matrix":
            if dataset.drug_features is None:
                raise UsageError("drug_feature_mode 'matrix' needs drug features in the dataset")
            covered = set(dataset.drug_features.entity_ids)
            lost = [d for d in drugs if d not in covered]
            if lost:
                self.dropped["drugs_without_features"] = lost
                drugs = [d for d in drugs if d in covered]
        if config.drug_feature_mode == "moa_onehot" and self.moa is None:
            raise UsageError("drug_feature_mode 'moa_onehot' needs a MoA map")
        self.drugs = drugs
        self.cells = list(dataset.cells)
        self.Y, self.mask = dataset.response.to_matrix(self.drugs, self.cells)
        if self.dropped.get("drugs_without_features"):
            self.dropped["records"] = int(dataset.response.n_records - self.mask.sum())
        self.raw_cell = dataset.cell_features.rows(self.cells)
        self.drug_index = {d: i for i, d in enumerate(self.drugs)}
        self.cell_index = {c: j for j, c in enumerate(self.cells)}
        self._cell_cache = {}

    # cell features, optionally PCA-reduced per modality on the training cells
    def cell_block(self, train_cells_idx):
        key = tuple(train_cells_idx)
        if key in self._cell_cache:
            return self._cell_cache[key]
        fm = self.dataset.cell_features
        pipeline = self.config.cell_pipeline or ()
        if not pipeline:
            X = self.raw_cell.copy()
        else:
            parts = []
            names = fm.feature_names
            for spec in pipeline:
                spec = spec if isinstance(spec, ModalitySpec) else ModalitySpec(**spec)
                if spec.prefix:
                    cols = [i for i, f in enumerate(names) if f.startswith(spec.prefix + ":")]
                else:
                    cols = list(range(len(names)))
                if not cols:
                    raise DataError(f"no cell features for modality {spec.prefix!r}")
                block = self.raw_cell[:, cols]
                if spec.n_components:
                    model = pca_fit(block[list(train_cells_idx)], spec.n_components, prefix=spec.prefix)
                    block = pca_transform(model, block)
                parts.append(block)
            X = np.hstack(parts)
        if self.config.standardize:
            tr = X[list(train_cells_idx)]
            sd = tr.std(axis=0)
            sd[sd == 0] = 1.0
            X = (X - tr.mean(axis=0)) / sd
        self._cell_cache[key] = X
        return X

    def drug_block(self, train_drugs_idx):
        cfg = self.config
        mode = cfg.drug_feature_mode
        if mode == "none":
            return None
        if mode == "matrix":
            F = self.dataset.drug_features.rows(self.drugs)
            if cfg.drug_pca:
                model = pca_fit(F[list(train_drugs_idx)], cfg.drug_pca, prefix="drug")
                F = pca_transform(model, F)
            return F
        if mode == "moa_onehot":
            classes = self.moa.classes
            ci = {c: i for i, c in enumerate(classes)}
            F = np.zeros((len(self.drugs), len(classes)))
            for i, d in enumerate(self.drugs):
                lab = self.moa.get(d)
                if lab is not None:
                    F[i, ci[lab]] = 1.0
            return F
        return np.array([derive_rng(cfg.random_seed, "drug-vector", d).standard_normal(cfg.random_dim) for d in self.drugs])

    def weights(self, drug_idx, weight=None, moa_class=None):
        W = self.mask[drug_idx].astype(float)
        if weight is not None and weight != 1.0 and self.moa is not None:
            boost = np.array([self.moa.get(self.drugs[i]) == moa_class for i in drug_idx])
            W[boost] *= weight
        return W


def _zscore_rows(Y):
    """Per-row (drug) standardisation over observed entries, population sd."""
    out = np.full_like(Y, np.nan)
    for i in range(Y.shape[0]):
        obs = ~np.isnan(Y[i])
        v = Y[i, obs]
        if v.size == 0:
            continue
        c = v - v.mean()
        sd = np.sqrt(np.mean(c * c))
        out[i, obs] = c / sd if v.size > 1 and np.ptp(v) > 0 and sd > 0 else 0.0
    return out


def _fit_predict(grid, train_drugs, train_cells, test_pairs, Y_train=None, weight=None, moa_class=None):
    """Fit on the (train_drugs x train_cells) sub-grid, predict test (drug, cell) index pairs."""
    cfg = grid.config
    X = grid.cell_block(train_cells)
    F = grid.drug_block(train_drugs)
    Yt = grid.Y[np.ix_(train_drugs, train_cells)] if Y_train is None else Y_train
    if cfg.target_mode == "zscore":
        Yt = _zscore_rows(Yt)
    W = grid.weights(train_drugs, weight, moa_class)[:, train_cells]
    if weight is None and cfg.weighting_mode == "moa_weight":
        W = grid.weights(train_drugs, cfg.moa_weight, cfg.moa_class)[:, train_cells]
    if not (W > 0).any():
        raise DataError("empty training fold")
    model = ridge_fit_grouped(
        X[train_cells], Yt, alpha=cfg.alpha, W=W, drug_F=None if F is None else F[train_drugs],
    )
    di, ci = test_pairs
    return predict_grouped(model, X, F, di, ci), model


def _observed_pairs(grid, drug_idx, cell_idx):
    sub = grid.mask[np.ix_(drug_idx, cell_idx)]
    ii, jj = np.nonzero(sub)
    return np.asarray(drug_idx)[ii], np.asarray(cell_idx)[jj]


def _to_table(grid, di, ci, values):
    drugs = np.array(grid.drugs, dtype=str)
    cells = np.array(grid.cells, dtype=str)
    return PredictionTable(drugs[di], cells[ci], values)


def _evaluate(grid, fold_tables, cfg, folds_info, extra=None):
    truth = grid.dataset.response
    pooled = PredictionTable.concat(fold_tables)
    report = metrics.per_drug_r(pooled, truth, cfg.min_obs, cfg.zero_variance_policy)
    per_fold = []
    for t in fold_tables:
        try:
            per_fold.append(metrics.per_drug_r(t, truth, cfg.min_obs, cfg.zero_variance_policy))
        except DataError:
            per_fold.append(None)
    try:
        decomposition = metrics.decompose_global_r(pooled, truth)
    except DataError:
        decomposition = None
    z_truth = zscore_per_drug(truth.restrict(drugs=pooled.drugs))
    return CvResult(
        report=report,
        per_fold=per_fold,
        predictions=pooled,
        decomposition=decomposition,
        global_r_zscored_truth=metrics.global_r(pooled, z_truth),
        config=cfg.echo(),
        folds=folds_info,
        dropped=dict(grid.dropped),
        extra=extra or {},
    )


# ---------------------------------------------------------------- pipelines


def _fold_spec(grid, cfg):
    if cfg.fold_spec is not None:
        return cfg.fold_spec
    if cfg.scheme == "cell_blind":
        ents = grid.cells
    elif cfg.scheme == "mixed":
        ii, jj = np.nonzero(grid.mask)
        ents = [f"{grid.drugs[i]}\t{grid.cells[j]}" for i, j in zip(ii, jj)]
    else:
        ents = grid.drugs
    return make_folds(ents, cfg.scheme, cfg.k, cfg.seed, grid.dataset.scaffold)


def run_cv(dataset, config, moa=None):
    """k-fold cross-validation under ``config.scheme``.

    Training targets may be z-scored per drug; evaluation is always against
    the raw response table.
    """
    cfg = config.validate()
    grid = _Grid(dataset, cfg, moa)
    spec = _fold_spec(grid, cfg)
    n_d, n_c = len(grid.drugs), len(grid.cells)
    all_d, all_c = np.arange(n_d), np.arange(n_c)

    def one_fold(f):
        members = set(spec.members(f))
        if cfg.scheme in ("drug_blind", "scaffold", "within_moa_loo"):
            test_d = np.array([i for i, d in enumerate(grid.drugs) if d in members], dtype=int)
            train_d = np.setdiff1d(all_d, test_d)
            assert not set(train_d) & set(test_d)
            pairs = _observed_pairs(grid, test_d, all_c)
            preds, _ = _fit_predict(grid, train_d, all_c, pairs)
        elif cfg.scheme == "cell_blind":
            test_c = np.array([j for j, c in enumerate(grid.cells) if c in members], dtype=int)
            train_c = np.setdiff1d(all_c, test_c)
            assert not set(train_c) & set(test_c)
            pairs = _observed_pairs(grid, all_d, test_c)
            preds, _ = _fit_predict(grid, all_d, train_c, pairs)
        else:
            held = np.zeros_like(grid.mask)
            for key in members:
                d, c = key.split("\t")
                held[grid.drug_index[d], grid.cell_index[c]] = True
            Yt = np.where(held, np.nan, grid.Y)
            pairs = np.nonzero(held)
            preds, _ = _fit_predict(grid, all_d, all_c, pairs, Y_train=Yt)
        return _to_table(grid, pairs[0], pairs[1], preds)

    tables = parallel_map(one_fold, range(spec.k), cfg.threads)
    return _evaluate(grid, tables, cfg, spec.to_dict())


def run_within_moa_loo(dataset, class_label, moa=None, alpha=1.0, config=None):
    """Leave-one-drug-out inside one MoA class, training only on its other members."""
    moa = moa if moa is not None else dataset.moa
    if moa is None:
        raise UsageError("within-MoA LOO needs a MoA map")
    members = [d for d in moa.members(class_label) if d in dataset.response.drug_slices]
    if len(members) < 2:
        raise DataError(f"class {class_label!r} has {len(members)} drug(s); need >= 2")
    base = config or CvConfig()
    cfg = dataclasses.replace(
        base, scheme="within_moa_loo", drug_feature_mode="none", weighting_mode="uniform",
        alpha=alpha, fold_spec=None,
    ).validate()
    grid = _Grid(dataset, cfg, moa)
    all_c = np.arange(len(grid.cells))
    idx = [grid.drug_index[d] for d in members]

    def one(i):
        train = np.array([j for j in idx if j != i], dtype=int)
        pairs = _observed_pairs(grid, np.array([i]), all_c)
        preds, _ = _fit_predict(grid, train, all_c, pairs)
        return _to_table(grid, pairs[0], pairs[1], preds)

    tables = parallel_map(one, idx, cfg.threads)
    return _evaluate(grid, tables, cfg, {"scheme": "within_moa_loo", "class": class_label, "k": len(idx)})


@dataclass(eq=False)
class MoaWeightedResult:
    result: CvResult
    uniform: CvResult
    selected_weights: dict  # class -> [weight per outer fold]
    per_class: dict  # class -> {n, uniform, weighted, delta}
    uncovered_drugs: list = field(default_factory=list)

    def to_dict(self):
        return {
            "result": self.result.to_dict(),
            "uniform": self.uniform.to_dict(),
            "selected_weights": self.selected_weights,
            "per_class": self.per_class,
            "uncovered_drugs": self.uncovered_drugs,
        }


def _inner_split(drugs_idx, in_class, rng, fraction=0.2):
    """Stratified 80/20 split of training drug indices (by target-class membership)."""
    val = []
    for flag in (True, False):
        group = [i for i, c in zip(drugs_idx, in_class) if c == flag]
        if len(group) < 2:
            continue
        order = rng.permutation(len(group))
        n_val = max(1, int(round(fraction * len(group))))
        val.extend(group[j] for j in order[:n_val])
    val = sorted(val)
    train = sorted(set(drugs_idx) - set(val))
    return np.array(train, dtype=int), np.array(val, dtype=int)


def run_moa_weighted(dataset, moa=None, weight_grid=DEFAULT_WEIGHT_GRID, config=None, classes=None, inner_fraction=0.2):
    """All-drug training with same-class samples up-weighted, weight chosen per outer fold.

    For every target class and outer fold an inner 80/20 split of the training
    drugs picks the grid weight with the best inner per-drug r on that class
    (ties go to the smaller weight). Each test drug is predicted by the model
    weighted toward its own class; unlabelled drugs keep the uniform model.
    """
    grid_w = sorted(float(w) for w in weight_grid)
    if not grid_w:
        raise UsageError("weight grid is empty")
    if any(w <= 0 for w in grid_w):
        raise UsageError("weights must be positive")
    moa = moa if moa is not None else dataset.moa
    if moa is None:
        raise UsageError("MoA weighting needs a MoA map")
    base = (config or CvConfig()).validate()
    base = dataclasses.replace(base, weighting_mode="uniform")
    uniform = run_cv(dataset, base, moa=moa)
    grid = _Grid(dataset, base, moa)
    spec = _fold_spec(grid, base)
    if spec.scheme not in ("drug_blind", "scaffold"):
        raise UsageError("MoA weighting runs on drug-level folds (drug_blind or scaffold)")
    all_c = np.arange(len(grid.cells))
    labels = [moa.get(d) for d in grid.drugs]
    uncovered = [d for d, lab in zip(grid.drugs, labels) if lab is None]
    targets = list(classes) if classes is not None else list(moa.classes)

    uniform_pred = {k: v for k, v in zip(uniform.predictions.keys(), uniform.predictions.values)}

    def inner_score(train_idx, val_idx, w, cls):
        val_cls = np.array([i for i in val_idx if labels[i] == cls], dtype=int)
        pairs = _observed_pairs(grid, val_cls, all_c)
        preds, _ = _fit_predict(grid, train_idx, all_c, pairs, weight=w, moa_class=cls)
        table = _to_table(grid, pairs[0], pairs[1], preds)
        try:
            return metrics.per_drug_r(table, dataset.response, base.min_obs, base.zero_variance_policy).per_drug_r_mean
        except DataError:
            return None

    def one_fold(f):
        members = set(spec.members(f))
        test_d = np.array([i for i, d in enumerate(grid.drugs) if d in members], dtype=int)
        train_d = np.setdiff1d(np.arange(len(grid.drugs)), test_d)
        chosen, out = {}, {}
        for cls in targets:
            test_cls = np.array([i for i in test_d if labels[i] == cls], dtype=int)
            if test_cls.size == 0:
                continue
            in_cls = [labels[i] == cls for i in train_d]
            w_sel = grid_w[0]
            if sum(in_cls) >= 2 and len(grid_w) > 1:
                rng = derive_rng(base.seed, "moa-inner", cls, f)
                tr, va = _inner_split(list(train_d), in_cls, rng, inner_fraction)
                best = None
                for w in grid_w:
                    s = inner_score(tr, va, w, cls)
                    if s is not None and (best is None or s > best):
                        best, w_sel = s, w
            chosen[cls] = w_sel
            pairs = _observed_pairs(grid, test_cls, all_c)
            preds, _ = _fit_predict(grid, train_d, all_c, pairs, weight=w_sel, moa_class=cls)
            out[cls] = _to_table(grid, pairs[0], pairs[1], preds)
        return chosen, out

    fold_out = parallel_map(one_fold, range(spec.k), base.threads)
    selected = {cls: [] for cls in targets}
    weighted_tables = []
    for chosen, out in fold_out:
        for cls, w in chosen.items():
            selected[cls].append(w)
        weighted_tables.extend(out.values())
    covered = set()
    for t in weighted_tables:
        covered.update(t.keys())
    rest = [k for k in uniform.predictions.keys() if k not in covered]
    if rest:
        weighted_tables.append(PredictionTable([k[0] for k in rest], [k[1] for k in rest], [uniform_pred[k] for k in rest]))
    result = _evaluate(grid, weighted_tables, base, spec.to_dict(), {"weight_grid": grid_w})
    per_class = {}
    for cls in targets:
        drugs = moa.members(cls)
        u, w = uniform.class_mean(drugs), result.class_mean(drugs)
        per_class[cls] = {
            "n": sum(1 for d in drugs if d in result.per_drug_values),
            "uniform": u,
            "weighted": w,
            "delta": None if u is None or w is None else w - u,
        }
    return MoaWeightedResult(result, uniform, {k: v for k, v in selected.items() if v}, per_class, uncovered)


def seed_sensitivity(dataset, config, seeds=range(10)):
    """Pooled per-drug r over several fold seeds."""
    vals = []
    for s in seeds:
        cfg = dataclasses.replace(config, seed=int(s), fold_spec=None)
        vals.append(run_cv(dataset, cfg).report.per_drug_r_mean)
    vals = np.array(vals)
    return {"seeds": [int(s) for s in seeds], "per_drug_r": vals.tolist(), "mean": float(vals.mean()), "sd": float(vals.std(ddof=1))}
