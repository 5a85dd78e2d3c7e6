import numpy as np
import pytest

from rankbench import leakage as L
from rankbench import models, synth
from rankbench.dataio import FeatureMatrix, PredictionTable, ResponseTable
from rankbench.errors import DataError, NumericalError, UsageError


def _split_data(seed=0, n_cells=30, noise=0.3):
    rng = np.random.default_rng(seed)
    cells = [f"c{j:02d}" for j in range(n_cells)]
    X = rng.normal(size=(n_cells, 3))
    beta = np.array([1.0, -0.5, 0.25])
    drugs = [f"d{i}" for i in range(9)]
    Y = 2 + (X @ beta)[None, :] + noise * rng.normal(size=(9, n_cells))
    table = ResponseTable.from_matrix(drugs, cells, Y)
    cf = FeatureMatrix(tuple(cells), ("x1", "x2", "x3"), X, "cell")
    train = table.restrict(drugs=set(drugs[:5]))
    val = table.restrict(drugs=set(drugs[5:7]))
    test = table.restrict(drugs=set(drugs[7:]))
    return train, val, test, cf


def test_gradient_descent_converges_to_ridge():
    train, val, test, cf = _split_data()
    trace = L.iterative_learner_trace(train, val, test, cf, lr=0.1, epochs=3000, alpha=1.0)
    X = cf.rows(train.cell_ids.tolist())
    mean, sd = X.mean(axis=0), X.std(axis=0)
    ref = models.ridge_fit((X - mean) / sd, train.values, alpha=1.0)
    Xt = (cf.rows(test.cell_ids.tolist()) - mean) / sd
    assert trace.epochs[-1][2].values == pytest.approx(models.ridge_predict(ref, Xt), abs=1e-4)


def test_single_epoch_and_zero_features():
    train, val, test, _ = _split_data()
    empty = FeatureMatrix(tuple(train.cells), (), np.zeros((len(train.cells), 0)), "cell")
    trace = L.iterative_learner_trace(train, val, test, empty, lr=0.5, epochs=4)
    c = 0.0
    for epoch, vp, tp in trace.epochs:
        c += 0.5 * (train.values.mean() - c)
        assert np.all(vp.values == vp.values[0]) and np.all(tp.values == tp.values[0])
        assert tp.values[0] == pytest.approx(c, abs=1e-12)
    assert len(L.iterative_learner_trace(train, val, test, empty, epochs=1)) == 1


def test_learner_errors():
    train, val, test, cf = _split_data()
    with pytest.raises(NumericalError, match="epoch"):
        L.iterative_learner_trace(train, val, test, cf, lr=50.0, epochs=200)
    with pytest.raises(UsageError):
        L.iterative_learner_trace(train, train, test, cf)
    with pytest.raises(UsageError):
        L.iterative_learner_trace(train, val, test, cf, epochs=0)


def _trace(val_rs, test_rs):
    """Each epoch's predictions hit a prescribed global r against fixed truth."""
    rng = np.random.default_rng(0)
    n = 50
    y = rng.normal(size=n)
    e = rng.normal(size=n)
    z = (y - y.mean()) / y.std()
    e = e - e.mean() - (e @ z) / n * z
    e /= e.std()
    drugs = np.array([f"d{i % 5}" for i in range(n)])
    cells = np.array([f"c{i:02d}" for i in range(n)])

    def table(r):
        return PredictionTable(drugs, cells, r * z + np.sqrt(1 - r * r) * e)

    truth = ResponseTable(drugs, cells, y)
    epochs = [(i + 1, table(v), table(t)) for i, (v, t) in enumerate(zip(val_rs, test_rs))]
    return L.EpochTrace(epochs, truth, truth)


def test_checkpoint_policies():
    tr = _trace([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.65, 0.6], [0.1, 0.3, 0.6, 0.5, 0.4, 0.3, 0.2, 0.2, 0.2])
    assert L.select_checkpoint(tr, "test_max") == 3
    assert L.select_checkpoint(tr, "validation_max") == 7
    assert L.select_checkpoint(tr, "last") == 9
    mono = _trace([0.1, 0.2, 0.3], [0.2, 0.3, 0.4])
    assert {L.select_checkpoint(mono, p) for p in L.POLICIES} == {3}
    tie = _trace([0.1, 0.5, 0.2, 0.5], [0.1, 0.1, 0.1, 0.1])
    assert L.select_checkpoint(tie, "validation_max") == 2
    with pytest.raises(UsageError):
        L.select_checkpoint(tie, "best")


def test_fair_selection_never_reads_test():
    tr = _trace([0.1, 0.4, 0.2], [0.3, 0.2, 0.1])
    blind = L.EpochTrace([(e, v, None) for e, v, _ in tr.epochs], tr.val_truth, None)
    assert L.select_checkpoint(blind, "validation_max") == 2


def test_all_null_metric_raises():
    truth = ResponseTable(["d0", "d0"], ["c0", "c1"], [1.0, 2.0])
    const = PredictionTable(["d0", "d0"], ["c0", "c1"], [1.0, 1.0])
    tr = L.EpochTrace([(1, const, const), (2, const, const)], truth, truth)
    with pytest.raises(DataError):
        L.select_checkpoint(tr, "validation_max")


def test_inflation_report_structure_errors():
    tr = _trace([0.1, 0.4], [0.3, 0.2])
    with pytest.raises(UsageError):
        L.inflation_report([tr])
    with pytest.raises(UsageError):
        L.inflation_report([tr, _trace([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])])
    rep = L.inflation_report([tr, tr], min_obs=2)
    assert rep.snoop_inflation == pytest.approx(0.3 - 0.2, abs=1e-12)
    assert rep.best_fold_inflation == pytest.approx(0.0, abs=1e-12)


def test_noiseless_inflation_small():
    cfg = synth.SynthConfig(n_drugs=40, n_cells=80, latent_dim=4, sigma_noise=0.0, n_distractor_features=0,
                            n_drug_features=1, drug_feature_noise=0.0, seed=1)
    rep = L.simulate_leakage(synth.generate(cfg).aligned(), n_folds=5, epochs=30, seed=1)
    assert rep.snoop_inflation <= 0.01


def test_inflation_nonnegative_and_deterministic():
    ds = synth.generate(synth.preset("noisy-leakage", seed=4)).aligned()
    a = L.simulate_leakage(ds, n_folds=4, epochs=20, seed=4, threads=1)
    b = L.simulate_leakage(ds, n_folds=4, epochs=20, seed=4, threads=4)
    assert a.to_dict() == b.to_dict()
    assert a.snoop_inflation >= 0 and a.best_fold_inflation >= 0
    for row in a.per_fold:
        assert row["global_r"]["test_max"] >= max(row["global_r"].values())
