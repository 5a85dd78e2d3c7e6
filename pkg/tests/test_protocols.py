import dataclasses
from collections import Counter

import numpy as np
import pytest

from rankbench import metrics, synth
from rankbench import protocols as P
from rankbench.dataio import AlignedDataset, FeatureMatrix, MoaMap, ResponseTable, ScaffoldMap
from rankbench.errors import DataError, UsageError


@pytest.fixture(scope="module")
def small():
    return synth.generate(synth.preset("two-cluster", n_drugs=40, n_cells=120, seed=1)).aligned()


@pytest.fixture(scope="module")
def dominance():
    return synth.generate(synth.preset("dominance")).aligned()


# ------------------------------------------------------------------ folds


def test_round_robin_sizes():
    spec = P.make_folds([f"e{i}" for i in range(10)], "drug_blind", k=5, seed=0)
    assert spec.sizes() == [2] * 5
    assert set(spec.assignment) == {f"e{i}" for i in range(10)}


def test_scaffold_greedy_packing():
    groups = {"A": 4, "B": 3, "C": 2, "D": 1}
    scaf = ScaffoldMap({f"{g}{i}": g for g, n in groups.items() for i in range(n)})
    spec = P.make_folds(scaf.drugs, "scaffold", k=2, scaffold=scaf)
    assert sorted(spec.sizes()) == [5, 5]
    for g in groups:
        assert len({spec.assignment[d] for d in scaf.members(g)}) == 1
    assert spec.assignment["A0"] == spec.assignment["D0"]
    with pytest.raises(DataError):
        P.make_folds(scaf.drugs, "scaffold", k=5, scaffold=scaf)


def test_scaffold_unmapped_drugs_are_singletons():
    scaf = ScaffoldMap({"a": "S", "b": "S"})
    spec = P.make_folds(["a", "b", "c", "d"], "scaffold", k=3, scaffold=scaf)
    assert spec.assignment["a"] == spec.assignment["b"]
    assert sorted(spec.sizes()) == [1, 1, 2]


def test_folds_deterministic_and_seeded():
    ents = [f"d{i:02d}" for i in range(23)]
    a = P.make_folds(ents, "drug_blind", 5, 42)
    assert a.assignment == P.make_folds(reversed(ents), "drug_blind", 5, 42).assignment
    assert a.assignment != P.make_folds(ents, "drug_blind", 5, 43).assignment
    assert a.assignment != P.make_folds(ents, "cell_blind", 5, 42).assignment
    assert sorted(a.sizes()) == [4, 4, 5, 5, 5]


def test_fold_errors():
    with pytest.raises(UsageError):
        P.make_folds(["a", "b"], "drug_blind", k=1)
    with pytest.raises(DataError):
        P.make_folds(["a", "b"], "drug_blind", k=3)
    with pytest.raises(UsageError):
        P.make_folds(["a", "b"], "scaffold", k=2)
    with pytest.raises(UsageError):
        P.make_folds(["a", "b"], "leave-one-out", k=2)
    loo = P.make_folds(["b", "a", "c"], "within_moa_loo")
    assert loo.k == 3 and loo.sizes() == [1, 1, 1]


# ------------------------------------------------------------------ permuted MoA


def test_permute_moa():
    single = MoaMap({"a": "X", "b": "X", "c": "X"})
    assert P.permute_moa(single).labels == single.labels
    m = MoaMap({"a": "A", "b": "A", "c": "B"})
    for seed in range(20):
        assert P.permute_moa(m, seed).class_sizes() == {"A": 2, "B": 1}
    big = MoaMap({f"d{i}": "ABCDE"[i % 5 if i < 30 else 0] for i in range(40)})
    p = P.permute_moa(big, 42)
    assert p.labels == P.permute_moa(big, 42).labels
    assert p.class_sizes() == big.class_sizes()
    assert p.labels != big.labels


# ------------------------------------------------------------------ run_cv


def test_run_cv_pooled_equals_concat_and_disjoint(small):
    res = P.run_cv(small, P.CvConfig(k=5, seed=3))
    keys = res.predictions.keys()
    assert len(keys) == len(set(keys)) == small.response.n_records
    spec = P.make_folds(small.drugs, "drug_blind", 5, 3)
    assert res.folds["sizes"] == spec.sizes()
    assert len(res.per_fold) == 5
    for f, rep in enumerate(res.per_fold):
        assert set(rep.per_drug_values) == set(spec.members(f))
    again = metrics.per_drug_r(res.predictions, small.response)
    assert again.per_drug_values == res.report.per_drug_values
    assert res.report.n_drugs_evaluated == len(small.drugs)


def test_run_cv_deterministic_across_threads(small):
    a = P.run_cv(small, P.CvConfig(threads=1))
    b = P.run_cv(small, P.CvConfig(threads=4))
    assert np.array_equal(a.predictions.values, b.predictions.values)


def test_drug_encodings_do_not_move_per_drug_r():
    ds = synth.generate(synth.preset("two-cluster", n_drugs=40, n_cells=120, seed=2))
    shift = {d: 4.0 * int(ds.moa[d] == "cluster1") for d in ds.response.drugs}
    vals = ds.response.values + np.array([shift[d] for d in ds.response.drug_ids])
    data = AlignedDataset(ds.response.with_values(vals), ds.cell_features, moa=ds.moa)
    base = P.run_cv(data, P.CvConfig())
    onehot = P.run_cv(data, P.CvConfig(drug_feature_mode="moa_onehot"))
    rand = P.run_cv(data, P.CvConfig(drug_feature_mode="random_vector", random_dim=2048))
    assert abs(onehot.report.per_drug_r_mean - base.report.per_drug_r_mean) <= 0.01
    assert abs(rand.report.per_drug_r_mean - base.report.per_drug_r_mean) <= 0.01
    assert onehot.decomposition.global_r_exact > base.decomposition.global_r_exact + 0.1


def test_zscored_targets_collapse_global_r(dominance):
    raw = P.run_cv(dominance, P.CvConfig(drug_feature_mode="matrix"))
    z = P.run_cv(dominance, P.CvConfig(drug_feature_mode="matrix", target_mode="zscore"))
    assert raw.decomposition.global_r_exact - z.decomposition.global_r_exact >= 0.3
    assert abs(raw.report.per_drug_r_mean - z.report.per_drug_r_mean) <= 0.02
    assert z.global_r_zscored_truth is not None


def test_affine_truth_reexpression_leaves_per_drug_r(small):
    res = P.run_cv(small, P.CvConfig(target_mode="zscore"))
    rng = np.random.default_rng(0)
    a = {d: rng.normal() for d in small.drugs}
    b = {d: rng.uniform(0.1, 10) for d in small.drugs}
    t = small.response
    moved = t.with_values(np.array([a[d] + b[d] * v for d, v in zip(t.drug_ids, t.values)]))
    again = metrics.per_drug_r(res.predictions, moved).per_drug_values
    for d, v in res.report.per_drug_values.items():
        assert abs(again[d] - v) <= 1e-9


def test_matrix_mode_drops_uncovered_drugs(small):
    covered = small.drugs[:-3]
    F = FeatureMatrix(tuple(covered), ("f1",), np.arange(len(covered), dtype=float)[:, None], "drug")
    data = dataclasses.replace(small, drug_features=F)
    res = P.run_cv(data, P.CvConfig(drug_feature_mode="matrix"))
    assert res.dropped["drugs_without_features"] == list(small.drugs[-3:])
    assert set(res.report.per_drug_values) == set(covered)
    with pytest.raises(UsageError):
        P.run_cv(small, P.CvConfig(drug_feature_mode="matrix"))


def test_cell_blind_and_pca_pipeline(small):
    cfg = P.CvConfig(scheme="cell_blind", k=4, cell_pipeline=(P.ModalitySpec("", 5),))
    res = P.run_cv(small, cfg)
    assert res.report.n_drugs_evaluated > 0
    assert len(res.predictions.keys()) == small.response.n_records


def test_seed_sensitivity_reference():
    ds = synth.generate(synth.preset("two-cluster")).aligned()
    out = P.seed_sensitivity(ds, P.CvConfig())
    assert len(out["per_drug_r"]) == 10
    assert out["sd"] <= 0.02


# ------------------------------------------------------------------ MoA experiments


def test_within_moa_identical_pair_reaches_ceiling():
    cfg = synth.SynthConfig(
        n_drugs=2, n_cells=2000, latent_dim=5, signal_scale=(1, 1), within_cluster_angle=0,
        sigma_noise=0.5, n_distractor_features=5,
    )
    ds = synth.generate(cfg).aligned()
    res = P.run_within_moa_loo(ds, "cluster0")
    assert res.report.per_drug_r_mean == pytest.approx(1 / np.sqrt(1.25), abs=0.02)


def test_within_moa_heterogeneous_class_no_gain():
    cfg = synth.SynthConfig(
        n_drugs=6, n_cells=300, latent_dim=8, n_clusters=6, between_cluster_cos=0.0,
        within_cluster_angle=0, sigma_noise=0.5, seed=3,
    )
    ds = synth.generate(cfg).aligned()
    ds = dataclasses.replace(ds, moa=MoaMap({d: "X" for d in ds.drugs}))
    within = P.run_within_moa_loo(ds, "X").report.per_drug_r_mean
    pooled = P.run_cv(ds, P.CvConfig(k=3)).report.per_drug_r_mean
    assert abs(within - pooled) <= 0.05


def test_within_moa_errors(small):
    moa = MoaMap({small.drugs[0]: "solo"})
    with pytest.raises(DataError):
        P.run_within_moa_loo(small, "solo", moa=moa)


def test_weight_one_matches_uniform(small):
    out = P.run_moa_weighted(small, weight_grid=(1,))
    assert np.max(np.abs(_aligned(out.result.predictions, out.uniform.predictions))) <= 1e-12
    assert all(w == [1.0] * len(w) for w in out.selected_weights.values())
    with pytest.raises(UsageError):
        P.run_moa_weighted(small, weight_grid=())


def _aligned(a, b):
    va = dict(zip(a.keys(), a.values))
    return np.array([va[k] - v for k, v in zip(b.keys(), b.values)])


def test_huge_weight_approaches_within_class_training(small):
    # weight c on the class with alpha is the class-only fit at alpha / c plus O(1/c) from the rest
    grid_big = P._Grid(small, P.CvConfig(alpha=1.0), small.moa)
    grid_cls = P._Grid(small, P.CvConfig(alpha=1e-6), small.moa)
    cells = np.arange(len(grid_big.cells))
    labels = [small.moa[d] for d in grid_big.drugs]
    test = np.array([0])
    train = np.arange(1, len(grid_big.drugs))
    same = np.array([i for i in train if labels[i] == labels[0]])
    pairs = P._observed_pairs(grid_big, test, cells)
    big, _ = P._fit_predict(grid_big, train, cells, pairs, weight=1e6, moa_class=labels[0])
    only, _ = P._fit_predict(grid_cls, same, cells, pairs)
    assert np.max(np.abs(big - only)) <= 1e-3 * np.max(np.abs(only))


def test_run_moa_weighted_reports(small):
    out = P.run_moa_weighted(small, weight_grid=(1, 5, 20), classes=["cluster0"])
    assert set(out.selected_weights) == {"cluster0"}
    assert len(out.selected_weights["cluster0"]) == 5
    row = out.per_class["cluster0"]
    assert row["delta"] == pytest.approx(row["weighted"] - row["uniform"])
    # cluster1 drugs keep the uniform predictions
    u = dict(zip(out.uniform.predictions.keys(), out.uniform.predictions.values))
    for k, v in zip(out.result.predictions.keys(), out.result.predictions.values):
        if small.moa[k[0]] == "cluster1":
            assert v == u[k]


def test_config_validation():
    with pytest.raises(UsageError):
        P.CvConfig(drug_feature_mode="smiles").validate()
    with pytest.raises(UsageError):
        P.CvConfig(target_mode="rank").validate()
    echo = P.CvConfig(seed=7).echo()
    assert echo["seed"] == 7
