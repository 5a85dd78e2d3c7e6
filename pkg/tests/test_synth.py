import numpy as np
import pytest

from rankbench import metrics, synth
from rankbench.dataio import PredictionTable
from rankbench.errors import UsageError
from rankbench.models import drug_mean_predictor


def test_same_seed_identical():
    cfg = synth.preset("two-cluster", n_drugs=20, n_cells=50, seed=5)
    a, b = synth.generate(cfg), synth.generate(cfg)
    assert np.array_equal(a.response.values, b.response.values)
    assert synth.ground_truth_json(a) == synth.ground_truth_json(b)
    assert a.cell_features.equals(b.cell_features)
    c = synth.generate(synth.preset("two-cluster", n_drugs=20, n_cells=50, seed=6))
    assert not np.array_equal(a.response.values, c.response.values)


def test_noise_free_signal_is_recovered():
    ds = synth.generate(synth.SynthConfig(n_drugs=10, n_cells=40, sigma_noise=0.0))
    sig = synth.true_signal(ds)
    pred = PredictionTable(sig.drug_ids, sig.cell_ids, sig.values)
    rep = metrics.per_drug_r(pred, ds.response)
    assert rep.per_drug_values and all(v == pytest.approx(1.0, abs=1e-12) for v in rep.per_drug_values.values())


def test_dominance_preset_between_share():
    ds = synth.generate(synth.preset("dominance"))
    dec = metrics.decompose_global_r(drug_mean_predictor(ds.response).predict_table(ds.response), ds.response)
    assert dec.omega_b > 0.9


def test_attainable_r_matches_ceiling():
    ds = synth.generate(synth.SynthConfig(n_drugs=15, n_cells=2000, sigma_noise=0.8, seed=2))
    sig = synth.true_signal(ds)
    got = metrics.per_drug_r(PredictionTable(sig.drug_ids, sig.cell_ids, sig.values), ds.response).per_drug_values
    for d, r in got.items():
        assert abs(r - ds.ground_truth["ceiling"][d]) <= 0.03
    sim = synth.simulated_ceiling(ds, n_cells=20000)
    for d, r in sim.items():
        assert abs(r - ds.ground_truth["ceiling"][d]) <= 0.03


def test_drug_means_converge():
    cfg = synth.SynthConfig(n_drugs=10, n_cells=10000, sigma_noise=1.0, seed=3)
    ds = synth.generate(cfg)
    gt = ds.ground_truth
    for d in ds.response.drugs:
        _, v = ds.response.drug_values(d)
        se = np.sqrt(gt["signal_scale"][d] ** 2 + cfg.sigma_noise**2) / np.sqrt(v.size)
        assert abs(v.mean() - gt["mu"][d]) <= 3 * se


def test_cluster_geometry():
    cfg = synth.SynthConfig(n_drugs=12, n_clusters=3, latent_dim=6, between_cluster_cos=0.2, within_cluster_angle=25.0)
    ds = synth.generate(cfg)
    bases = np.array(ds.ground_truth["cluster_bases"])
    G = bases @ bases.T
    assert np.diag(G) == pytest.approx(np.ones(3), abs=1e-12)
    assert G[np.triu_indices(3, 1)] == pytest.approx([0.2] * 3, abs=1e-12)
    for d, k in ds.ground_truth["cluster"].items():
        u = np.array(ds.ground_truth["direction"][d])
        assert np.linalg.norm(u) == pytest.approx(1.0)
        assert u @ bases[k] == pytest.approx(np.cos(np.deg2rad(25.0)), abs=1e-12)
        assert ds.moa[d] == f"cluster{k}"


def test_holdout_clusters_and_split():
    ds = synth.generate(synth.preset("no-analog"))
    test = set(ds.test_drugs)
    assert {ds.moa[d] for d in test} == {"cluster6", "cluster7"}
    train, held = ds.split()
    assert set(held.drugs) == test and not set(train.drugs) & test


def test_features_layout():
    ds = synth.generate(synth.preset("noisy-leakage"))
    assert ds.cell_features.values.shape == (100, 10)
    assert ds.drug_features.feature_names[0] == "potency1"
    assert len(ds.drug_features.feature_names) == 31


@pytest.mark.parametrize("bad", [
    dict(n_drugs=0), dict(sigma_noise=-1.0), dict(signal_scale=(1.0, 0.5)), dict(shared_weight=2.0),
    dict(n_clusters=3, between_cluster_cos=-0.9, latent_dim=8), dict(n_clusters=2, holdout_clusters=2),
])
def test_config_validation(bad):
    with pytest.raises(UsageError):
        synth.generate(synth.SynthConfig(**bad))


def test_unknown_preset():
    with pytest.raises(UsageError):
        synth.preset("huge")
