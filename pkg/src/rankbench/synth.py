"""Synthetic drug-response data with planted structure.

    y[d, c] = mu[d] + s[d] * (u[d] . z[c]) + noise

Drug directions u[d] come in clusters (the MoA labels): each cluster has a
base unit vector and members deviate from it by a fixed angle. Cell features
are the latent z[c] plus pure-noise distractor columns.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import FeatureMatrix, MoaMap, ResponseTable, align
from .errors import UsageError
from .runtime import derive_rng


@dataclass
class SynthConfig:
    n_drugs: int = 60
    n_cells: int = 200
    latent_dim: int = 10
    sigma_between: float = 1.0
    signal_scale: tuple = (0.8, 1.2)  # s[d] ~ Uniform(lo, hi)
    n_clusters: int = 1
    within_cluster_angle: float = 30.0  # degrees between a member and its cluster base
    between_cluster_cos: float = None  # pairwise cosine of cluster bases; None = random
    shared_weight: float = 0.0  # weight of one direction common to all clusters
    sigma_noise: float = 0.5
    n_distractor_features: int = 10
    n_drug_features: int = 0  # noisy copies of mu[d]; 0 = no drug matrix
    drug_feature_noise: float = 0.5
    n_drug_distractors: int = 0
    holdout_clusters: int = 0  # last clusters become the test drugs
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        for name in ("n_drugs", "n_cells", "latent_dim", "n_clusters"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        for name in ("sigma_between", "sigma_noise", "drug_feature_noise"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        lo, hi = self.signal_scale
        if lo < 0 or hi < lo:
            raise UsageError("signal_scale must satisfy 0 <= lo <= hi")
        if not 0 <= self.shared_weight <= 1:
            raise UsageError("shared_weight must lie in [0, 1]")
        if self.between_cluster_cos is not None and self.n_clusters > 1:
            if not -1.0 / (self.n_clusters - 1) <= self.between_cluster_cos <= 1:
                raise UsageError("between_cluster_cos below the simplex bound -1/(n_clusters-1)")
            if self.latent_dim < self.n_clusters + 2:
                raise UsageError("latent_dim must be >= n_clusters + 2 for controlled cluster angles")
        if self.holdout_clusters >= self.n_clusters and self.holdout_clusters > 0:
            raise UsageError("holdout_clusters must leave at least one training cluster")
        return self


PRESETS = {
    "dominance": dict(
        n_drugs=100, n_cells=300, latent_dim=10, sigma_between=10.0, signal_scale=(0.7, 0.9),
        n_clusters=1, within_cluster_angle=30.0, sigma_noise=0.6, n_distractor_features=10,
        n_drug_features=2, drug_feature_noise=0.5,
    ),
    "two-cluster": dict(
        n_drugs=100, n_cells=300, latent_dim=10, sigma_between=1.0, signal_scale=(0.8, 1.2),
        n_clusters=2, within_cluster_angle=40.0, between_cluster_cos=-0.5, sigma_noise=0.9,
        n_distractor_features=10,
    ),
    "no-analog": dict(
        n_drugs=100, n_cells=300, latent_dim=12, sigma_between=1.0, signal_scale=(0.8, 1.2),
        n_clusters=8, within_cluster_angle=15.0, between_cluster_cos=0.0, shared_weight=0.7,
        sigma_noise=1.2, n_distractor_features=10, holdout_clusters=2,
    ),
    "noisy-leakage": dict(
        n_drugs=60, n_cells=100, latent_dim=5, sigma_between=2.0, signal_scale=(0.8, 1.2),
        n_clusters=1, within_cluster_angle=20.0, sigma_noise=1.5, n_distractor_features=5,
        n_drug_features=1, drug_feature_noise=1.0, n_drug_distractors=30,
    ),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return SynthConfig(**kw)


@dataclass(eq=False)
class SynthDataset:
    response: ResponseTable
    cell_features: FeatureMatrix
    moa: MoaMap
    drug_features: FeatureMatrix = None
    ground_truth: dict = field(default_factory=dict)
    config: SynthConfig = None

    def aligned(self):
        return align(self.response, self.cell_features, self.drug_features, self.moa)

    @property
    def test_drugs(self):
        return tuple(self.ground_truth["test_drugs"])

    def split(self):
        """(train, test) response tables by the planted drug split."""
        test = set(self.test_drugs)
        return self.response.exclude(drugs=test), self.response.restrict(drugs=test)


def _unit(v):
    return v / np.linalg.norm(v)


def _cluster_bases(cfg, rng):
    L, k = cfg.latent_dim, cfg.n_clusters
    if cfg.between_cluster_cos is None:
        bases = np.array([_unit(rng.standard_normal(L)) for _ in range(k)])
        shared = _unit(rng.standard_normal(L))
    else:
        q, _ = np.linalg.qr(rng.standard_normal((L, k + 2)))
        e = q[:, :k].T
        common, shared = q[:, k], q[:, k + 1]
        if k == 1:
            bases = e
        else:
            rho = cfg.between_cluster_cos
            t2 = (rho * (k - 1) + 1) / k
            centred = e - e.mean(axis=0)
            centred /= np.linalg.norm(centred, axis=1, keepdims=True)
            bases = np.sqrt(1 - t2) * centred + np.sqrt(t2) * common
    if cfg.shared_weight > 0:
        s = cfg.shared_weight
        bases = np.array([_unit(np.sqrt(1 - s * s) * b + s * shared) for b in bases])
    return bases


def _jitter(base, angle_deg, rng):
    j = rng.standard_normal(base.size)
    j -= (j @ base) * base
    j = _unit(j)
    a = np.deg2rad(angle_deg)
    return np.cos(a) * base + np.sin(a) * j


def generate(config):
    """Draw a dataset from ``config``. Same config (incl. seed) gives identical output."""
    cfg = config.validate()
    seed = cfg.seed
    D, C, L = cfg.n_drugs, cfg.n_cells, cfg.latent_dim
    drugs = [f"D{i:04d}" for i in range(D)]
    cells = [f"C{j:05d}" for j in range(C)]
    cluster = np.arange(D) % cfg.n_clusters

    bases = _cluster_bases(cfg, derive_rng(seed, "bases"))
    rng_u = derive_rng(seed, "directions")
    u = np.array([_jitter(bases[cluster[i]], cfg.within_cluster_angle, rng_u) for i in range(D)])
    lo, hi = cfg.signal_scale
    s = derive_rng(seed, "scale").uniform(lo, hi, size=D)
    mu = derive_rng(seed, "means").normal(0.0, cfg.sigma_between, size=D)
    z = derive_rng(seed, "cells").standard_normal((C, L))
    noise = derive_rng(seed, "noise").normal(0.0, cfg.sigma_noise, size=(D, C))
    signal = s[:, None] * (u @ z.T)
    Y = mu[:, None] + signal + noise

    response = ResponseTable.from_matrix(drugs, cells, Y)
    distract = derive_rng(seed, "distractors").standard_normal((C, cfg.n_distractor_features))
    cell_fm = FeatureMatrix(
        tuple(cells),
        tuple([f"z{i + 1}" for i in range(L)] + [f"noise{i + 1}" for i in range(cfg.n_distractor_features)]),
        np.hstack([z, distract]),
        "cell",
    )
    drug_fm = None
    if cfg.n_drug_features > 0:
        rng_f = derive_rng(seed, "drug_features")
        info = mu[:, None] + rng_f.normal(0.0, cfg.drug_feature_noise, size=(D, cfg.n_drug_features))
        junk = rng_f.standard_normal((D, cfg.n_drug_distractors))
        drug_fm = FeatureMatrix(
            tuple(drugs),
            tuple([f"potency{i + 1}" for i in range(cfg.n_drug_features)] + [f"junk{i + 1}" for i in range(cfg.n_drug_distractors)]),
            np.hstack([info, junk]),
            "drug",
        )
    moa = MoaMap({d: f"cluster{cluster[i]}" for i, d in enumerate(drugs)})

    if cfg.holdout_clusters > 0:
        test = [d for i, d in enumerate(drugs) if cluster[i] >= cfg.n_clusters - cfg.holdout_clusters]
    else:
        n_test = max(1, int(round(cfg.test_fraction * D)))
        perm = derive_rng(seed, "test_split").permutation(D)
        test = sorted(drugs[i] for i in perm[:n_test])

    ceiling = s / np.sqrt(s**2 + cfg.sigma_noise**2) if cfg.sigma_noise > 0 else np.ones(D)
    truth = {
        "mu": dict(zip(drugs, mu.tolist())),
        "signal_scale": dict(zip(drugs, s.tolist())),
        "direction": {d: u[i].tolist() for i, d in enumerate(drugs)},
        "cluster": {d: int(cluster[i]) for i, d in enumerate(drugs)},
        "cluster_bases": bases.tolist(),
        "latent": {c: z[j].tolist() for j, c in enumerate(cells)},
        "sigma_noise": cfg.sigma_noise,
        "ceiling": dict(zip(drugs, ceiling.tolist())),
        "test_drugs": test,
        "config": dataclasses.asdict(cfg),
    }
    return SynthDataset(response, cell_fm, moa, drug_fm, truth, cfg)


def true_signal(ds):
    """Noise-free responses mu[d] + s[d] u[d].z[c] as a ResponseTable."""
    gt = ds.ground_truth
    drugs = sorted(gt["mu"])
    cells = sorted(gt["latent"])
    u = np.array([gt["direction"][d] for d in drugs])
    z = np.array([gt["latent"][c] for c in cells])
    mu = np.array([gt["mu"][d] for d in drugs])
    s = np.array([gt["signal_scale"][d] for d in drugs])
    return ResponseTable.from_matrix(drugs, cells, mu[:, None] + s[:, None] * (u @ z.T))


def simulated_ceiling(ds, n_cells=20000, seed=0):
    """Per-drug r between signal and noisy response on fresh latent cells."""
    gt = ds.ground_truth
    rng = derive_rng(seed, "ceiling")
    L = len(next(iter(gt["latent"].values())))
    z = rng.standard_normal((n_cells, L))
    out = {}
    for d in sorted(gt["mu"]):
        sig = gt["signal_scale"][d] * (z @ np.array(gt["direction"][d]))
        y = sig + rng.normal(0.0, gt["sigma_noise"], size=n_cells)
        out[d] = float(np.corrcoef(sig, y)[0, 1])
    return out


def ground_truth_json(ds):
    return json.dumps(ds.ground_truth, sort_keys=True, indent=1)

