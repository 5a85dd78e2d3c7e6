"""Evaluation toolkit for drug-blind drug-response prediction.

Global vs per-drug Pearson r, the between/within covariance decomposition,
ridge baselines under drug-blind folds, MoA-aware training, K-shot profile
matching, a checkpoint-leakage audit and a synthetic data generator.
"""

__version__ = "0.1.0"
