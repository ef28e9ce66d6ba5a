"""Shared synthetic scenarios for the cross-validation and acceptance suites."""

import os

import numpy as np

from pfoa import cli, cv, gbm, roi, synth
from pfoa.data import CLINICAL_FEATURES, clinical_matrix
from pfoa.gbm import FeatureMatrix


def complementary_signals(n_subjects=1000, seed=0, noise=0.6):
    """Knees whose label comes from either an image-only or a clinical-only factor.

    Returns ``(subject_ids, labels, pred_clinical, pred_cnn)``.  Each base
    prediction is a noisy logistic read-out of its own factor, so each sees
    about half of the positives and the two are complementary.
    """
    rng = np.random.default_rng(seed)
    n = 2 * n_subjects
    subjects = [f"S{i:05d}" for i in np.repeat(np.arange(n_subjects), 2)]
    a = rng.standard_normal(n)  # image factor
    b = rng.standard_normal(n)  # clinical factor
    t = 1.55  # each factor alone flags ~6% of knees
    labels = ((a > t) | (b > t)).astype(int)
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))  # noqa: E731
    pred_cnn = sig(2.5 * (a - t) + noise * rng.standard_normal(n))
    pred_clinical = sig(2.5 * (b - t) + noise * rng.standard_normal(n))
    return subjects, labels, pred_clinical, pred_cnn


def cohort_cv_data(n_subjects=500, seed=0, **kw):
    recs = synth.generate_cohort(synth.SynthConfig(n_subjects=n_subjects, seed=seed, **kw))
    return cv.CvData(
        knee_ids=[r.knee_id for r in recs],
        subject_ids=[r.subject_id for r in recs],
        labels=np.array([r.label for r in recs]),
        clinical=FeatureMatrix(clinical_matrix(recs), CLINICAL_FEATURES),
    )


def xor_data(n=400, seed=0):
    """Two binary features; the label is their XOR, so neither feature alone is informative."""
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, (n, 2)).astype(float)
    y = (X[:, 0] != X[:, 1]).astype(int)
    return X, y


def small_model(seed, n_features=4, n_trees=15):
    """A GBM on data with a main effect, an interaction and 5% missing values."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((300, n_features))
    X[rng.random(X.shape) < 0.05] = np.nan
    logit = X[:, 0] - 0.8 * np.nan_to_num(X[:, 1]) * np.nan_to_num(X[:, 2]) + 0.3 * rng.standard_normal(300)
    y = (np.nan_to_num(logit) > 0).astype(int)
    cfg = gbm.GbmConfig(n_trees=n_trees, learning_rate=0.3, max_leaves=6, min_samples_leaf=10)
    return gbm.fit_gbm(X, y, cfg), X


def ellipse_landmarks(rng, n=10):
    """Landmarks on a randomly sized, placed and tilted patella-like ellipse."""
    cx, cy = rng.uniform(60, 140, 2)
    b = rng.uniform(15, 50)
    a = b * rng.uniform(0.3, 0.7)
    t = np.pi / 2 + 2 * np.pi * np.arange(n) / n
    pts = np.stack([cx + a * np.cos(t), cy + b * np.sin(t)], axis=1)
    return roi.rotate_points(pts, rng.uniform(-20, 20), np.array([cx, cy]))


TINY_CONFIG = """\
# small enough that the whole workflow runs in a few seconds
n_subjects = 40
image_size = 128
target_prevalence = 0.25
preprocess.margin_px = 10
preprocess.resize_to = 40
preprocess.crop_to = 32
backbone.block_channels = 4, 8, 8
backbone.convs_per_block = 1, 1, 1
backbone.input_size = 32
backbone.attention_taps = 1
train.epochs = 2
train.batch_size = 16
train.lr0 = 0.01
gbm.n_trees = 20
"""

WORKFLOW = [
    ["synth", "--seed", "3"],
    ["preprocess"],
    ["train", "--model", "gbm3", "--folds", "3", "--seed", "1"],
    ["train", "--model", "cnn"],
    ["train", "--model", "cnn-attn"],
    ["stack"],
    ["eval"],
    ["explain"],
]


def run_workflow(run):
    """Run every command of the tiny workflow into ``run``; returns the config path."""
    os.makedirs(run, exist_ok=True)
    cfg = os.path.join(run, "tiny.cfg")
    with open(cfg, "w") as fh:
        fh.write(TINY_CONFIG)
    for step in WORKFLOW:
        code = cli.main([step[0], "--out", run, "--config", cfg, *step[1:]])
        assert code == 0, step
    return cfg
