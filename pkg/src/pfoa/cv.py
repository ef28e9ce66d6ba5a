"""Subject-wise stratified cross-validation, out-of-fold predictions and the stacked second layer."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as attn
from .errors import ValidationError
from .gbm import FeatureMatrix, GbmConfig, fit_gbm
from .io import sha256_json
from .metrics import auc as _auc

log = logging.getLogger(__name__)

GBM_FEATURES = {
    "gbm1": ("age", "sex", "bmi"),
    "gbm2": ("age", "sex", "bmi", "womac"),
    "gbm3": ("age", "sex", "bmi", "womac", "kl"),
}
MODEL_NAMES = (*GBM_FEATURES, "cnn", "cnn-attn")
STACK_FEATURES = ("pred_clinical", "pred_cnn")


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldAssignment:
    fold_of_subject: dict
    k: int
    seed: int = 0

    def knee_folds(self, subject_ids):
        try:
            return np.array([self.fold_of_subject[s] for s in subject_ids], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"subject {exc.args[0]!r} has no fold") from None

    def digest(self):
        return sha256_json({"k": self.k, "folds": sorted(self.fold_of_subject.items())})

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "fold_of_subject": dict(sorted(self.fold_of_subject.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls({str(s): int(f) for s, f in d["fold_of_subject"].items()}, int(d["k"]), int(d.get("seed", 0)))


def make_folds(subject_ids, labels, k=5, seed=0):
    """Greedy subject-level stratification.

    Subjects are shuffled by ``seed`` and visited in decreasing order of
    positive-knee count; each goes to the fold with the fewest positives so
    far (ties: fewest knees, then lowest index).  Subjects without
    positives fill the folds with the fewest knees.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    subject_ids = list(subject_ids)
    y = np.asarray(labels).astype(int)
    if len(y) != len(subject_ids):
        raise ValidationError(f"{len(subject_ids)} subjects ids but {len(y)} labels")
    subjects = list(dict.fromkeys(subject_ids))
    pos = dict.fromkeys(subjects, 0)
    knees = dict.fromkeys(subjects, 0)
    for s, lab in zip(subject_ids, y):
        pos[s] += int(lab)
        knees[s] += 1
    n_pos_subjects = sum(1 for s in subjects if pos[s] > 0)
    if n_pos_subjects < k:
        raise ValidationError(f"only {n_pos_subjects} subjects with a positive knee; need at least k={k}")

    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    order.sort(key=lambda s: (-pos[s], -knees[s]))  # stable: shuffled within groups
    fold_pos = np.zeros(k, dtype=int)
    fold_knees = np.zeros(k, dtype=int)
    out = {}
    for s in order:
        if pos[s] > 0:
            f = min(range(k), key=lambda j: (fold_pos[j], fold_knees[j], j))
        else:
            f = min(range(k), key=lambda j: (fold_knees[j] - fold_pos[j], fold_knees[j], j))
        out[s] = f
        fold_pos[f] += pos[s]
        fold_knees[f] += knees[s]
    return FoldAssignment(out, k, seed)


def fold_prevalence(folds: FoldAssignment, subject_ids, labels):
    kf = folds.knee_folds(subject_ids)
    y = np.asarray(labels)
    return np.array([y[kf == f].mean() if np.any(kf == f) else np.nan for f in range(folds.k)])


# ---------------------------------------------------------------------------
# data and model specs


@dataclass
class CvData:
    """Per-knee inputs shared by every model in a cross-validation run."""

    knee_ids: list
    subject_ids: list
    labels: np.ndarray
    clinical: FeatureMatrix = None
    images: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(int)
        n = len(self.labels)
        if len(self.knee_ids) != n or len(self.subject_ids) != n:
            raise ValidationError("knee ids, subject ids and labels differ in length")
        if len(set(self.knee_ids)) != n:
            raise ValidationError("knee ids must be unique")
        if self.clinical is not None and len(self.clinical) != n:
            raise ValidationError("clinical matrix row count differs from label count")
        if self.images is not None and len(self.images) != n:
            raise ValidationError("image count differs from label count")


@dataclass
class ModelSpec:
    name: str
    kind: str  # "gbm" or "cnn"
    features: tuple = ()
    with_attention: bool = False
    gbm: GbmConfig = field(default_factory=GbmConfig)
    backbone: attn.BackboneConfig = field(default_factory=attn.BackboneConfig.desk)
    train: attn.TrainConfig = field(default_factory=attn.TrainConfig)


def model_spec(name, gbm=None, backbone=None, train=None):
    if name in GBM_FEATURES:
        return ModelSpec(name, "gbm", GBM_FEATURES[name], gbm=gbm or GbmConfig())
    if name in ("cnn", "cnn-attn"):
        return ModelSpec(
            name,
            "cnn",
            with_attention=name == "cnn-attn",
            backbone=backbone or attn.BackboneConfig.desk(),
            train=train or attn.TrainConfig(),
        )
    raise ValidationError(f"unknown model {name!r}; valid names: {', '.join(MODEL_NAMES)}")


@dataclass
class CvResult:
    name: str
    probabilities: np.ndarray
    folds: np.ndarray
    fold_metrics: list
    train_subjects: list  # per fold, sorted subject ids used for training
    models: list = field(default_factory=list)


def _fit_predict(spec, data, train_idx, test_idx, fold):
    if spec.kind == "gbm":
        if data.clinical is None:
            raise ValidationError("clinical features are required for GBM models")
        cols = [data.clinical.columns.index(f) for f in spec.features]
        X = data.clinical.values[:, cols]
        model = fit_gbm(FeatureMatrix(X[train_idx], spec.features), data.labels[train_idx], spec.gbm)
        return model, model.predict_proba(FeatureMatrix(X[test_idx], spec.features))
    if data.images is None:
        raise ValidationError("ROI images are required for CNN models")
    tcfg = replace(spec.train, seed=spec.train.seed + fold)
    model = attn.train_model(
        data.images[train_idx], data.labels[train_idx], spec.backbone, tcfg, with_attention=spec.with_attention
    )
    return model, attn.predict_proba(model, data.images[test_idx])


def run_cv(spec: ModelSpec, data: CvData, folds: FoldAssignment, keep_models=False):
    """Train one model per fold on the other folds and assemble out-of-fold probabilities."""
    kf = folds.knee_folds(data.subject_ids)
    probs = np.full(len(data.labels), np.nan)
    metrics, train_subjects, models = [], [], []
    for f in range(folds.k):
        test_idx = np.nonzero(kf == f)[0]
        train_idx = np.nonzero(kf != f)[0]
        if len(test_idx) == 0:
            raise ValidationError(f"fold {f} is empty")
        if len(np.unique(data.labels[train_idx])) < 2:
            raise ValidationError(f"training portion for fold {f} has a single class")
        model, p = _fit_predict(spec, data, train_idx, test_idx, f)
        probs[test_idx] = p
        y = data.labels[test_idx]
        row = {"fold": f, "n": int(len(test_idx)), "n_pos": int(y.sum())}
        row["auc"] = _auc(p, y) if 0 < y.sum() < len(y) else float("nan")
        metrics.append(row)
        train_subjects.append(sorted({data.subject_ids[i] for i in train_idx}))
        if keep_models:
            models.append(model)
        log.info("%s fold %d: n=%d auc=%.4f", spec.name, f, row["n"], row["auc"])
    return CvResult(spec.name, probs, kf, metrics, train_subjects, models)


def audit_no_leakage(result: CvResult, subject_ids):
    """True when no knee's prediction came from a model trained on its own subject."""
    for f, subjects in enumerate(result.train_subjects):
        seen = set(subjects)
        for i in np.nonzero(result.folds == f)[0]:
            if subject_ids[i] in seen:
                return False
    return not np.any(np.isnan(result.probabilities))


# ---------------------------------------------------------------------------
# stacking


def stack_second_layer(preds_clinical, preds_cnn, labels, knee_folds, cfg=None, fusion="gbm"):
    """Out-of-fold stacked probabilities from two out-of-fold base columns.

    For fold ``f`` the second-layer model is fit on the base predictions of
    every other fold and applied to fold ``f``.  ``fusion="mean"`` averages
    the two columns instead (baseline).
    """
    a = np.asarray(preds_clinical, dtype=np.float64)
    b = np.asarray(preds_cnn, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    kf = np.asarray(knee_folds).astype(int)
    if not (a.shape == b.shape == y.shape == kf.shape) or a.ndim != 1:
        raise ValidationError("prediction columns, labels and folds must have equal length")
    if np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)):
        raise ValidationError("prediction columns are incomplete (missing or non-finite values)")
    if fusion == "mean":
        return 0.5 * (a + b)
    if fusion != "gbm":
        raise ValidationError(f"fusion must be 'gbm' or 'mean', got {fusion!r}")
    cfg = cfg or GbmConfig(max_leaves=4)
    X = np.column_stack([a, b])
    out = np.full(len(y), np.nan)
    for f in np.unique(kf):
        test = kf == f
        train = ~test
        if len(np.unique(y[train])) < 2:
            raise ValidationError(f"training portion for fold {f} has a single class")
        model = fit_gbm(FeatureMatrix(X[train], STACK_FEATURES), y[train], cfg)
        out[test] = model.predict_proba(FeatureMatrix(X[test], STACK_FEATURES))
    return out


# ---------------------------------------------------------------------------
# prediction tables


PREDICTION_FIELDS = ("knee_id", "fold", "model", "probability", "label")


@dataclass
class PredictionTable:
    knee_ids: list
    folds: np.ndarray
    labels: np.ndarray
    columns: dict = field(default_factory=dict)

    def add(self, model, probabilities):
        p = np.asarray(probabilities, dtype=np.float64)
        if p.shape != (len(self.knee_ids),):
            raise ValidationError(f"column {model!r} has {p.shape} values for {len(self.knee_ids)} knees")
        self.columns[model] = p

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PREDICTION_FIELDS)
            for model, p in self.columns.items():
                for kid, f, prob, lab in zip(self.knee_ids, self.folds, p, self.labels):
                    w.writerow([kid, int(f), model, repr(float(prob)), int(lab)])

    @classmethod
    def read_csv(cls, path):
        """Read a long-format table; every model must cover the same knees."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in PREDICTION_FIELDS if c not in (reader.fieldnames or ())]
            if missing:
                raise ValidationError(f"{path}: missing column(s) {missing}")
            rows = list(reader)
        if not rows:
            raise ValidationError(f"{path}: no prediction rows")
        by_model = {}
        for r in rows:
            by_model.setdefault(r["model"], []).append(r)
        first = next(iter(by_model.values()))
        knee_ids = [r["knee_id"] for r in first]
        table = cls(knee_ids, np.array([int(r["fold"]) for r in first]), np.array([int(r["label"]) for r in first]))
        for model, rs in by_model.items():
            ids = [r["knee_id"] for r in rs]
            if ids != knee_ids:
                raise ValidationError(f"{path}: model {model!r} covers different knees")
            table.add(model, [float(r["probability"]) for r in rs])
        return table
