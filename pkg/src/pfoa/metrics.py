"""Discrimination and calibration metrics and DeLong's test for correlated AUCs.

Ties are handled by midranks (AUC, DeLong) and by grouping equal scores
into one threshold (ROC/PR curves, AP).
"""

from __future__ import annotations

import math
from statistics import NormalDist
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, ValidationError

Z975 = 1.959963984540054


def _scored(scores, labels, need_both=True):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValidationError(f"scores and labels must be 1-D of equal length, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    y = y.astype(bool)
    if need_both and (y.all() or not y.any()):
        raise MetricError("both classes must be present")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    return s, y


def midrank(x):
    """1-based ranks with ties replaced by their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j < n and xs[j] == xs[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n)
    out[order] = ranks
    return out


def auc(scores, labels):
    """Mann-Whitney AUC: P(s+ > s-) + 0.5 P(s+ = s-)."""
    s, y = _scored(scores, labels)
    m, n = int(y.sum()), int((~y).sum())
    r = midrank(s)
    return float((r[y].sum() - m * (m + 1) / 2.0) / (m * n))


def _grouped_counts(s, y):
    """Cumulative (TP, FP) at each distinct threshold, scores descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    return s_sorted[last], tp.astype(float), fp.astype(float)


def roc_points(scores, labels):
    """``(fpr, tpr, thresholds)``; descending thresholds, anchored at (0, 0) and (1, 1)."""
    s, y = _scored(scores, labels)
    thr, tp, fp = _grouped_counts(s, y)
    fpr = np.r_[0.0, fp / (~y).sum()]
    tpr = np.r_[0.0, tp / y.sum()]
    return fpr, tpr, np.r_[np.inf, thr]


def trapezoid_auc(fpr, tpr):
    fpr, tpr = np.asarray(fpr, float), np.asarray(tpr, float)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def pr_points(scores, labels):
    """``(recall, precision, thresholds)`` at each distinct score, descending."""
    s, y = _scored(scores, labels, need_both=False)
    if not y.any():
        raise MetricError("precision-recall needs at least one positive")
    thr, tp, fp = _grouped_counts(s, y)
    return tp / y.sum(), tp / (tp + fp), thr


def average_precision(scores, labels):
    """Step-wise AP: sum_k (R_k - R_{k-1}) P_k, no interpolation."""
    recall, precision, _ = pr_points(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def brier(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValidationError("probabilities and labels must be 1-D of equal length")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValidationError("Brier score needs probabilities in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    return float(np.mean((p - y) ** 2))


# ---------------------------------------------------------------------------
# DeLong


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    covariance: np.ndarray
    z: float
    p_value: float

    @property
    def auc_diff(self):
        return self.auc_a - self.auc_b

    @property
    def se_diff(self):
        c = self.covariance
        return math.sqrt(max(c[0, 0] + c[1, 1] - 2 * c[0, 1], 0.0))

    def diff_ci(self, level=0.95):
        z = _normal_quantile(0.5 + level / 2)
        return self.auc_diff - z * self.se_diff, self.auc_diff + z * self.se_diff

    def as_dict(self):
        lo, hi = self.diff_ci()
        return {
            "auc_a": self.auc_a,
            "auc_b": self.auc_b,
            "auc_diff": self.auc_diff,
            "auc_diff_ci": [lo, hi],
            "covariance": self.covariance.tolist(),
            "z": self.z,
            "p_value": self.p_value,
        }


def structural_components(scores, labels):
    """DeLong placements: ``(auc, v10, v01)``.

    ``v10[i]`` is the fraction of negatives a positive outscores (ties count
    half); ``v01[j]`` the fraction of positives that outscore negative ``j``.
    """
    s, y = _scored(scores, labels)
    pos, neg = s[y], s[~y]
    m, n = len(pos), len(neg)
    r_all = midrank(np.r_[pos, neg])
    r_pos = midrank(pos)
    r_neg = midrank(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return float(v10.mean()), v10, v01


def _norm_sf2(z):
    # two-sided normal tail probability
    return math.erfc(abs(z) / math.sqrt(2.0))


def _normal_quantile(p):
    return NormalDist().inv_cdf(p)


def delong_covariance(score_sets, labels):
    """AUCs and their DeLong covariance matrix for K score vectors on the same labels."""
    comps = [structural_components(s, labels) for s in score_sets]
    aucs = np.array([c[0] for c in comps])
    v10 = np.vstack([c[1] for c in comps])
    v01 = np.vstack([c[2] for c in comps])
    m, n = v10.shape[1], v01.shape[1]
    s10 = np.atleast_2d(np.cov(v10)) if m > 1 else np.zeros((len(comps), len(comps)))
    s01 = np.atleast_2d(np.cov(v01)) if n > 1 else np.zeros((len(comps), len(comps)))
    return aucs, s10 / m + s01 / n


def delong_variance(scores, labels):
    aucs, cov = delong_covariance([scores], labels)
    return float(aucs[0]), float(cov[0, 0])


def delong_test(scores_a, scores_b, labels):
    """Two-sided test of AUC_a == AUC_b for paired predictions."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels)
    if not (a.shape == b.shape == y.shape):
        raise ValidationError(f"length mismatch: {a.shape}, {b.shape}, {y.shape}")
    aucs, cov = delong_covariance([a, b], y)
    cov = 0.5 * (cov + cov.T)
    diff = aucs[0] - aucs[1]
    var = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    if var <= 1e-15 * max(cov[0, 0] + cov[1, 1], 1e-300):
        if diff == 0:
            z, p = 0.0, 1.0
        else:
            z, p = math.copysign(math.inf, diff), 0.0
    else:
        z = diff / math.sqrt(var)
        p = _norm_sf2(z)
    return DeLongResult(float(aucs[0]), float(aucs[1]), cov, float(z), float(min(max(p, 0.0), 1.0)))


def delong_ci(scores, labels, level=0.95):
    """AUC +- z * DeLong standard error, clipped to [0, 1]."""
    a, var = delong_variance(scores, labels)
    z = Z975 if level == 0.95 else _normal_quantile(0.5 + level / 2)
    half = z * math.sqrt(max(var, 0.0))
    return max(0.0, a - half), min(1.0, a + half)


def fold_ci(values, z=Z975):
    """Per-fold mean +- z * std (population std across folds)."""
    v = np.asarray(values, dtype=np.float64)
    mu, sd = float(v.mean()), float(v.std())
    return mu - z * sd, mu + z * sd


def report(probs, labels, folds=None):
    """Table-style summary: AUC with DeLong CI, AP, Brier, class counts.

    When ``folds`` is given, per-fold mean +- 1.96 std intervals for AUC and
    AP are added under ``auc_fold_ci`` and ``ap_fold_ci``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    out = {
        "auc": auc(p, y),
        "auc_ci": list(delong_ci(p, y)),
        "ap": average_precision(p, y),
        "brier": brier(p, y),
        "n_pos": int(y.sum()),
        "n_neg": int((1 - y).sum()),
    }
    if folds is not None:
        folds = np.asarray(folds)
        per_auc, per_ap = [], []
        for f in np.unique(folds):
            sel = folds == f
            if 0 < y[sel].sum() < sel.sum():
                per_auc.append(auc(p[sel], y[sel]))
                per_ap.append(average_precision(p[sel], y[sel]))
        if len(per_auc) >= 2:
            out["auc_fold_ci"] = list(fold_ci(per_auc))
            out["ap_fold_ci"] = list(fold_ci(per_ap))
            out["ap_ci"] = out["ap_fold_ci"]
    return out
