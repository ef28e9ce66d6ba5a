"""Histogram gradient boosting for binary classification, with exact Shapley values.

Trees are grown best-first on the logistic loss: per iteration the
gradients ``g = p - y`` and hessians ``h = p (1 - p)`` are accumulated into
per-feature histograms over quantile bins, and the leaf with the largest
split gain

    gain = 1/2 [GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)]

is split next until ``max_leaves`` is reached or no split has positive gain.
Missing values (NaN) get their own bin and the split search tries sending
them either way.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, SchemaError, ValidationError

MAX_EXACT_FEATURES = 12


@dataclass
class GbmConfig:
    n_trees: int = 200
    learning_rate: float = 0.05
    max_leaves: int = 15
    min_samples_leaf: int = 20
    n_bins: int = 64
    lambda_l2: float = 1.0
    seed: int = 0
    growth: str = "leafwise"
    max_depth: int = 0  # 0 = unlimited (leafwise) / 4 (depthwise)

    def __post_init__(self):
        if self.n_trees < 0:
            raise ConfigError("n_trees must be >= 0", "n_trees")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", "learning_rate")
        if self.max_leaves < 2:
            raise ConfigError("max_leaves must be >= 2", "max_leaves")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1", "min_samples_leaf")
        if not 2 <= self.n_bins <= 65535:
            raise ConfigError("n_bins must be in [2, 65535]", "n_bins")
        if self.lambda_l2 < 0:
            raise ConfigError("lambda_l2 must be >= 0", "lambda_l2")
        if self.growth not in ("leafwise", "depthwise"):
            raise ConfigError("growth must be 'leafwise' or 'depthwise'", "growth")


@dataclass
class FeatureMatrix:
    """Named feature columns; NaN marks a missing value."""

    values: np.ndarray
    columns: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.columns = tuple(self.columns)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValidationError(f"{self.values.shape} values for {len(self.columns)} columns")
        if len(set(self.columns)) != len(self.columns):
            raise ValidationError("column names must be unique")

    def __len__(self):
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# binning


def bin_edges(values, n_bins):
    """Upper bin edges from non-missing training values.

    With at most ``n_bins`` distinct values each value gets its own bin, so
    bin splits reproduce every exact threshold.
    """
    v = values[~np.isnan(values)]
    if v.size == 0:
        return np.array([0.0])
    uniq = np.unique(v)
    if len(uniq) <= n_bins:
        return uniq
    qs = np.quantile(v, np.linspace(0, 1, n_bins + 1)[1:-1], method="linear")
    edges = np.unique(np.r_[qs, uniq[-1]])
    return edges


def apply_bins(values, edges):
    """Bin index per value; missing values map to ``len(edges)``."""
    b = np.searchsorted(edges, values, side="left")
    b = np.minimum(b, len(edges) - 1)
    b[np.isnan(values)] = len(edges)
    return b.astype(np.int32)


# ---------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    feature: list = field(default_factory=list)  # -1 for leaves
    threshold: list = field(default_factory=list)  # go left if x <= threshold
    missing_left: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)
    bin_threshold: list = field(default_factory=list)

    def add_leaf(self, value=0.0):
        self.feature.append(-1)
        self.threshold.append(math.nan)
        self.missing_left.append(False)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        self.bin_threshold.append(-1)
        return len(self.feature) - 1

    @property
    def n_leaves(self):
        return sum(1 for f in self.feature if f < 0)

    def arrays(self):
        return (
            np.asarray(self.feature, dtype=np.int64),
            np.asarray(self.threshold, dtype=np.float64),
            np.asarray(self.missing_left, dtype=bool),
            np.asarray(self.left, dtype=np.int64),
            np.asarray(self.right, dtype=np.int64),
            np.asarray(self.value, dtype=np.float64),
        )

    def apply(self, X):
        """Leaf node index reached by each row."""
        feat, thr, mleft, left, right, _ = self.arrays()
        node = np.zeros(len(X), dtype=np.int64)
        active = np.nonzero(feat[node] >= 0)[0]
        while active.size:
            nd = node[active]
            x = X[active, feat[nd]]
            go_left = np.where(np.isnan(x), mleft[nd], x <= thr[nd])
            node[active] = np.where(go_left, left[nd], right[nd])
            active = active[feat[node[active]] >= 0]
        return node

    def predict(self, X):
        return np.asarray(self.value)[self.apply(X)]

    def to_dict(self):
        return {
            "feature": list(map(int, self.feature)),
            "threshold": [None if math.isnan(t) else float(t) for t in self.threshold],
            "missing_left": list(map(bool, self.missing_left)),
            "left": list(map(int, self.left)),
            "right": list(map(int, self.right)),
            "value": list(map(float, self.value)),
        }

    @classmethod
    def from_dict(cls, d):
        t = cls()
        t.feature = list(d["feature"])
        t.threshold = [math.nan if v is None else float(v) for v in d["threshold"]]
        t.missing_left = list(d["missing_left"])
        t.left = list(d["left"])
        t.right = list(d["right"])
        t.value = list(d["value"])
        t.bin_threshold = [-1] * len(t.feature)
        return t


@dataclass
class GbmModel:
    base_score: float
    trees: list
    features: tuple
    config: GbmConfig = field(default_factory=GbmConfig)
    train_loss: list = field(default_factory=list)

    def _matrix(self, X):
        if isinstance(X, FeatureMatrix):
            unknown = [c for c in X.columns if c not in self.features]
            if unknown:
                raise SchemaError(f"unknown feature column(s) {unknown}; model expects {list(self.features)}")
            missing = [c for c in self.features if c not in X.columns]
            if missing:
                raise SchemaError(f"missing feature column(s) {missing}")
            order = [X.columns.index(c) for c in self.features]
            return X.values[:, order]
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.features):
            raise SchemaError(f"expected {len(self.features)} feature columns, got {X.shape[1]}")
        return X

    def predict_margin(self, X, n_trees=None):
        X = self._matrix(X)
        out = np.full(len(X), self.base_score)
        for tree in self.trees[: len(self.trees) if n_trees is None else n_trees]:
            out += tree.predict(X)
        return out

    def predict_proba(self, X):
        return _sigmoid(self.predict_margin(X))

    def to_json(self):
        return json.dumps(
            {
                "format": "pfoa-gbm/1",
                "base_score": self.base_score,
                "features": list(self.features),
                "config": asdict(self.config),
                "trees": [t.to_dict() for t in self.trees],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            base_score=float(d["base_score"]),
            trees=[Tree.from_dict(t) for t in d["trees"]],
            features=tuple(d["features"]),
            config=GbmConfig(**d["config"]),
        )


def predict_margin(model, X):
    return model.predict_margin(X)


def predict_proba(model, X):
    return model.predict_proba(X)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logistic_loss(margin, y):
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


# ---------------------------------------------------------------------------
# split search


@dataclass
class Split:
    gain: float
    feature: int
    bin: int
    missing_left: bool


def best_split(bins, n_edges, g, h, rows, cfg):
    """Best histogram split for the node holding ``rows`` (or ``None``)."""
    lam, msl = cfg.lambda_l2, cfg.min_samples_leaf
    G, H, C = g[rows].sum(), h[rows].sum(), len(rows)
    parent = G * G / (H + lam)
    best = None
    for f in range(bins.shape[1]):
        nb = n_edges[f]
        b = bins[rows, f]
        hg = np.bincount(b, weights=g[rows], minlength=nb + 1)
        hh = np.bincount(b, weights=h[rows], minlength=nb + 1)
        hc = np.bincount(b, minlength=nb + 1)
        gm, hm, cm = hg[nb], hh[nb], hc[nb]
        cg, ch, cc = np.cumsum(hg[:nb]), np.cumsum(hh[:nb]), np.cumsum(hc[:nb])
        # candidate thresholds: bins 0..nb-2 (the last bin holds everything non-missing)
        for miss_left in (True, False):
            if miss_left:
                gl, hl, cl = cg[: nb - 1] + gm, ch[: nb - 1] + hm, cc[: nb - 1] + cm
            else:
                gl, hl, cl = cg[: nb - 1], ch[: nb - 1], cc[: nb - 1]
            if cm > 0 and not miss_left:
                # all non-missing left, missing right
                gl = np.r_[gl, cg[nb - 1]]
                hl = np.r_[hl, ch[nb - 1]]
                cl = np.r_[cl, cc[nb - 1]]
            if gl.size == 0:
                continue
            gr, hr, cr = G - gl, H - hl, C - cl
            ok = (cl >= msl) & (cr >= msl)
            if not ok.any():
                continue
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
            gain = np.where(ok, gain, -np.inf)
            k = int(np.argmax(gain))
            if best is None or gain[k] > best.gain:
                best = Split(float(gain[k]), f, k, miss_left)
    return best


def _grow_tree(bins, edges, g, h, cfg):
    n_edges = [len(e) for e in edges]
    tree = Tree()
    lam, lr = cfg.lambda_l2, cfg.learning_rate

    def leaf_value(rows):
        return -lr * g[rows].sum() / (h[rows].sum() + lam)

    root_rows = np.arange(len(g))
    tree.add_leaf(leaf_value(root_rows))
    members = {0: root_rows}
    depth = {0: 0}
    max_depth = cfg.max_depth or (4 if cfg.growth == "depthwise" else 0)
    counter = 0
    heap = []

    def consider(node):
        nonlocal counter
        if max_depth and depth[node] >= max_depth:
            return
        rows = members[node]
        if len(rows) < 2 * cfg.min_samples_leaf:
            return
        s = best_split(bins, n_edges, g, h, rows, cfg)
        if s is not None and s.gain > 0:
            key = (depth[node], counter) if cfg.growth == "depthwise" else (-s.gain, counter)
            heapq.heappush(heap, (key, node, s))
            counter += 1

    consider(0)
    n_leaves = 1
    while heap and n_leaves < cfg.max_leaves:
        _, node, s = heapq.heappop(heap)
        rows = members.pop(node)
        f = s.feature
        b = bins[rows, f]
        missing = b == n_edges[f]
        go_left = np.where(missing, s.missing_left, b <= s.bin)
        lrows, rrows = rows[go_left], rows[~go_left]
        li = tree.add_leaf(leaf_value(lrows))
        ri = tree.add_leaf(leaf_value(rrows))
        tree.feature[node] = f
        tree.bin_threshold[node] = s.bin
        tree.threshold[node] = float(edges[f][s.bin]) if s.bin < n_edges[f] else math.inf
        tree.missing_left[node] = bool(s.missing_left)
        tree.left[node], tree.right[node] = li, ri
        tree.value[node] = 0.0
        members[li], members[ri] = lrows, rrows
        depth[li] = depth[ri] = depth[node] + 1
        n_leaves += 1
        consider(li)
        consider(ri)
    return tree


def _tree_apply_binned(tree, bins, n_edges):
    feat = np.asarray(tree.feature)
    bthr = np.asarray(tree.bin_threshold)
    mleft = np.asarray(tree.missing_left)
    left, right = np.asarray(tree.left), np.asarray(tree.right)
    nmiss = np.asarray(n_edges)
    node = np.zeros(len(bins), dtype=np.int64)
    active = np.nonzero(feat[node] >= 0)[0]
    while active.size:
        nd = node[active]
        f = feat[nd]
        b = bins[active, f]
        go_left = np.where(b == nmiss[f], mleft[nd], b <= bthr[nd])
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[feat[node[active]] >= 0]
    return np.asarray(tree.value)[node]


def fit_gbm(X, y, cfg: GbmConfig = None, features=None):
    """Fit a boosted ensemble on ``X`` (array or :class:`FeatureMatrix`) and 0/1 labels ``y``."""
    cfg = cfg or GbmConfig()
    if isinstance(X, FeatureMatrix):
        features = X.columns
        X = X.values
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"X must be 2-D, got shape {X.shape}")
    features = tuple(features) if features is not None else tuple(f"f{i}" for i in range(X.shape[1]))
    if len(features) != X.shape[1]:
        raise ValidationError("feature names do not match the number of columns")
    y = np.asarray(y)
    if y.shape != (len(X),):
        raise ValidationError(f"{len(X)} rows but {y.shape} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    y = y.astype(np.float64)
    pbar = y.mean()
    if pbar in (0.0, 1.0):
        raise ValidationError("both classes must be present to fit a classifier")
    if len(X) < 2 * cfg.min_samples_leaf:
        raise ValidationError(f"need at least {2 * cfg.min_samples_leaf} rows (2 * min_samples_leaf), got {len(X)}")

    edges = [bin_edges(X[:, j], cfg.n_bins) for j in range(X.shape[1])]
    bins = np.column_stack([apply_bins(X[:, j], edges[j]) for j in range(X.shape[1])])
    n_edges = [len(e) for e in edges]

    base = math.log(pbar / (1.0 - pbar))
    margin = np.full(len(X), base)
    trees, losses = [], [logistic_loss(margin, y)]
    for _ in range(cfg.n_trees):
        p = _sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = _grow_tree(bins, edges, g, h, cfg)
        margin = margin + _tree_apply_binned(tree, bins, n_edges)
        trees.append(tree)
        losses.append(logistic_loss(margin, y))
    return GbmModel(base_score=base, trees=trees, features=features, config=cfg, train_loss=losses)


# ---------------------------------------------------------------------------
# exact Shapley values (interventional)


def _leaf_conditions(tree):
    """For each leaf: value and the (feature, threshold, went_left, missing_left) tests on its path."""
    feat, thr, mleft, left, right, value = tree.arrays()
    out = []
    stack = [(0, [])]
    while stack:
        node, path = stack.pop()
        if feat[node] < 0:
            out.append((value[node], path))
            continue
        stack.append((left[node], path + [(feat[node], thr[node], True, mleft[node])]))
        stack.append((right[node], path + [(feat[node], thr[node], False, mleft[node])]))
    return out


def _satisfaction_masks(X, leaves, n_features):
    """Bitmask per (row, leaf): bit f set when the row passes every test on feature f."""
    full = (1 << n_features) - 1
    masks = np.full((len(X), len(leaves)), full, dtype=np.int64)
    for li, (_, path) in enumerate(leaves):
        for f, t, went_left, ml in path:
            x = X[:, f]
            passed = np.where(np.isnan(x), ml == went_left, (x <= t) == went_left)
            masks[~passed, li] &= ~(1 << int(f))
    return masks


class ShapExplainer:
    """Exact interventional Shapley values for a :class:`GbmModel`.

    The value of a coalition ``S`` for row ``x`` is the mean margin over the
    background rows with the features in ``S`` replaced by ``x``.  A hybrid
    row reaches a leaf iff ``x`` passes the leaf's tests on features in ``S``
    and the background row passes the rest, so each coalition value is a
    sum over leaves of ``value * [x passes S-tests] * P_bg(passes the others)``.
    The background factor is precomputed for all ``2^n`` coalitions with a
    superset-sum over feature bitmasks.
    """

    def __init__(self, model: GbmModel, background):
        self.model = model
        bg = model._matrix(background)
        n = len(model.features)
        if n > MAX_EXACT_FEATURES:
            raise ValidationError(
                f"exact Shapley values enumerate 2^n coalitions; {n} features exceeds the limit of "
                f"{MAX_EXACT_FEATURES}. Reduce the feature set or use an approximate explainer."
            )
        if len(bg) == 0:
            raise ValidationError("background set is empty")
        self.n = n
        self.n_coalitions = 1 << n
        leaves = [leaf for tree in model.trees for leaf in _leaf_conditions(tree)]
        self.leaf_values = np.array([v for v, _ in leaves])
        self.leaves = leaves
        full = self.n_coalitions - 1
        bg_masks = _satisfaction_masks(bg, leaves, n)
        # counts[l, m]: background rows whose pass-mask on leaf l equals m
        counts = np.zeros((len(leaves), self.n_coalitions))
        for li in range(len(leaves)):
            counts[li] = np.bincount(bg_masks[:, li], minlength=self.n_coalitions)
        # superset sums: sup[l, m] = sum over m' containing m of counts[l, m']
        sup = counts
        for f in range(n):
            bit = 1 << f
            idx = np.arange(self.n_coalitions)
            lo = idx[(idx & bit) == 0]
            sup[:, lo] += sup[:, lo | bit]
        coal = np.arange(self.n_coalitions)
        # background must pass every feature outside S
        self.bg_frac = sup[:, full & ~coal] / len(bg)
        self.base_value = float(model.base_score + self.leaf_values @ self.bg_frac[:, 0])
        self.coalitions = coal
        sizes = np.array([bin(s).count("1") for s in coal])
        self.sizes = sizes
        w = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n) for k in range(n)])
        self.weights = w

    def coalition_values(self, X):
        """``v(S)`` for every row and coalition, shape rows x 2^n."""
        X = self.model._matrix(X)
        xm = _satisfaction_masks(X, self.leaves, self.n)
        out = np.empty((len(X), self.n_coalitions))
        contrib = self.leaf_values[:, None] * self.bg_frac
        for r in range(len(X)):
            ok = (self.coalitions[None, :] & ~xm[r][:, None]) == 0
            out[r] = self.model.base_score + np.sum(contrib * ok, axis=0)
        return out

    def shap_values(self, X):
        v = self.coalition_values(X)
        phi = np.zeros((v.shape[0], self.n))
        for j in range(self.n):
            bit = 1 << j
            without = self.coalitions[(self.coalitions & bit) == 0]
            w = self.weights[self.sizes[without]]
            phi[:, j] = (v[:, without | bit] - v[:, without]) @ w
        return phi


def exact_shap(model, x, background):
    """Shapley attribution of each feature for one row ``x``.

    ``sum(phi) + mean background margin == margin(x)``.
    """
    x = np.asarray(x.values if isinstance(x, FeatureMatrix) else x, dtype=np.float64).reshape(1, -1)
    return ShapExplainer(model, background).shap_values(x)[0]


def mean_abs_shap(model, X, background):
    """Mean |phi| per feature and the feature names ordered by it (descending)."""
    phi = ShapExplainer(model, background).shap_values(X)
    imp = np.abs(phi).mean(axis=0)
    order = np.argsort(-imp, kind="mergesort")
    return imp, [model.features[i] for i in order]
