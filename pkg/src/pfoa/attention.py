"""VGG-style classifier with two trainable spatial attention blocks.

The backbone is a stack of 3x3 conv/ReLU blocks separated by 2x2 max
pooling.  Feature maps ``F`` from the tapped blocks are re-weighted by a
single-channel attention map computed from ``F`` and the global feature
``G`` (global average pool of the last block)::

    A    = sigmoid(W * relu(W_L * F + broadcast(W_G G)))
    F_att = A . F

The classifier sees ``concat(gap(F_att_1), gap(F_att_2), G)``.  Without
attention it sees ``G`` alone.  The backbone itself is not modified by the
attention branch.

Parameters live in an ordered ``dict`` of :class:`~pfoa.autodiff.Parameter`.
Classifier columns that read an attention tap are stored under that tap's
``attn{i}.`` prefix, so toggling attention adds or removes exactly the
``attn*`` parameters.
"""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, LoadError, ShapeError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    block_channels: tuple = (16, 32, 64, 96, 96)
    convs_per_block: tuple = (1, 1, 2, 2, 1)
    input_size: int = 64
    attention_taps: tuple = (2, 3)
    classifier_width: int = 0
    attention_hidden: int = 0  # 0 -> channels of the tapped block
    global_mode: str = "vector"  # "vector" broadcast, or "spatial" bilinear upsample
    in_channels: int = 1
    attention_bias_init: float = 0.0  # initial bias of the sigmoid gate; negative starts it mostly closed

    def __post_init__(self):
        # config files give a single value as a scalar
        self.block_channels = tuple(int(c) for c in np.atleast_1d(self.block_channels))
        self.convs_per_block = tuple(int(c) for c in np.atleast_1d(self.convs_per_block))
        self.attention_taps = tuple(int(t) for t in np.atleast_1d(self.attention_taps))
        n = len(self.block_channels)
        if n == 0 or len(self.convs_per_block) != n:
            raise ConfigError("block_channels and convs_per_block must have equal non-zero length", "convs_per_block")
        if any(c <= 0 for c in self.block_channels + self.convs_per_block):
            raise ConfigError("block channels and conv counts must be positive", "block_channels")
        if any(not 0 <= t < n - 1 for t in self.attention_taps) or len(set(self.attention_taps)) != len(self.attention_taps):
            raise ConfigError(f"attention_taps must be distinct indices before the last block (< {n - 1})", "attention_taps")
        if self.input_size % (2 ** (n - 1)):
            raise ConfigError(f"input_size must be divisible by {2 ** (n - 1)}", "input_size")
        if self.global_mode not in ("vector", "spatial"):
            raise ConfigError("global_mode must be 'vector' or 'spatial'", "global_mode")
        if self.classifier_width < 0 or self.attention_hidden < 0:
            raise ConfigError("classifier_width and attention_hidden must be >= 0", "classifier_width")

    @classmethod
    def full(cls):
        """VGG-16 layout on 224 x 224 inputs."""
        return cls(block_channels=(64, 128, 256, 512, 512), convs_per_block=(2, 2, 3, 3, 3), input_size=224)

    @classmethod
    def desk(cls):
        return cls()

    def tap_size(self, tap):
        return self.input_size // (2**tap)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 45
    lr0: float = 0.001
    lr_decay: float = 0.1
    lr_step: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    gamma: float = 2.0
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr_step"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr0 must be positive and lr_decay in (0, 1]", "lr0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", "momentum")

    def lr_at(self, epoch):
        return self.lr0 * self.lr_decay ** (epoch // self.lr_step)


# ---------------------------------------------------------------------------
# parameters


def _param_seed(seed, name):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]))


def _attn_hidden(cfg, tap):
    return cfg.attention_hidden or cfg.block_channels[tap]


def param_shapes(cfg, with_attention=True):
    """Ordered ``name -> (shape, fan_in)``; biases have ``fan_in=0``."""
    shapes = {}
    c_in = cfg.in_channels
    for b, (c_out, n_conv) in enumerate(zip(cfg.block_channels, cfg.convs_per_block)):
        for j in range(n_conv):
            shapes[f"block{b}.conv{j}.w"] = ((c_out, c_in, 3, 3), c_in * 9)
            shapes[f"block{b}.conv{j}.b"] = ((c_out,), 0)
            c_in = c_out
    dg = cfg.block_channels[-1]
    m = cfg.classifier_width or 1
    if with_attention:
        for i, tap in enumerate(cfg.attention_taps):
            cf, d = cfg.block_channels[tap], _attn_hidden(cfg, tap)
            shapes[f"attn{i}.wl.w"] = ((d, cf, 1, 1), cf)
            shapes[f"attn{i}.wl.b"] = ((d,), 0)
            if cfg.global_mode == "spatial":
                shapes[f"attn{i}.wg.w"] = ((d, dg, 1, 1), dg)
            else:
                shapes[f"attn{i}.wg.w"] = ((d, dg), dg)
            shapes[f"attn{i}.wg.b"] = ((d,), 0)
            shapes[f"attn{i}.w.w"] = ((1, d, 1, 1), d)
            shapes[f"attn{i}.w.b"] = ((1,), 0)
    feat_dim = dg + (sum(cfg.block_channels[t] for t in cfg.attention_taps) if with_attention else 0)
    if with_attention:
        for i, tap in enumerate(cfg.attention_taps):
            shapes[f"attn{i}.head"] = ((m, cfg.block_channels[tap]), feat_dim)
    shapes["head.wg"] = ((m, dg), feat_dim)
    shapes["head.b"] = ((m,), 0)
    if cfg.classifier_width:
        shapes["head.out.w"] = ((1, m), m)
        shapes["head.out.b"] = ((1,), 0)
    return shapes


def init_params(cfg, with_attention=True, seed=0, dtype=np.float32):
    """He-initialised weights; zero biases except the attention gate bias (``attention_bias_init``).

    Each tensor draws from its own stream keyed by (seed, name), so the
    backbone is initialised identically with and without attention.
    """
    params = {}
    for name, (shape, fan_in) in param_shapes(cfg, with_attention).items():
        if fan_in:
            data = ad.he_init(shape, fan_in, _param_seed(seed, name), dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
            if name.startswith("attn") and name.endswith(".w.b"):
                data[...] = cfg.attention_bias_init
        params[name] = ad.Parameter(data, name=name)
    return params


def count_params(params, prefix=""):
    return int(sum(p.data.size for n, p in params.items() if n.startswith(prefix)))


def has_attention(params):
    return any(n.startswith("attn") for n in params)


# ---------------------------------------------------------------------------
# forward


def spatial_attention(F, G, block):
    """Attention map ``A`` (N x 1 x H x W) and re-weighted features ``A * F``.

    ``block`` maps ``wl.w, wl.b, wg.w, wg.b, w.w, w.b`` to tensors.  ``G`` is
    either an N x Dg vector (broadcast over space) or an N x Dg x h x w map
    (projected with a 1x1 conv and bilinearly upsampled).
    """
    F = ad._as_tensor(F)
    G = ad._as_tensor(G)
    if F.data.ndim != 4:
        raise ShapeError(f"spatial_attention: F must be N x C x H x W, got {F.shape}")
    n, _, h, w = F.shape
    if G.shape[0] != n:
        raise ShapeError(f"spatial_attention: batch mismatch {F.shape} vs {G.shape}")
    local = ad.conv2d(F, block["wl.w"], block["wl.b"])
    if G.data.ndim == 2:
        glob = ad.broadcast_spatial(ad.linear(G, block["wg.w"], block["wg.b"]), h, w)
    else:
        glob = ad.conv2d(G, block["wg.w"], block["wg.b"])
        if glob.shape[2:] != (h, w):
            glob = ad.upsample_bilinear(glob, h, w)
    A = ad.sigmoid(ad.conv2d(ad.relu(ad.add(local, glob)), block["w.w"], block["w.b"]))
    return A, ad.mul(A, F)


def _block_view(params, i):
    prefix = f"attn{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class ForwardOutput:
    logits: ad.Tensor
    attention_maps: list = field(default_factory=list)
    G: ad.Tensor = None


def forward(params, x, cfg):
    """Logits (N,), per-tap attention maps and the global feature ``G``."""
    x = ad._as_tensor(x)
    if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"forward: expected N x {cfg.in_channels} x {cfg.input_size} x {cfg.input_size}, got {x.shape}"
        )
    attn = has_attention(params)
    h = x
    taps = []
    last = len(cfg.block_channels) - 1
    for b, n_conv in enumerate(cfg.convs_per_block):
        for j in range(n_conv):
            h = ad.relu(ad.conv2d(h, params[f"block{b}.conv{j}.w"], params[f"block{b}.conv{j}.b"], pad=1))
        if attn and b in cfg.attention_taps:
            taps.append(h)
        if b < last:
            h = ad.maxpool2(h)
    G = ad.gap(h)
    g_in = h if cfg.global_mode == "spatial" else G

    feats, weights, maps = [], [], []
    if attn:
        for i, F in enumerate(taps):
            A, F_att = spatial_attention(F, g_in, _block_view(params, i))
            maps.append(A)
            feats.append(ad.gap(F_att))
            weights.append(params[f"attn{i}.head"])
    feats.append(G)
    weights.append(params["head.wg"])
    feature = ad.concat_features(*feats) if len(feats) > 1 else feats[0]
    weight = ad.concat_features(*weights) if len(weights) > 1 else weights[0]
    out = ad.linear(feature, weight, params["head.b"])
    if cfg.classifier_width:
        out = ad.linear(ad.relu(out), params["head.out.w"], params["head.out.b"])
    logits = _flatten_logits(out)
    return ForwardOutput(logits=logits, attention_maps=maps, G=G)


def _flatten_logits(out):
    # N x 1 -> N, keeping the tape
    flat = out.data[:, 0]
    return ad._result(flat, (out,), lambda g: (g[:, None],))


# ---------------------------------------------------------------------------
# data handling


def crop_batch(images, size, offsets):
    """Crop ``size`` x ``size`` windows at per-image (row, col) offsets."""
    out = np.empty((len(images), images.shape[1], size, size), dtype=images.dtype)
    for k, (r, c) in enumerate(offsets):
        out[k] = images[k, :, r : r + size, c : c + size]
    return out


def center_offsets(n, full, size):
    o = (full - size) // 2
    return np.full((n, 2), o, dtype=int)


def random_offsets(rng, n, full, size):
    return rng.integers(0, full - size + 1, size=(n, 2))


# ---------------------------------------------------------------------------
# training and inference


@dataclass
class TrainedModel:
    params: dict
    backbone: BackboneConfig
    train_config: TrainConfig
    history: list = field(default_factory=list)

    @property
    def with_attention(self):
        return has_attention(self.params)


def _check_images(images, cfg):
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or images.shape[1] != cfg.in_channels or images.shape[2] != images.shape[3]:
        raise ShapeError(f"expected N x {cfg.in_channels} x S x S images, got {images.shape}")
    if images.shape[2] < cfg.input_size:
        raise ShapeError(f"images of size {images.shape[2]} are smaller than input_size {cfg.input_size}")
    return images


def train_model(
    train_images,
    train_labels,
    cfg: BackboneConfig,
    tcfg: TrainConfig,
    with_attention=True,
    val_images=None,
    val_labels=None,
    dtype=np.float32,
    callback=None,
):
    """Minibatch SGD with momentum on the focal loss.

    Images are N x 1 x S x S with S >= ``cfg.input_size``; each step takes a
    random ``input_size`` crop.  Learning rate follows
    ``lr0 * lr_decay ** (epoch // lr_step)``.
    """
    from .metrics import auc as _auc

    x = _check_images(train_images, cfg).astype(dtype, copy=False)
    y = np.asarray(train_labels).astype(int)
    if len(y) != len(x):
        raise ValidationError(f"{len(x)} images but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise ValidationError("training set must contain both classes")

    params = init_params(cfg, with_attention, seed=tcfg.seed, dtype=dtype)
    plist = list(params.values())
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    full = x.shape[2]
    history = []
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(len(x))
        offsets = random_offsets(rng, len(x), full, cfg.input_size)
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            xb = crop_batch(x[idx], cfg.input_size, offsets[start : start + len(idx)])
            out = forward(params, xb, cfg)
            loss = ad.focal_loss(out.logits, y[idx], tcfg.gamma, tcfg.alpha)
            ad.backward(loss, plist)
            ad.sgd_momentum_step(plist, lr, tcfg.momentum, tcfg.weight_decay)
            losses.append(float(loss.data) * len(idx))
        row = {"epoch": epoch, "lr": lr, "train_loss": sum(losses) / len(x), "val_auc": float("nan")}
        if val_images is not None and val_labels is not None and len(np.unique(val_labels)) == 2:
            model = TrainedModel(params, cfg, tcfg)
            row["val_auc"] = _auc(predict_proba(model, val_images), val_labels)
        history.append(row)
        log.info("epoch %d lr=%.5g loss=%.5f val_auc=%.4f", epoch, lr, row["train_loss"], row["val_auc"])
        if callback is not None:
            callback(row)
    return TrainedModel(params=params, backbone=cfg, train_config=tcfg, history=history)


def predict_logits(model, images, batch_size=64):
    cfg = model.backbone
    x = _check_images(images, cfg)
    dtype = next(iter(model.params.values())).data.dtype
    x = x.astype(dtype, copy=False)
    out = np.empty(len(x), dtype=np.float64)
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            xb = crop_batch(xb, cfg.input_size, center_offsets(len(xb), x.shape[2], cfg.input_size))
            out[start : start + len(xb)] = forward(model.params, xb, cfg).logits.data
    return out


def predict_proba(model, images, batch_size=64):
    """Sigmoid of eval-mode (center-crop) logits."""
    z = predict_logits(model, images, batch_size)
    # clip keeps the result strictly inside (0, 1) in float64
    return np.clip(ad._sigmoid_np(z), 1e-15, 1 - 1e-15)


def attention_maps(model, images, batch_size=64):
    """Eval-mode attention maps, one array (N x h x w) per tap."""
    cfg = model.backbone
    if not model.with_attention:
        raise ValidationError("model was trained without attention")
    x = _check_images(images, cfg).astype(next(iter(model.params.values())).data.dtype, copy=False)
    maps = [[] for _ in cfg.attention_taps]
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            xb = crop_batch(xb, cfg.input_size, center_offsets(len(xb), x.shape[2], cfg.input_size))
            for i, A in enumerate(forward(model.params, xb, cfg).attention_maps):
                maps[i].append(A.data[:, 0].astype(np.float64))
    return [np.concatenate(m) for m in maps]


def attention_overlay(model, roi, tap=None):
    """Attention map of one ROI at input resolution, min-max scaled to [0, 1].

    ``tap`` indexes ``attention_taps``; default is the deepest tap.
    Returns ``(scaled, raw)`` where ``raw`` is the upsampled sigmoid map.
    """
    cfg = model.backbone
    n_taps = len(cfg.attention_taps)
    if tap is None:
        tap = n_taps - 1
    if not isinstance(tap, (int, np.integer)) or not 0 <= tap < n_taps:
        raise ValidationError(f"tap must be in [0, {n_taps}), got {tap!r}")
    roi = np.asarray(roi)
    if roi.ndim == 2:
        roi = roi[None, None]
    A = attention_maps(model, roi)[tap][0]
    raw = ad.upsample_bilinear(A[None, None], cfg.input_size, cfg.input_size).data[0, 0]
    lo, hi = raw.min(), raw.max()
    scaled = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    return scaled, raw


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path):
    from .io import save_checkpoint

    meta = {
        "backbone": asdict(model.backbone),
        "train_config": asdict(model.train_config),
        "with_attention": model.with_attention,
    }
    save_checkpoint(path, {n: p.data for n, p in model.params.items()}, meta)


def load_model(path, expected_backbone=None):
    from .io import load_checkpoint

    arrays, meta = load_checkpoint(path)
    try:
        cfg = BackboneConfig(**meta["backbone"])
        tcfg = TrainConfig(**meta["train_config"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"{path}: checkpoint metadata incomplete ({exc})") from exc
    if expected_backbone is not None and asdict(expected_backbone) != asdict(cfg):
        raise LoadError(f"{path}: checkpoint backbone does not match the requested configuration")
    expected = param_shapes(cfg, bool(meta.get("with_attention", True)))
    if set(expected) != set(arrays):
        raise LoadError(f"{path}: parameter names do not match the backbone configuration")
    for name, (shape, _) in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise LoadError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    params = {name: ad.Parameter(arrays[name], name=name) for name in expected}
    return TrainedModel(params=params, backbone=cfg, train_config=tcfg)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_auc"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["train_loss"])), repr(float(row["val_auc"]))])
