"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The operator set is closed over what the attention network needs: 2-D
convolution, ReLU, sigmoid, 2x2 max pooling, global average pooling, affine
layers, feature concatenation, spatial broadcast, bilinear upsampling,
elementwise add/mul and the focal loss.  Every operator records a closure
that maps the output gradient to input gradients; :func:`backward` replays
them in reverse topological order.

Arrays are float64 in tests and gradient checks; float32 is used for
training throughput.  No operator mutates its inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

__all__ = [
    "Tensor",
    "Parameter",
    "conv2d",
    "relu",
    "sigmoid",
    "maxpool2",
    "gap",
    "linear",
    "concat_features",
    "broadcast_spatial",
    "upsample_bilinear",
    "add",
    "mul",
    "total",
    "focal_loss",
    "focal_loss_value",
    "he_init",
    "backward",
    "sgd_momentum_step",
    "no_grad",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A value on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """Trainable tensor carrying its own momentum buffer."""

    __slots__ = ("momentum_buffer",)

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.momentum_buffer = np.zeros_like(self.data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _shape_error(op, *shapes):
    joined = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {joined}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, out_h, out_w):
    """Columns laid out (C, kh, kw, N, Ho, Wo) -> (C*kh*kw, N*Ho*Wo)."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(c * kh * kw, n * out_h * out_w)


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of an N x C x H x W input with a K x C x kh x kw kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    n, c, h, w = x.shape
    k, _, kh, kw = kernel.shape
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (k,):
            raise _shape_error("conv2d bias", bias.shape, (k,))
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = kernel.data.reshape(k, -1)
    if kh == kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(k, n, out_h, out_w).transpose(1, 0, 2, 3)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(k, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, out_h, out_w)
            if kh == kw == 1 and stride == 1:
                gxt = gcols[:, 0, 0]
            else:
                gxt = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxt[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            if pad:
                gx = gx[:, :, pad : pad + h, pad : pad + w]
            gx = np.ascontiguousarray(gx)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _result(out, parents, _back)


# ---------------------------------------------------------------------------
# elementwise and pooling


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def _sigmoid_np(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def maxpool2(x):
    """2x2 max pooling, stride 2.  Ties route the gradient to the first index in row-major order."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise _shape_error("maxpool2", x.shape)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {(h, w)}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), _back)


def gap(x):
    """Global average pooling N x C x H x W -> N x C."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise _shape_error("gap", x.shape)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def _back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(out, (x,), _back)


def linear(x, weight, bias=None):
    """Affine map N x D -> N x M with an M x D weight."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise _shape_error("linear bias", bias.shape, (weight.shape[0],))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, parents, _back)


def concat_features(*parts):
    """Concatenate 2-D tensors along the feature axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_features: nothing to concatenate")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise _shape_error("concat_features", *(p.shape for p in parts))
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    cuts = np.cumsum(widths)[:-1]

    def _back(g):
        return tuple(np.split(g, cuts, axis=1))

    return _result(out, parts, _back)


def broadcast_spatial(v, height, width):
    """Tile an N x C vector into an N x C x H x W constant field."""
    v = _as_tensor(v)
    if v.data.ndim != 2 or height < 1 or width < 1:
        raise _shape_error("broadcast_spatial", v.shape, (height, width))
    out = np.broadcast_to(v.data[:, :, None, None], v.shape + (height, width)).copy()
    return _result(out, (v,), lambda g: (g.sum(axis=(2, 3)),))


def _interp_matrix(n_out, n_in, dtype):
    # half-pixel aligned bilinear weights, edge clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(x, height, width):
    """Bilinear resize of the spatial axes of an N x C x h x w tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise _shape_error("upsample_bilinear", x.shape)
    uh = _interp_matrix(height, x.shape[2], x.dtype)
    uw = _interp_matrix(width, x.shape[3], x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", uh, x.data, uw, optimize=True)
    return _result(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", uh, g, uw, optimize=True),))


def _unbroadcast_channel(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def _check_binary(op, a, b):
    if a.shape == b.shape:
        return
    if op == "mul" and a.data.ndim == 4 and b.data.ndim == 4:
        sa, sb = a.shape, b.shape
        if sa[0] == sb[0] and sa[2:] == sb[2:] and (sa[1] == 1 or sb[1] == 1):
            return
    raise _shape_error(op, a.shape, b.shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    """Elementwise product; an N x 1 x H x W operand broadcasts over channels."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)

    def _back(g):
        return (
            _unbroadcast_channel(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast_channel(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), _back)


def total(x):
    """Sum of all elements (scalar)."""
    x = _as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# loss


def _softplus(z):
    return np.logaddexp(0.0, z)


def _check_labels(labels, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"focal_loss: labels shape {y.shape} does not match logits ({n},)")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("focal_loss: labels must be 0 or 1")
    return y.astype(bool)


def focal_loss_value(logits, labels, gamma=2.0, alpha=1.0):
    """Per-sample focal loss and its derivative w.r.t. the logits (numpy)."""
    z = np.asarray(logits)
    if gamma < 0:
        raise ValidationError(f"focal_loss: gamma must be >= 0, got {gamma}")
    if not 0 < alpha <= 1:
        raise ValidationError(f"focal_loss: alpha must be in (0, 1], got {alpha}")
    y = _check_labels(labels, z.shape[0])
    sign = np.where(y, 1.0, -1.0)
    u = sign * z  # logit of p_t
    log_pt = -_softplus(-u)
    one_minus = _sigmoid_np(-u)
    pt = _sigmoid_np(u)
    alpha_t = np.where(y, alpha, 1.0 - alpha) if alpha < 1 else np.ones_like(u)
    mod = one_minus ** gamma
    loss = -alpha_t * mod * log_pt
    dloss_du = -alpha_t * mod * (one_minus - gamma * pt * log_pt)
    return loss, dloss_du * sign


def focal_loss(logits, labels, gamma=2.0, alpha=1.0):
    """Batch-mean focal loss on raw logits.

    ``alpha=1`` disables class weighting; ``gamma=0, alpha=1`` is plain
    binary cross-entropy.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise _shape_error("focal_loss", logits.shape)
    per, dz = focal_loss_value(logits.data, labels, gamma, alpha)
    n = per.shape[0]
    out = np.asarray(per.mean())
    return _result(out, (logits,), lambda g: ((g * dz / n).astype(logits.dtype, copy=False),))


# ---------------------------------------------------------------------------
# initialisation, backward pass, optimiser


def he_init(shape, fan_in, seed=None, dtype=np.float64):
    """Zero-mean normal draws with variance ``2 / fan_in``."""
    if fan_in <= 0:
        raise ValidationError(f"he_init: fan_in must be positive, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None, check_finite=False):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients are reset before accumulation, so each call yields the
    gradient of this loss alone.  Tensors in ``params`` that are not
    reachable end up with zero gradients.  The tape is released afterwards;
    a second call on the same loss raises ``RuntimeError``.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed; run the forward pass again")
    for p in params or ():
        p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        loss._consumed = True
        return

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in order:
        if node._backward is None and not node._parents:
            node.grad = np.zeros_like(node.data)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else g
            if check_finite and not np.all(np.isfinite(node.grad)):
                raise FloatingPointError(f"non-finite gradient on {node!r}")
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


def sgd_momentum_step(params, lr, momentum=0.9, weight_decay=0.0, check_finite=True):
    """In-place update ``v <- momentum*v + grad; p <- p - lr*v``."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise _shape_error("sgd_momentum_step", p.shape, g.shape)
        if check_finite and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        if weight_decay:
            g = g + weight_decay * p.data
        p.momentum_buffer = momentum * p.momentum_buffer + g
        p.data = (p.data - lr * p.momentum_buffer).astype(p.data.dtype, copy=False)
