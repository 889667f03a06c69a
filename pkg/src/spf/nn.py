"""Minimal dense-tensor layers with hand-written backward passes.

Everything operates on 4-D arrays in (N, C, H, W) row-major layout,
float32 by default (float64 is accepted so gradient checks can run in
double precision). Only the layer set the patch classifier needs is
provided: conv, relu, 2x2 maxpool, global average pooling, linear,
softmax, cross-entropy, and plain SGD.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float32


def check_tensor(x, name="tensor"):
    """Validate the (N,C,H,W) contract: 4-D, floating, finite."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D (N,C,H,W) array, got "
                         f"{getattr(x, 'shape', type(x).__name__)}")
    if not np.issubdtype(x.dtype, np.floating):
        raise ShapeError(f"{name} must be floating point, got dtype {x.dtype}")
    return x


class Parameter:
    """A named weight array paired with its gradient accumulator."""

    def __init__(self, value, name):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def fan_in_uniform(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    """Uniform init in +/- sqrt(1/fan_in)."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------- functional

def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    win = as_strided(x, (n, c, kh, kw, oh, ow),
                     (sn, sc, sh, sw, sh * stride, sw * stride))
    # reshape forces the copy that matmul needs anyway
    return win.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of (N,C,H,W) with (F,C,kh,kw) filters plus bias."""
    check_tensor(x, "conv input")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv input has {c} channels ({x.shape}) but weight "
                         f"expects {cw} ({weight.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv kernel {weight.shape} does not fit padded input "
                         f"{x.shape} (padding={padding})")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(weight.reshape(f, -1), cols)
    out += np.asarray(bias, dtype=out.dtype).reshape(1, f, 1)
    return out.reshape(n, f, oh, ow)


def relu(x):
    return np.maximum(x, 0)


def maxpool2d(x, window=2, stride=2):
    """2x2/2 max pooling; H and W must be even (pad-free pooling only)."""
    if window != 2 or stride != 2:
        raise ShapeError("only window=2, stride=2 pooling is supported")
    check_tensor(x, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even H and W, got {x.shape}")
    xv = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return xv.max(axis=(3, 5))


def global_avg_pool(x):
    check_tensor(x, "gap input")
    return x.mean(axis=(2, 3), keepdims=True)


def linear(x, weight, bias):
    """Affine map on (N,D,1,1) features: weight is (D_out, D)."""
    check_tensor(x, "linear input")
    n, d, h, w = x.shape
    if h != 1 or w != 1:
        raise ShapeError(f"linear expects (N,D,1,1) input, got {x.shape}")
    dout, din = weight.shape
    if d != din:
        raise ShapeError(f"linear input width {d} ({x.shape}) does not match "
                         f"weight {weight.shape}")
    out = x.reshape(n, d) @ weight.T + np.asarray(bias, dtype=x.dtype)
    return out.reshape(n, dout, 1, 1)


def softmax(logits):
    """Stable softmax over the last axis; accepts (K,) or (N,K)."""
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, target):
    """-log p[target] for one probability vector."""
    p = np.asarray(probs)
    if target >= p.shape[-1] or target < 0:
        raise IndexError(f"target {target} out of range for {p.shape[-1]} classes")
    return float(-np.log(p[target]))


def softmax_cross_entropy(logits, targets):
    """Mean CE over a (N,K) batch of logits, with the combined gradient.

    Returns (loss, dlogits) where dlogits = (softmax - onehot) / N, the
    standard fused softmax+CE gradient.
    """
    z = np.asarray(logits)
    n, k = z.shape
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= k:
        raise IndexError(f"targets out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), targets]))
    p = softmax(z)
    p[np.arange(n), targets] -= 1
    return loss, (p / n).astype(z.dtype)


def sgd_step(params, learning_rate):
    """value <- value - lr * grad, elementwise; gradients are left untouched."""
    for p in params:
        p.value -= np.asarray(learning_rate, dtype=p.value.dtype) * p.grad


def zero_grads(params):
    for p in params:
        p.zero_grad()


# -------------------------------------------------------------------- layers

class Layer:
    """Base: forward caches what backward needs; backward is single-use."""

    def parameters(self):
        return []

    def _take_cache(self):
        if getattr(self, "_cache", None) is None:
            raise GraphError(f"{type(self).__name__}.backward called twice or "
                             "before forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, rng=None, name="conv", dtype=DEFAULT_DTYPE):
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            rng = np.random.default_rng(0)
        w = fan_in_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                           fan_in, dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}.bias")
        self.stride = stride
        self.padding = padding
        self.kernel_size = kernel_size
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        f = self.weight.value.shape[0]
        k = self.kernel_size
        n, c, h, w = check_tensor(x, "conv input").shape
        if c != self.weight.value.shape[1]:
            raise ShapeError(f"conv input has {c} channels ({x.shape}) but weight "
                             f"expects {self.weight.value.shape[1]} "
                             f"({self.weight.value.shape})")
        if h + 2 * self.padding < k or w + 2 * self.padding < k:
            raise ShapeError(f"conv kernel {self.weight.value.shape} does not fit "
                             f"padded input {x.shape} (padding={self.padding})")
        cols, oh, ow = _im2col(x, k, k, self.stride, self.padding)
        out = np.matmul(self.weight.value.reshape(f, -1), cols)
        out += self.bias.value.reshape(1, f, 1)
        self._cache = (cols, x.shape, oh, ow)
        return out.reshape(n, f, oh, ow)

    def backward(self, dout):
        cols, x_shape, oh, ow = self._take_cache()
        n, f = dout.shape[:2]
        k = self.kernel_size
        d2 = dout.reshape(n, f, oh * ow)
        self.bias.grad += d2.sum(axis=(0, 2))
        # (F, CK) accumulated over batch and spatial positions
        self.weight.grad += np.tensordot(d2, cols, axes=([0, 2], [0, 2])) \
            .reshape(self.weight.value.shape)
        dcols = np.matmul(self.weight.value.reshape(f, -1).T, d2)
        return _col2im(dcols, x_shape, k, k, self.stride, self.padding)


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._take_cache()


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties break toward the first element."""

    def __init__(self):
        self._cache = None

    def forward(self, x):
        check_tensor(x, "pool input")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2d needs even H and W, got {x.shape}")
        xv = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
              .reshape(n, c, h // 2, w // 2, 4)
        idx = xv.argmax(axis=4)
        out = np.take_along_axis(xv, idx[..., None], axis=4)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, dout):
        idx, (n, c, h, w) = self._take_cache()
        dxv = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dxv, idx[..., None], dout[..., None], axis=4)
        return dxv.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                  .reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x):
        check_tensor(x, "gap input")
        self._cache = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout):
        n, c, h, w = self._take_cache()
        return np.broadcast_to(dout / (h * w), (n, c, h, w)).astype(dout.dtype)


class RmsNorm(Layer):
    """Per-sample RMS normalisation of (N,C,1,1) features.

    Rescales each sample's feature vector to unit RMS. Sample-local (no batch
    statistics, no learned parameters); it conditions the head's inputs so
    plain SGD makes per-step progress independent of how small the backbone's
    activations are.
    """

    def __init__(self, eps=1e-6):
        self.eps = eps
        self._cache = None

    def forward(self, x):
        check_tensor(x, "rmsnorm input")
        n, c = x.shape[:2]
        f = x.reshape(n, c)
        rms = np.sqrt((f * f).mean(axis=1, keepdims=True))
        r = rms + np.asarray(self.eps, dtype=x.dtype)
        self._cache = (f, rms, r)
        return (f / r).reshape(n, c, 1, 1)

    def backward(self, dout):
        f, rms, r = self._take_cache()
        n, c = f.shape
        d = dout.reshape(n, c)
        dot = (d * f).sum(axis=1, keepdims=True)
        safe = np.maximum(rms, np.asarray(self.eps, dtype=f.dtype))
        dx = d / r - f * dot / (c * safe * r * r)
        return dx.reshape(n, c, 1, 1)


def standardize_patches(x, eps=1e-4):
    """Per-channel zero-mean/unit-std over each patch's pixels. Input-side
    preprocessing: not differentiated through."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    sd = x.std(axis=(2, 3), keepdims=True) + np.asarray(eps, dtype=x.dtype)
    return (x - mu) / sd


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None, name="linear",
                 dtype=DEFAULT_DTYPE):
        if rng is None:
            rng = np.random.default_rng(0)
        w = fan_in_uniform(rng, (out_features, in_features), in_features, dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), f"{name}.bias")
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        out = linear(x, self.weight.value, self.bias.value)
        self._cache = x.reshape(x.shape[0], -1)
        return out

    def backward(self, dout):
        x2 = self._take_cache()
        n, dout_f = dout.shape[:2]
        d2 = dout.reshape(n, dout_f)
        self.weight.grad += d2.T @ x2
        self.bias.grad += d2.sum(axis=0)
        dx = d2 @ self.weight.value
        return dx.reshape(n, -1, 1, 1)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)
        self._ran_forward = False

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._ran_forward = True
        return x

    def backward(self, dout):
        if not self._ran_forward:
            raise GraphError("Sequential.backward called twice or before forward")
        self._ran_forward = False
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout
