"""Dense NCHW tensor operators with hand-written backward passes.

Every operator comes as a pair: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``.  Arrays are plain ``numpy.ndarray``;
the dtype of the input decides the working precision (float32 for training,
float64 for gradient checks).
"""
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class LabelError(ValueError):
    """Raised when a class label is outside ``[0, K)``."""


class DegenerateBatchError(ValueError):
    """Raised when train-mode batch norm sees a single element per channel."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def _check_4d(x, what="input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (N,C,H,W), got shape {x.shape}")


def _out_size(size, k, stride, padding, axis):
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(
            f"kernel {k} does not fit padded {axis} axis of size {size + 2 * padding}")
    return span // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(xp, i, j, stride, ho, wo):
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation.

    ``weight`` has shape ``(Cout, Cin // groups, kh, kw)``.  The kernel is
    applied offset by offset, each offset being one matrix product, so no
    im2col buffer is materialised.
    """
    _check_4d(x)
    _check_4d(weight, "weight")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise DimensionError(
            f"channel axes (Cin={cin}, Cout={cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight in-channel axis {cin_g} != Cin/groups = {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    ho = _out_size(h, kh, stride, padding, "H")
    wo = _out_size(w, kw, stride, padding, "W")
    xp = _pad(x, padding)
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, weight))
    for g in range(groups):
        xg = xp[:, g * cin_g:(g + 1) * cin_g]
        wg = weight[g * cout_g:(g + 1) * cout_g]
        acc = out[:, g * cout_g:(g + 1) * cout_g]
        for i in range(kh):
            for j in range(kw):
                xs = _window(xg, i, j, stride, ho, wo)
                # (N,Cin_g,Ho,Wo) x (Cout_g,Cin_g) -> (N,Ho,Wo,Cout_g)
                acc += np.moveaxis(np.tensordot(xs, wg[:, :, i, j], axes=([1], [1])), 3, 1)
    if bias is not None:
        out += bias[None, :, None, None]
    cache = (x.shape, xp, weight, bias is not None, stride, padding, groups)
    return out, cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``; ``dbias`` is None without bias."""
    x_shape, xp, weight, has_bias, stride, padding, groups = cache
    n, cout, ho, wo = dout.shape
    _, cin_g, kh, kw = weight.shape
    cout_g = cout // groups
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight)
    for g in range(groups):
        xg = xp[:, g * cin_g:(g + 1) * cin_g]
        dxg = dxp[:, g * cin_g:(g + 1) * cin_g]
        wg = weight[g * cout_g:(g + 1) * cout_g]
        dg = dout[:, g * cout_g:(g + 1) * cout_g]
        for i in range(kh):
            for j in range(kw):
                xs = _window(xg, i, j, stride, ho, wo)
                dw[g * cout_g:(g + 1) * cout_g, :, i, j] = np.tensordot(
                    dg, xs, axes=([0, 2, 3], [0, 2, 3]))
                # (Cout_g,Cin_g) x (N,Cout_g,Ho,Wo) -> (Cin_g,N,Ho,Wo)
                contrib = np.tensordot(wg[:, :, i, j], dg, axes=([0], [1]))
                _window(dxg, i, j, stride, ho, wo)[...] += contrib.transpose(1, 0, 2, 3)
    if padding:
        dx = dxp[:, :, padding:-padding, padding:-padding]
    else:
        dx = dxp
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def depthwise_conv2d(x, weight, stride=1, padding=0):
    """One ``kh x kw`` kernel per channel; ``weight`` is ``(C, 1, kh, kw)``."""
    _check_4d(x)
    _check_4d(weight, "weight")
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise DimensionError(
            f"depthwise weight shape {weight.shape} does not match C={c} (expected ({c},1,kh,kw))")
    kh, kw = weight.shape[2:]
    ho = _out_size(h, kh, stride, padding, "H")
    wo = _out_size(w, kw, stride, padding, "W")
    xp = _pad(x, padding)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, weight))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, ho, wo) * weight[None, :, 0, i, j, None, None]
    return out, (xp, weight, stride, padding)


def depthwise_conv2d_backward(dout, cache):
    xp, weight, stride, padding = cache
    _, _, ho, wo = dout.shape
    kh, kw = weight.shape[2:]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight)
    for i in range(kh):
        for j in range(kw):
            xs = _window(xp, i, j, stride, ho, wo)
            dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dout, xs)
            _window(dxp, i, j, stride, ho, wo)[...] += dout * weight[None, :, 0, i, j, None, None]
    dx = dxp[:, :, padding:-padding, padding:-padding] if padding else dxp
    return np.ascontiguousarray(dx), dw


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, train,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate).  In eval mode the running statistics are used.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    for name, v in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise DimensionError(f"{name} shape {v.shape} != ({c},)")
    if train:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"train-mode batch norm needs N*H*W >= 2 per channel, got {m}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, gamma, inv_std, train)


def batch_norm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, gamma, inv_std, train = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    g = (gamma * inv_std)[None, :, None, None]
    if not train:
        return dout * g, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = g * (dout - dbeta[None, :, None, None] / m
              - xhat * dgamma[None, :, None, None] / m)
    return dx, dgamma, dbeta


# ----------------------------------------------------------------------------
# channel plumbing
# ----------------------------------------------------------------------------

def channel_shuffle(x, groups):
    """Output channel ``j*groups + k`` reads input channel ``k*(C/groups) + j``."""
    _check_4d(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise DimensionError(f"channel axis C={c} not divisible by groups={groups}")
    return x.reshape(n, groups, c // groups, h, w).swapaxes(1, 2).reshape(n, c, h, w)


def channel_shuffle_backward(dout, groups):
    return channel_shuffle(dout, dout.shape[1] // groups)


def channel_split(x):
    _check_4d(x)
    c = x.shape[1]
    if c % 2:
        raise DimensionError(f"channel split needs an even channel axis, got C={c}")
    return x[:, :c // 2], x[:, c // 2:]


def concat_channels(a, b):
    _check_4d(a)
    _check_4d(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"cannot concat {a.shape} and {b.shape}: N/H/W axes differ")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(dout, split_at):
    return dout[:, :split_at], dout[:, split_at:]


# ----------------------------------------------------------------------------
# pointwise, pooling, dense
# ----------------------------------------------------------------------------

def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def max_pool(x, k, stride, padding=0):
    """Max pooling; padded cells are ``-inf`` and never selected."""
    _check_4d(x)
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, padding, "H")
    wo = _out_size(w, k, stride, padding, "W")
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int16)
    for i in range(k):
        for j in range(k):
            xs = _window(xp, i, j, stride, ho, wo)
            better = xs > out
            out = np.where(better, xs, out)
            arg[better] = i * k + j
    return out, (xp.shape, arg, k, stride, padding)


def max_pool_backward(dout, cache):
    xp_shape, arg, k, stride, padding = cache
    _, _, ho, wo = dout.shape
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            _window(dxp, i, j, stride, ho, wo)[...] += dout * (arg == i * k + j)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def global_avg_pool(x):
    _check_4d(x)
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(dout, x_shape):
    h, w = x_shape[2:]
    return np.broadcast_to(dout / (h * w), x_shape).copy()


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``x`` of shape ``(N, F)``, weight ``(K, F)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape} (feature axis)")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(dout, cache):
    x, weight, has_bias = cache
    return dout @ weight, dout.T @ x, (dout.sum(axis=0) if has_bias else None)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, dlogits)`` where ``dlogits = (probs - onehot) / N``
    is the gradient of the returned loss.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, probs, dlogits
