"""Neural-net layers: conv, transposed conv, batchnorm, activations, pooling,
nearest upsample, and the minibatch standard-deviation feature.

The three convolution primitives (forward, transposed, weight-gradient) are
mutually adjoint and each one's backward rule is written in terms of the other
two, so second derivatives (needed by the gradient penalty) come out of the
same machinery.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (BatchTooSmall, DegenerateBatch, NonIntegralOutputSize,
                     OddSpatialDim, ShapeMismatch)
from .tensor import (Rng, Tensor, _slot_needed, add, broadcast_to, concat,
                     div, mean, mul, reshape, sqrt, square, sub, sum_)

RELU_GAIN = math.sqrt(2.0)
LINEAR_GAIN = 1.0


# ---------------------------------------------------------------------------
# Raw numpy kernels
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int,
            wo: int) -> np.ndarray:
    """Patch matrix in (kh*kw*C, B*Ho*Wo) layout, tap index leading.

    Each tap is one row-contiguous slice copy into a contiguous block, so
    the whole conv reduces to a single dgemm; gathering the same buffer
    through a 6-d strided view is an order of magnitude slower."""
    b, c = xp.shape[:2]
    cols = np.empty((kh, kw, c, b, ho, wo))
    for u in range(kh):
        for v in range(kw):
            cols[u, v] = xp[:, :, u:u + stride * (ho - 1) + 1:stride,
                            v:v + stride * (wo - 1) + 1:stride].transpose(1, 0, 2, 3)
    return cols.reshape(kh * kw * c, -1)


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = x
    return out


def _to_nchw(out2d: np.ndarray, b: int, ho: int, wo: int) -> np.ndarray:
    o = out2d.shape[0]
    return np.ascontiguousarray(out2d.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))


def _conv2d_data(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k = w.shape[2]
    xp = _pad2d(x, padding)
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    wm = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(w.shape[0], -1)
    out = np.matmul(wm, _im2col(xp, k, k, stride, ho, wo))
    return _to_nchw(out, x.shape[0], ho, wo)


def _conv_transpose2d_data(x: np.ndarray, w: np.ndarray, stride: int,
                           padding: int) -> np.ndarray:
    # Adjoint of _conv2d_data(., w, stride, padding):
    #   out[b,o,i,j] = sum_{c,m,n} x[b,c,m,n] * w[c,o, i-s*m+P, j-s*n+P]
    k = w.shape[2]
    if stride == 1:
        # Plain full correlation against the flipped kernel.
        xp = _pad2d(x, k - 1 - padding)
        wf = w[:, :, ::-1, ::-1]
        ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
        wm = np.ascontiguousarray(wf.transpose(2, 3, 0, 1)).reshape(-1, w.shape[1])
        out = np.matmul(wm.T, _im2col(xp, k, k, 1, ho, wo))
        return _to_nchw(out, x.shape[0], ho, wo)
    return _conv_transpose2d_phased(x, w, stride, padding)


def _conv_transpose2d_phased(x: np.ndarray, w: np.ndarray, s: int,
                             padding: int) -> np.ndarray:
    """Strided transposed conv as s*s stride-1 sub-convolutions.

    Output rows with the same (i + P) mod s share a sub-kernel, so each
    phase correlates the raw input directly; dilating with zeros instead
    wastes an s^2 factor of GEMM work and patch traffic."""
    k, o = w.shape[2], w.shape[1]
    b, c, h, wdt = x.shape
    ho = s * (h - 1) + k - 2 * padding
    wo = s * (wdt - 1) + k - 2 * padding
    out = np.empty((b, o, ho, wo))
    for rr in range(s):
        i0 = (rr - padding) % s
        if i0 >= ho:
            continue
        for rc in range(s):
            j0 = (rc - padding) % s
            if j0 >= wo:
                continue
            ka = len(range(rr, k, s))
            kb = len(range(rc, k, s))
            if ka == 0 or kb == 0:
                out[:, :, i0::s, j0::s] = 0.0
                continue
            nq = len(range(i0, ho, s))
            mq = len(range(j0, wo, s))
            qmin = (i0 + padding - rr) // s
            pmin = (j0 + padding - rc) // s
            lp = max(0, ka - 1 - qmin)
            tp = max(0, kb - 1 - pmin)
            rp = max(0, qmin + nq - h)
            bp = max(0, pmin + mq - wdt)
            xph = np.zeros((b, c, lp + h + rp, tp + wdt + bp))
            xph[:, :, lp:lp + h, tp:tp + wdt] = x
            r0 = qmin - (ka - 1) + lp
            c0 = pmin - (kb - 1) + tp
            slab = xph[:, :, r0:r0 + nq + ka - 1, c0:c0 + mq + kb - 1]
            wsub = w[:, :, rr::s, rc::s][:, :, ::-1, ::-1]
            wm = np.ascontiguousarray(wsub.transpose(2, 3, 0, 1)).reshape(-1, o)
            ph = np.matmul(wm.T, _im2col(slab, ka, kb, 1, nq, mq))
            out[:, :, i0::s, j0::s] = ph.reshape(o, b, nq, mq).transpose(1, 0, 2, 3)
    return out


def _conv2d_wgrad_data(x: np.ndarray, u: np.ndarray, stride: int, padding: int,
                       k: int) -> np.ndarray:
    xp = _pad2d(x, padding)
    ho, wo = u.shape[2], u.shape[3]
    u2d = u.transpose(1, 0, 2, 3).reshape(u.shape[1], -1)
    gw = np.matmul(u2d, _im2col(xp, k, k, stride, ho, wo).T)
    return np.ascontiguousarray(
        gw.reshape(u.shape[1], k, k, x.shape[1]).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Differentiable convolution primitives
# ---------------------------------------------------------------------------

def _check_conv_args(x: Tensor, w: Tensor, stride: int, padding: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv expects 4-d input/kernel, got {x.shape}, {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"kernel must be square, got {w.shape}")
    if padding > w.shape[2] - 1:
        raise ShapeMismatch("padding larger than kernel-1 is not supported")
    if stride < 1 or padding < 0:
        raise ShapeMismatch(f"bad stride/padding ({stride}, {padding})")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of B,C,H,W input with O,C,k,k kernel."""
    _check_conv_args(x, w, stride, padding)
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    k = w.shape[2]
    for d in (2, 3):
        span = x.shape[d] + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise NonIntegralOutputSize(
                f"size {x.shape[d]} with k={k} pad={padding} stride={stride}")
    data = _conv2d_data(x.data, w.data, stride, padding)
    if bias is None:
        def vjp(g):
            # skip dead slots: frozen kernels (phi) and no-grad inputs are
            # common, and targeted walks prune unused kernel gradients
            return (conv_transpose2d(g, w, stride=stride, padding=padding)
                    if x.requires_grad and _slot_needed(x) else None,
                    conv2d_wgrad(x, g, stride, padding, k)
                    if w.requires_grad and _slot_needed(w) else None)

        return Tensor._from_op(data, (x, w), vjp, "conv2d")

    # bias folded into the same node: one fewer full-size graph tensor
    data += bias.data.reshape(1, -1, 1, 1)

    def vjp_b(g):
        return (conv_transpose2d(g, w, stride=stride, padding=padding)
                if x.requires_grad and _slot_needed(x) else None,
                conv2d_wgrad(x, g, stride, padding, k)
                if w.requires_grad and _slot_needed(w) else None,
                sum_(g, axis=(0, 2, 3))
                if bias.requires_grad and _slot_needed(bias) else None)

    return Tensor._from_op(data, (x, w, bias), vjp_b, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Adjoint of conv2d for the same O,C,k,k kernel: maps O channels back to C
    and upscales by `stride`."""
    _check_conv_args(x, w, stride, padding)
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"input channels {x.shape[1]} != kernel out-channels {w.shape[0]}")
    k = w.shape[2]
    data = _conv_transpose2d_data(x.data, w.data, stride, padding)
    if bias is None:
        def vjp(g):
            return (conv2d(g, w, stride=stride, padding=padding)
                    if x.requires_grad and _slot_needed(x) else None,
                    conv2d_wgrad(g, x, stride, padding, k)
                    if w.requires_grad and _slot_needed(w) else None)

        return Tensor._from_op(data, (x, w), vjp, "conv_transpose2d")

    data += bias.data.reshape(1, -1, 1, 1)

    def vjp_b(g):
        return (conv2d(g, w, stride=stride, padding=padding)
                if x.requires_grad and _slot_needed(x) else None,
                conv2d_wgrad(g, x, stride, padding, k)
                if w.requires_grad and _slot_needed(w) else None,
                sum_(g, axis=(0, 2, 3))
                if bias.requires_grad and _slot_needed(bias) else None)

    return Tensor._from_op(data, (x, w, bias), vjp_b, "conv_transpose2d")


def conv2d_wgrad(x: Tensor, u: Tensor, stride: int, padding: int, k: int) -> Tensor:
    """Kernel gradient of conv2d(x, .) against upstream u; itself differentiable."""
    data = _conv2d_wgrad_data(x.data, u.data, stride, padding, k)

    def vjp(g):
        return (conv_transpose2d(u, g, stride=stride, padding=padding)
                if x.requires_grad and _slot_needed(x) else None,
                conv2d(x, g, stride=stride, padding=padding)
                if u.requires_grad and _slot_needed(u) else None)

    return Tensor._from_op(data, (x, u), vjp, "conv2d_wgrad")


# ---------------------------------------------------------------------------
# Activations, pooling, upsampling
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, Tensor((x.data > 0.0).astype(np.float64))),)

    return Tensor._from_op(np.maximum(x.data, 0.0), (x,), vjp, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    def vjp(g):
        return (mul(g, Tensor(np.where(x.data > 0.0, 1.0, slope))),)

    return Tensor._from_op(np.where(x.data > 0.0, x.data, slope * x.data),
                           (x,), vjp, "leaky_relu")


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 mean pooling; requires even spatial dims."""
    if x.ndim != 4:
        raise ShapeMismatch(f"avgpool2d expects B,C,H,W, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"odd spatial size {h}x{w}")
    data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (mul(upsample_nearest(g), 0.25),)

    return Tensor._from_op(data, (x,), vjp, "avgpool2d")


def upsample_nearest(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsample; gradient is the 2x2 block sum."""
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample expects B,C,H,W, got {x.shape}")
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (mul(avgpool2d(g), 4.0),)

    return Tensor._from_op(data, (x,), vjp, "upsample_nearest")


def minibatch_stddev(x: Tensor) -> Tensor:
    """Append one constant feature map holding the batch-wide mean of the
    per-position (population) standard deviation across the batch."""
    if x.ndim != 4:
        raise ShapeMismatch(f"minibatch_stddev expects B,C,H,W, got {x.shape}")
    b, _, h, w = x.shape
    if b < 2:
        raise BatchTooSmall(f"minibatch stddev needs batch >= 2, got {b}")
    centered = sub(x, mean(x, axis=0, keepdims=True))
    std = sqrt(mean(square(centered), axis=0, keepdims=True))
    scalar = mean(std)
    fmap = broadcast_to(reshape(scalar, (1, 1, 1, 1)), (b, 1, h, w))
    return concat([x, fmap], axis=1)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: Tensor, running_var: Tensor,
                eps: float = 1e-5, momentum: float = 0.1,
                training: bool = False) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with (biased) batch statistics and updates the
    running buffers in place; eval mode is a fixed affine map using the
    running buffers.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm: input {x.shape} vs {gamma.shape[0]} channels")
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DegenerateBatch("batchnorm training needs B*H*W >= 2")
        # Fused: one graph node with a handwritten first-order backward
        # instead of a ten-op chain.  The second derivative through batch
        # statistics is not built; nothing differentiates twice through a
        # training-mode norm here (the critic is norm-free).
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        running_mean.data = (1 - momentum) * running_mean.data + momentum * mu.reshape(-1)
        running_var.data = (1 - momentum) * running_var.data + momentum * var.reshape(-1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        gd = gamma.data.reshape(1, -1, 1, 1)
        data = gd * xhat + beta.data.reshape(1, -1, 1, 1)

        def vjp(go):
            dxh = go.data * gd
            t1 = dxh.sum(axis=(0, 2, 3), keepdims=True)
            t2 = (dxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv / n * (n * dxh - t1 - xhat * t2)
            return (Tensor(dx),
                    Tensor((go.data * xhat).sum(axis=(0, 2, 3))),
                    Tensor(go.data.sum(axis=(0, 2, 3))))

        return Tensor._from_op(data, (x, gamma, beta), vjp, "batchnorm2d")
    g = reshape(gamma, (1, -1, 1, 1))
    b = reshape(beta, (1, -1, 1, 1))
    rm = reshape(running_mean, (1, -1, 1, 1))
    rv = reshape(running_var, (1, -1, 1, 1))
    xhat = div(sub(x, rm), sqrt(add(rv, eps)))
    return add(mul(g, xhat), b)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container; children discovered from attributes."""

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors, name-indexed, in stable construction order."""
        return {k: v for k, v in self.state().items() if v.requires_grad}

    def state(self) -> dict[str, Tensor]:
        """All tensors (parameters and buffers such as BN running stats)."""
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.state().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.state().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def count_params(model: Module) -> int:
    """Exact count of trainable scalars."""
    return sum(p.size for p in model.parameters().values())


def freeze(model: Module) -> None:
    """Permanently mark all current parameters non-trainable (one-way; build
    a fresh instance to train again)."""
    for p in model.parameters().values():
        p.requires_grad = False


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: Rng,
                 stride: int = 1, padding: int | None = None,
                 gain: float = RELU_GAIN):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = in_ch * k * k
        std = gain / math.sqrt(fan_in)
        self.weight = Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Stride-2 k=4 pad=1 by default: doubles H and W."""

    def __init__(self, in_ch: int, out_ch: int, rng: Rng, k: int = 4,
                 stride: int = 2, padding: int = 1, gain: float = RELU_GAIN):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * k * k
        std = gain / math.sqrt(fan_in)
        # Kernel kept in the conv2d view (in_ch first) so the op is literally
        # the adjoint of a conv with the same tensor.
        self.weight = Tensor(rng.normal(0.0, std, (in_ch, out_ch, k, k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = Tensor(np.zeros(ch))
        self.running_var = Tensor(np.ones(ch))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta,
                           self.running_mean, self.running_var,
                           self.eps, self.momentum, training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng,
                 gain: float = LINEAR_GAIN):
        std = gain / math.sqrt(in_features)
        self.weight = Tensor(rng.normal(0.0, std, (in_features, out_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(x @ self.weight, self.bias)
