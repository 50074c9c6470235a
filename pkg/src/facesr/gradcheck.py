"""Finite-difference verification suite behind the `gradcheck` command.

Every primitive op is checked against central differences on randomized
instances; composite entries exercise the graph machinery (layer chains,
losses, and the gradient-penalty double backward).  Inputs for kinked ops
(relu, abs, max, clamp, argmax ties) are sampled with a margin so the check
never straddles a subgradient boundary, and network entries use smooth or
provably-active parameterizations for the same reason.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .losses import attention_loss, heatmap_loss, perceptual_loss, pixel_loss
from .models import FanConfig, DistilledFan, PerceptualNet
from .tensor import (Rng, Tensor, abs_, add, amax, broadcast_to, clamp, concat,
                     div, grad, matmul, maximum, mean, minimum, mul, narrow,
                     reshape, sqrt, square, sub, sum_, transpose)

H = 1e-3
RTOL = 1e-3
ATOL = 2e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float          # max |analytic - numeric| / (rtol*scale + atol)
    ok: bool
    seconds: float


# ---------------------------------------------------------------------------
# Central differences
# ---------------------------------------------------------------------------

def _numeric_grads(f, arrays: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    grads = []
    for j, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        for idx in range(a.size):
            vals = []
            for sgn in (1.0, -1.0):
                probe = [x.copy() for x in arrays]
                probe[j].reshape(-1)[idx] += sgn * h
                vals.append(f(*[Tensor(v) for v in probe]).item())
            flat[idx] = (vals[0] - vals[1]) / (2.0 * h)
        grads.append(g)
    return grads


def _score(analytic: np.ndarray, numeric: np.ndarray,
           rtol: float, atol: float) -> float:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / (rtol * scale + atol)))


def _check_instance(f, arrays: list[np.ndarray], rtol: float, h: float) -> float:
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    f(*leaves).backward()
    worst = 0.0
    for leaf, num in zip(leaves, _numeric_grads(f, arrays, h)):
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, _score(got, num, rtol, ATOL))
    return worst


# ---------------------------------------------------------------------------
# Margin-controlled sampling
# ---------------------------------------------------------------------------

def _away(r, shape, lo=-1.0, hi=1.0, kinks=(0.0,), margin=0.08):
    """Uniform values nudged outside `margin` of every kink point."""
    x = r.uniform(lo, hi, shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + np.sign(x - k + 1e-12) * (margin + 0.05), x)
    return x


def _spread(r, shape, gap=0.06):
    """Values with pairwise gaps >= gap, order shuffled (safe argmax ties)."""
    n = int(np.prod(shape))
    base = np.arange(n) * (gap + 0.04)
    return (r.permutation(base) + r.uniform(0, 0.02, n)).reshape(shape)


def _margin_pair(r, shape):
    """(a, b) with |a - b| >= 0.1 everywhere (safe abs/max/min kinks)."""
    a = r.uniform(-1.0, 1.0, shape)
    b = a + np.where(r.uniform(size=shape) < 0.5, -1.0, 1.0) \
        * (0.1 + r.uniform(0, 0.4, shape))
    return a, b


def _activate(module_params: dict, scale=0.1, bias=0.5) -> None:
    """Shrink weights and lift biases so every relu in the net stays in its
    active half-space for [0,1] inputs; the graph topology is unchanged."""
    for name, p in module_params.items():
        if name.endswith("bias"):
            p.data = np.full_like(p.data, bias)
        else:
            p.data = p.data * scale


# ---------------------------------------------------------------------------
# Suite entries: name -> maker(r) -> (f, arrays)
# ---------------------------------------------------------------------------

def _e_arith(r):
    a, b = r.uniform(-1, 1, (3, 4)), r.uniform(-1, 1, (3, 4))
    return (lambda x, y: mean(add(mul(x, y), div(x, add(y, 3.0)))), [a, b])


def _e_matmul(r):
    return (lambda x, y: mean(square(matmul(x, y))),
            [r.uniform(-1, 1, (3, 4)), r.uniform(-1, 1, (4, 2))])


def _e_shapeops(r):
    x = r.uniform(-1, 1, (4, 6))
    def f(t):
        y = transpose(reshape(t, (6, 4)))
        parts = concat([narrow(y, 1, 0, 2), narrow(y, 1, 2, 4)], axis=1)
        return sum_(square(parts))
    return f, [x]


def _e_reduce(r):
    x = r.uniform(-1, 1, (2, 3, 4))
    return (lambda t: sum_(square(mean(t, axis=(0, 2), keepdims=True)))
            + mean(square(sum_(t, axis=1))), [x])


def _e_broadcast(r):
    x, y = r.uniform(-1, 1, (1, 4)), r.uniform(-1, 1, (3, 4))
    return (lambda a, b: mean(square(mul(broadcast_to(a, (3, 4)), b))), [x, y])


def _e_amax(r):
    x = _spread(r, (3, 8))
    return (lambda t: mean(square(amax(t, axis=1))), [x])


def _e_abs_max_min(r):
    a, b = _margin_pair(r, (3, 5))
    return (lambda x, y: mean(add(abs_(x), sub(maximum(x, y), minimum(x, y)))),
            [a, b])


def _e_clamp(r):
    x = _away(r, (4, 5), lo=-0.5, hi=1.5, kinks=(0.0, 1.0))
    return (lambda t: mean(square(clamp(t, 0.0, 1.0))), [x])


def _e_sqrt(r):
    x = r.uniform(0.1, 2.0, (3, 4))
    return (lambda t: mean(mul(sqrt(t), 2.0)), [x])


def _e_relu(r):
    x = _away(r, (2, 3, 4, 4))
    return (lambda t: mean(square(nn.relu(t))), [x])


def _e_leaky(r):
    x = _away(r, (2, 3, 4, 4))
    return (lambda t: mean(square(nn.leaky_relu(t))), [x])


def _e_conv_s1(r):
    x = r.uniform(-1, 1, (2, 2, 5, 5))
    w = r.uniform(-0.5, 0.5, (3, 2, 3, 3))
    b = r.uniform(-0.5, 0.5, 3)
    return (lambda xx, ww, bb: mean(square(nn.conv2d(xx, ww, bb))), [x, w, b])


def _e_conv_s2(r):
    x = r.uniform(-1, 1, (1, 2, 6, 6))
    w = r.uniform(-0.5, 0.5, (2, 2, 4, 4))
    return (lambda xx, ww: mean(square(nn.conv2d(xx, ww, stride=2, padding=1))),
            [x, w])


def _e_convtrans(r):
    x = r.uniform(-1, 1, (1, 2, 3, 3))
    w = r.uniform(-0.5, 0.5, (2, 3, 4, 4))
    b = r.uniform(-0.5, 0.5, 3)
    return (lambda xx, ww, bb:
            mean(square(nn.conv_transpose2d(xx, ww, bb, stride=2, padding=1))),
            [x, w, b])


def _e_pool_upsample(r):
    x = r.uniform(-1, 1, (2, 2, 4, 4))
    return (lambda t: mean(square(nn.upsample_nearest(nn.avgpool2d(t)))), [x])


def _e_batchnorm(r):
    x = r.uniform(-1, 1, (3, 2, 4, 4))
    gamma = r.uniform(0.5, 1.5, 2)
    beta = r.uniform(-0.5, 0.5, 2)
    def f(xx, gg, bb):
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        return mean(square(nn.batchnorm2d(xx, gg, bb, rm, rv, training=True)))
    return f, [x, gamma, beta]


def _e_mbstd(r):
    x = r.uniform(-1, 1, (3, 2, 4, 4))
    return (lambda t: mean(square(nn.minibatch_stddev(t))), [x])


def _e_stage_chain(r):
    # conv -> bn -> square -> transposed conv: smooth end to end
    x = r.uniform(0, 1, (2, 2, 4, 4))
    w1 = r.uniform(-0.5, 0.5, (3, 2, 3, 3))
    w2 = r.uniform(-0.5, 0.5, (3, 2, 4, 4))
    def f(xx, ww1, ww2):
        h = nn.conv2d(xx, ww1)
        rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
        h = nn.batchnorm2d(h, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                           rm, rv, training=True)
        return mean(square(nn.conv_transpose2d(square(h), ww2,
                                               stride=2, padding=1)))
    return f, [x, w1, w2]


def _e_pixel_attention(r):
    sr, hr = _margin_pair(r, (2, 3, 4, 4))
    mask = r.uniform(0, 1, (4, 4))
    return (lambda s, h: add(pixel_loss(s, h),
                             attention_loss(s, h, Tensor(mask))), [sr, hr])


def _e_perceptual(r):
    phi = PerceptualNet(seed=int(r.integers(1 << 30)), width=4)
    for blk in (phi.block1, phi.block2):
        for layer in blk:
            _activate({"w": layer.weight, "bias": layer.bias})
    sr = r.uniform(0.2, 0.8, (1, 3, 8, 8))
    hr = r.uniform(0.2, 0.8, (1, 3, 8, 8))
    return (lambda s: perceptual_loss(phi, s, Tensor(hr)), [sr])


def _e_heatmap(r):
    cfg = FanConfig(n_landmarks=2, heatmap_resolution=4, channels=3, depth=1)
    fan = DistilledFan(cfg, Rng(int(r.integers(1 << 30))))
    _activate(fan.parameters())
    for name, t in fan.state().items():
        if name.endswith("running_mean"):
            t.data = np.full_like(t.data, 0.1)
        elif name.endswith("running_var"):
            t.data = np.full_like(t.data, 2.0)
    sr = r.uniform(0.2, 0.8, (1, 3, 8, 8))
    hr = r.uniform(0.2, 0.8, (1, 3, 8, 8))
    return (lambda s: heatmap_loss(fan, s, Tensor(hr)), [sr])


def _e_gp_double_backward(r):
    """Critic loss with gradient penalty, differentiated w.r.t. critic
    weights: the penalty itself contains a gradient, so this finite-differences
    through a double backward."""
    real = r.uniform(0, 1, (2, 3, 4, 4))
    fake = r.uniform(0, 1, (2, 3, 4, 4))
    eps = r.uniform(0, 1, (2, 1, 1, 1))
    ivals = eps * real + (1.0 - eps) * fake

    def score(x, w1, w2):
        h = square(nn.conv2d(x, w1))                 # smooth activation
        h = nn.minibatch_stddev(h)
        return sum_(nn.conv2d(h, w2, padding=0), axis=(1, 2, 3))

    def f(w1, w2):
        i_hat = Tensor(ivals.copy(), requires_grad=True)
        g = grad(sum_(score(i_hat, w1, w2)), [i_hat], create_graph=True)[0]
        norms = sqrt(sum_(square(g), axis=(1, 2, 3)))
        gp = mean(square(sub(norms, 1.0)))
        wdist = sub(mean(score(Tensor(fake), w1, w2)),
                    mean(score(Tensor(real), w1, w2)))
        return add(wdist, mul(gp, 10.0))

    w1 = r.uniform(-0.5, 0.5, (2, 3, 3, 3))
    w2 = r.uniform(-0.5, 0.5, (1, 3, 1, 1))
    return f, [w1, w2]


ENTRIES = [
    ("arith", _e_arith),
    ("matmul", _e_matmul),
    ("reshape-transpose-narrow-concat", _e_shapeops),
    ("sum-mean-axes", _e_reduce),
    ("broadcast", _e_broadcast),
    ("amax", _e_amax),
    ("abs-maximum-minimum", _e_abs_max_min),
    ("clamp", _e_clamp),
    ("sqrt", _e_sqrt),
    ("relu", _e_relu),
    ("leaky-relu", _e_leaky),
    ("conv2d-s1k3", _e_conv_s1),
    ("conv2d-s2k4", _e_conv_s2),
    ("conv-transpose-s2k4", _e_convtrans),
    ("avgpool-upsample", _e_pool_upsample),
    ("batchnorm-train", _e_batchnorm),
    ("minibatch-stddev", _e_mbstd),
    ("stage-chain", _e_stage_chain),
    ("pixel-attention-loss", _e_pixel_attention),
    ("perceptual-loss", _e_perceptual),
    ("heatmap-loss", _e_heatmap),
    ("wgan-gp-double-backward", _e_gp_double_backward),
]


def run_all(n: int = 20, seed: int = 0, rtol: float = RTOL,
            h: float = H) -> list[CheckResult]:
    results = []
    for name, maker in ENTRIES:
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(n):
            f, arrays = maker(np.random.default_rng((seed, i)))
            worst = max(worst, _check_instance(f, arrays, rtol, h))
        results.append(CheckResult(name, n, worst, worst <= 1.0,
                                   time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> list[str]:
    lines = []
    for res in results:
        verdict = "pass" if res.ok else "FAIL"
        lines.append(f"{verdict}  {res.name:<34} n={res.instances:<3} "
                     f"worst={res.worst:.3e}  ({res.seconds:.1f}s)")
    lines.append(f"{'all pass' if all(r.ok for r in results) else 'FAILURES'}"
                 f"  ({len(results)} checks)")
    return lines
