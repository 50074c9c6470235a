"""Loss terms and their step-gated composition.

Conventions: pixel/perceptual/heatmap losses are plain means over every
entry; the attention loss sums over channels before averaging over pixels
and batch (so an all-ones mask reduces it to the channel-summed mean-L1
distance).  The critic pair follows the minimized WGAN-GP form.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import BadStep, NotNormalized, ShapeMismatch
from .tensor import (Rng, Tensor, abs_, grad, mean, mul, reshape, sqrt,
                     square, sub, sum_)


@dataclass
class LossWeights:
    alpha_pix: float = 1.0
    beta_feat: float = 0.1
    gamma_adv: float = 0.01
    lambda_hm: float = 1.0
    eta_attn: float = 1.0
    gp_coefficient: float = 10.0


@dataclass
class LossTerms:
    """Per-batch generator loss components (scalars with graphs)."""
    pixel: Tensor
    feat: Tensor
    adv_g: Tensor
    heatmap: Tensor | None = None
    attention: Tensor | None = None


def _check_same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name}: shapes {a.shape} vs {b.shape}")


def pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    """Mean squared difference over every batch/channel/pixel entry."""
    _check_same_shape(sr, hr, "pixel_loss")
    return mean(square(sub(sr, hr)))


def attention_loss(sr: Tensor, hr: Tensor, m_star: Tensor) -> Tensor:
    """Masked L1 distance: channel-summed, pixel- and batch-averaged.

    `m_star` may be one H,W mask shared by the batch or per-sample B,H,W /
    B,1,H,W masks; values must already be in [0, 1].
    """
    _check_same_shape(sr, hr, "attention_loss")
    m = m_star
    if m.ndim == 2:
        m = reshape(m, (1, 1) + m.shape)
    elif m.ndim == 3:
        m = reshape(m, (m.shape[0], 1) + m.shape[1:])
    if m.shape[2:] != sr.shape[2:]:
        raise ShapeMismatch(f"mask {m_star.shape} vs images {sr.shape}")
    if m.data.min() < 0.0 or m.data.max() > 1.0:
        raise NotNormalized("attention mask must lie in [0, 1]")
    b, _, h, w = sr.shape
    total = sum_(mul(m, abs_(sub(hr, sr))))
    return mul(total, 1.0 / (b * h * w))


def perceptual_loss(phi, sr: Tensor, hr: Tensor,
                    hr_feats: list[Tensor] | None = None) -> Tensor:
    """Sum over extractor blocks of the mean squared feature difference.

    `hr_feats` lets callers reuse precomputed (detached) target features;
    the hr side is a constant either way."""
    _check_same_shape(sr, hr, "perceptual_loss")
    feats_sr = phi.features(sr)
    feats_hr = hr_feats if hr_feats is not None else phi.features(hr.detach())
    out = None
    for fs, fh in zip(feats_sr, feats_hr):
        term = mean(square(sub(fs, fh)))
        out = term if out is None else out + term
    return out


def heatmap_loss(fan, sr: Tensor, hr: Tensor,
                 target_heat: Tensor | None = None) -> Tensor:
    """Mean squared difference between alignment heatmaps of SR and HR.

    `target_heat` lets callers reuse a precomputed fan(hr) constant."""
    _check_same_shape(sr, hr, "heatmap_loss")
    pred = fan(sr, training=False)
    target = target_heat if target_heat is not None \
        else fan(hr.detach(), training=False)
    return mean(square(sub(pred, target.detach())))


def wgan_gp_losses(d, real: Tensor, fake: Tensor, rng: Rng, step: int,
                   alpha: float = 1.0,
                   gp_coefficient: float = 10.0) -> tuple[Tensor, Tensor]:
    """Critic and generator WGAN losses with the two-sided gradient penalty.

    `d` is called as d(images, step, alpha).  The critic loss sees the fake
    batch detached; the generator loss keeps the live graph.  Epsilon is one
    uniform draw per sample from the supplied rng.
    """
    _check_same_shape(real, fake, "wgan_gp_losses")
    b = real.shape[0]
    eps = rng.uniform(size=(b, 1, 1, 1))
    fake_const = fake.detach()
    ihat = Tensor(eps * real.data + (1.0 - eps) * fake_const.data,
                  requires_grad=True)
    score_sum = sum_(d(ihat, step, alpha))
    # Per-sample input gradient, kept differentiable for the penalty.
    (g,) = grad(score_sum, [ihat], create_graph=True)
    norms = sqrt(sum_(square(g), axis=(1, 2, 3)))
    gp = mean(square(sub(norms, 1.0)))
    d_loss = mean(d(fake_const, step, alpha)) - mean(d(real, step, alpha)) \
        + mul(gp, gp_coefficient)
    g_loss = -mean(d(fake, step, alpha))
    return d_loss, g_loss


def total_generator_loss(step: int, terms: LossTerms, w: LossWeights) -> Tensor:
    """Weighted sum of terms; landmark terms participate only at steps 2-3."""
    if step not in (1, 2, 3):
        raise BadStep(f"step {step} outside 1..3")
    total = mul(terms.pixel, w.alpha_pix) + mul(terms.feat, w.beta_feat) \
        + mul(terms.adv_g, w.gamma_adv)
    if step == 1:
        return total
    if w.lambda_hm != 0.0:
        if terms.heatmap is None:
            raise ValueError("lambda_hm > 0 at step >= 2 needs a heatmap term")
        total = total + mul(terms.heatmap, w.lambda_hm)
    if w.eta_attn != 0.0:
        if terms.attention is None:
            raise ValueError("eta_attn > 0 at step >= 2 needs an attention term")
        total = total + mul(terms.attention, w.eta_attn)
    return total
