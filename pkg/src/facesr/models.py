"""The networks: progressive generator G, mirrored critic D, distilled
alignment network F_d, and the fixed perceptual extractor.

Channel schedules are desk-scale: G halves its width at every growth step
(floor 8) and D mirrors that, so a full step-3 iteration stays in the
single-core budget.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import (AlphaOutOfRange, BadStep, BatchTooSmall,
                     ResolutionMismatch, ShapeMismatch)
from . import nn
from .nn import Module, count_params  # re-exported; spec'd to live with models
from .tensor import Rng, Tensor, add, clamp, clamp_ste, mul, reshape

__all__ = [
    "GeneratorConfig", "FanConfig", "Generator", "Discriminator",
    "DistilledFan", "PerceptualNet", "Module", "count_params",
]


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    steps: int = 3
    in_resolution: int = 16

    def resolution(self, step: int) -> int:
        return self.in_resolution * 2 ** step

    def channels(self) -> list[int]:
        # Width after the stem, then after each upscale stage.
        ch = [self.base_channels]
        for _ in range(self.steps):
            ch.append(max(ch[-1] // 2, 8))
        return ch


@dataclass
class FanConfig:
    n_landmarks: int = 5
    heatmap_resolution: int = 64
    channels: int = 64
    depth: int = 6


def _check_step_alpha(step: int, steps: int, alpha: float) -> None:
    if not 1 <= step <= steps:
        raise BadStep(f"step {step} outside 1..{steps}")
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha {alpha} outside [0, 1]")


class ResBlock(Module):
    """Conv-BN-ReLU-Conv-BN plus identity skip, ReLU after the add."""

    def __init__(self, ch: int, rng: Rng):
        self.conv1 = nn.Conv2d(ch, ch, 3, rng)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, rng)
        self.bn2 = nn.BatchNorm2d(ch)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        h = nn.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        return nn.relu(add(x, h))


class Generator(Module):
    """Step-growing upscaler: 16x16 input, x2 resolution per step.

    Fade-in at step s blends the previous step's RGB output (nearest-upsampled)
    with the new branch; alpha endpoints bypass the unused branch entirely so
    they are bit-exact.
    """

    def __init__(self, cfg: GeneratorConfig, rng: Rng):
        self.cfg = cfg
        ch = cfg.channels()
        self.stem = nn.Conv2d(3, ch[0], 3, rng)
        self.res_blocks = [ResBlock(ch[s], rng) for s in range(cfg.steps)]
        self.ups = [nn.ConvTranspose2d(ch[s], ch[s + 1], rng) for s in range(cfg.steps)]
        self.bns = [nn.BatchNorm2d(ch[s + 1]) for s in range(cfg.steps)]
        self.to_rgbs = [nn.Conv2d(ch[s + 1], 3, 1, rng, gain=nn.LINEAR_GAIN)
                        for s in range(cfg.steps)]

    def _stage(self, h: Tensor, s: int, training: bool) -> Tensor:
        h = self.res_blocks[s](h, training)
        h = self.ups[s](h)
        return nn.relu(self.bns[s](h, training))

    def __call__(self, x: Tensor, step: int, alpha: float = 1.0,
                 training: bool = False) -> Tensor:
        _check_step_alpha(step, self.cfg.steps, alpha)
        squash = clamp_ste if training else clamp
        h = nn.relu(self.stem(x))
        for s in range(step - 1):
            h = self._stage(h, s, training)
        if step > 1 and alpha == 0.0:
            # Pure previous-step branch; the new stage is never evaluated.
            return squash(nn.upsample_nearest(self.to_rgbs[step - 2](h)), 0.0, 1.0)
        new = self.to_rgbs[step - 1](self._stage(h, step - 1, training))
        if step > 1 and alpha < 1.0:
            old = nn.upsample_nearest(self.to_rgbs[step - 2](h))
            new = add(mul(old, 1.0 - alpha), mul(new, alpha))
        return squash(new, 0.0, 1.0)


class DBlock(Module):
    """Two leaky-ReLU convs then a 2x2 average pool."""

    def __init__(self, w: int, w_next: int, rng: Rng):
        self.conv_a = nn.Conv2d(w, w, 3, rng)
        self.conv_b = nn.Conv2d(w, w_next, 3, rng)

    def __call__(self, h: Tensor) -> Tensor:
        h = nn.leaky_relu(self.conv_a(h))
        h = nn.leaky_relu(self.conv_b(h))
        return nn.avgpool2d(h)


class Discriminator(Module):
    """WGAN critic mirroring the generator's growth schedule.

    No normalization layers anywhere (the gradient penalty assumes a critic
    that treats samples independently apart from minibatch_stddev).
    """

    def __init__(self, cfg: GeneratorConfig, rng: Rng):
        self.cfg = cfg
        # critic stays narrow: it sees four passes per iteration (three in
        # the penalty alone), so its width sets the adversarial step's cost
        base = max(cfg.base_channels // 8, 4)
        cap = 4 * base
        # width[s] = channels right after fromRGB at step s; width[0] feeds
        # the final block at the input resolution.
        self.widths = [min(base * 2 ** (cfg.steps - s), cap)
                       for s in range(cfg.steps + 1)]
        self.from_rgbs = [nn.Conv2d(3, self.widths[s + 1], 1, rng)
                          for s in range(cfg.steps)]
        self.blocks = [DBlock(self.widths[s], self.widths[s - 1], rng)
                       for s in range(1, cfg.steps + 1)]
        self.final_conv = nn.Conv2d(self.widths[0] + 1, self.widths[0], 3, rng)
        self.head = nn.Linear(self.widths[0] * cfg.in_resolution ** 2, 1, rng)

    def _block(self, h: Tensor, s: int) -> Tensor:
        return self.blocks[s - 1](h)

    def __call__(self, x: Tensor, step: int, alpha: float = 1.0) -> Tensor:
        _check_step_alpha(step, self.cfg.steps, alpha)
        want = self.cfg.resolution(step)
        if x.shape[2] != want or x.shape[3] != want:
            raise ResolutionMismatch(f"step {step} wants {want}px, got {x.shape[2:]}")
        if x.shape[0] < 2:
            raise BatchTooSmall("critic needs batch >= 2 for minibatch_stddev")
        h = nn.leaky_relu(self.from_rgbs[step - 1](x))
        h = self._block(h, step)
        if step > 1 and alpha < 1.0:
            skip = nn.leaky_relu(self.from_rgbs[step - 2](nn.avgpool2d(x)))
            h = skip if alpha == 0.0 else add(mul(skip, 1.0 - alpha), mul(h, alpha))
        for s in range(step - 1, 0, -1):
            h = self._block(h, s)
        h = nn.minibatch_stddev(h)
        h = nn.leaky_relu(self.final_conv(h))
        return self.head(reshape(h, (x.shape[0], -1)))


class DistilledFan(Module):
    """Compact landmark network: strided stem, flat conv trunk, linear head.

    Input is 2x the heatmap resolution; output channels are raw heatmap
    values (normalization lives in `heatmaps`).
    """

    def __init__(self, cfg: FanConfig, rng: Rng):
        self.cfg = cfg
        # k=8 s=2: the only even-kernel stem giving an integral half-size
        # output; a 7x7 stride-2 stem has no integer padding that does.
        self.stem = nn.Conv2d(3, cfg.channels, 8, rng, stride=2, padding=3)
        self.trunk = [nn.Conv2d(cfg.channels, cfg.channels, 3, rng)
                      for _ in range(cfg.depth)]
        self.norms = [nn.BatchNorm2d(cfg.channels) for _ in range(cfg.depth)]
        self.head = nn.Conv2d(cfg.channels, cfg.n_landmarks, 1, rng,
                              gain=nn.LINEAR_GAIN)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        want = 2 * self.cfg.heatmap_resolution
        if x.ndim != 4 or x.shape[2] != want or x.shape[3] != want:
            raise ShapeMismatch(f"fan wants B,3,{want},{want}, got {x.shape}")
        h = nn.relu(self.stem(x))
        for conv, norm in zip(self.trunk, self.norms):
            h = nn.relu(norm(conv(h), training))
        return self.head(h)


class PerceptualNet:
    """Fixed random-feature extractor: two conv blocks with a pool between.

    Weights are seed-determined plain tensors (never trainable), so the
    feature distance is a valid frozen perceptual metric and gradients flow
    only to the image.  A pretrained extractor can replace this class; only
    `features` is relied upon.
    """

    def __init__(self, seed: int = 0, width: int = 16):
        rng = Rng(seed)
        self.block1 = [nn.Conv2d(3, width, 3, rng),
                       nn.Conv2d(width, width, 3, rng)]
        self.block2 = [nn.Conv2d(width, 2 * width, 3, rng),
                       nn.Conv2d(2 * width, 2 * width, 3, rng)]
        for conv in self.block1 + self.block2:
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False

    def features(self, x: Tensor) -> list[Tensor]:
        h = nn.relu(self.block1[0](x))
        f1 = nn.relu(self.block1[1](h))
        h = nn.avgpool2d(f1)
        h = nn.relu(self.block2[0](h))
        f2 = nn.relu(self.block2[1](h))
        return [f1, f2]
