"""Landmark/heatmap plumbing: Gaussian rendering, min-max normalization, the
channel-max attention map, and argmax decoding.

These are value-level helpers; heatmap targets and attention masks enter the
losses as constants, so nothing here builds a backward graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotNormalized
from .tensor import Tensor, amax

# Landmark channels whose raw peak falls below this are treated as occluded.
VISIBILITY_THRESHOLD = 0.2


def default_sigma(size: int) -> float:
    """Gaussian radius in pixels: 2.0 at 64x64, scaling with resolution."""
    return 2.0 * size / 64.0


@dataclass
class LandmarkSet:
    """N landmark points as (x, y) pixel coordinates plus visibility flags."""

    points: np.ndarray
    visibility: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.visibility is None:
            self.visibility = np.ones(len(self.points), dtype=bool)
        else:
            self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        return (isinstance(other, LandmarkSet)
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.visibility, other.visibility))

    def scaled(self, factor: float) -> "LandmarkSet":
        return LandmarkSet(self.points * factor, self.visibility.copy())


@dataclass
class HeatmapStack:
    """One heatmap channel per landmark, shape N x H x W."""

    maps: Tensor
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.maps.shape


def render_gaussian(lm: LandmarkSet, res: tuple[int, int],
                    sigma: float | None = None) -> HeatmapStack:
    """Unit-peak Gaussian per visible landmark; zero channel when occluded."""
    rw, rh = res
    if sigma is None:
        sigma = default_sigma(max(rw, rh))
    ys = np.arange(rh, dtype=np.float64)[:, None]
    xs = np.arange(rw, dtype=np.float64)[None, :]
    maps = np.zeros((len(lm), rh, rw))
    inv = 1.0 / (2.0 * sigma * sigma)
    for n, ((x, y), vis) in enumerate(zip(lm.points, lm.visibility)):
        if vis:
            maps[n] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) * inv)
    return HeatmapStack(Tensor(maps), normalized=False)


def normalize_minmax(h: HeatmapStack) -> HeatmapStack:
    """Per-channel rescale to [0, 1]; constant channels become zeros."""
    m = h.maps.data
    lo = m.min(axis=(1, 2), keepdims=True)
    hi = m.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span.reshape(-1) == 0.0
    span[flat.reshape(span.shape)] = 1.0  # avoid 0/0; result is zeros anyway
    out = (m - lo) / span
    out[flat] = 0.0
    return HeatmapStack(Tensor(out), normalized=True)


def attention_map(h: HeatmapStack) -> Tensor:
    """Channel-wise max, the landmark attention mask."""
    if not h.normalized:
        raise NotNormalized("attention_map needs a normalized stack")
    return amax(h.maps, axis=0)


def extract_landmarks(h: HeatmapStack,
                      threshold: float = VISIBILITY_THRESHOLD) -> LandmarkSet:
    """Argmax decode; row-major first occurrence on ties.

    A channel whose maximum is below `threshold` is declared invisible (its
    point is reported as (0, 0) and flagged).
    """
    m = h.maps.data
    n, _, w = m.shape
    flat_idx = m.reshape(n, -1).argmax(axis=1)
    peaks = m.reshape(n, -1).max(axis=1)
    points = np.stack([flat_idx % w, flat_idx // w], axis=1).astype(np.float64)
    visible = peaks >= threshold
    points[~visible] = 0.0
    return LandmarkSet(points, visible)
