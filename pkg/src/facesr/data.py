"""Data pipeline: procedural synthetic faces with exact landmarks, the
128/64/32/16 bilinear pyramid, PNG+manifest persistence, folder ingestion,
and the deterministic batch stream.

Synthetic faces stand in for the aligned/unaligned photo datasets: a head
ellipse with eye disks, a nose wedge and a mouth arc, all drawn from jittered
parameters, so the five landmarks (eyes, nose tip, mouth corners) are known
analytically rather than annotated.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (EmptyManifest, MalformedLandmarkRecord, ShapeMismatch,
                     UnreadableImage, VersionMismatch)
from .heatmaps import LandmarkSet
from .metrics import resize_bilinear
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PYRAMID_LEVELS = (128, 64, 32, 16)
N_LANDMARKS = 5


# ---------------------------------------------------------------------------
# Synthetic faces
# ---------------------------------------------------------------------------

@dataclass
class SynthParams:
    size: int = 128
    aligned: bool = True
    noise: float = 0.02


@dataclass
class FaceSample:
    id: str
    images: dict[int, np.ndarray]          # level -> 3,H,W float64 in [0,1]
    landmarks: LandmarkSet | None          # at 128-pixel scale


def build_pyramid(img128: np.ndarray) -> dict[int, np.ndarray]:
    """Successive 2x bilinear downsampling: 128 -> 64 -> 32 -> 16."""
    img128 = np.asarray(img128, dtype=np.float64)
    if img128.shape[-2:] != (128, 128):
        raise ShapeMismatch(f"pyramid base must be 128x128, got {img128.shape}")
    levels = {128: img128}
    for size in PYRAMID_LEVELS[1:]:
        prev = levels[size * 2]
        levels[size] = resize_bilinear(prev, size, size)
    return levels


def synth_face(rng: Rng, params: SynthParams | None = None,
               sample_id: str | None = None) -> FaceSample:
    """One procedural face with its five analytic landmarks."""
    p = params or SynthParams()
    s = p.size
    if sample_id is None:
        sample_id = f"synth-{int(rng.integers(0, 2 ** 32)):010d}"
    # Pose jitter; unaligned mode rotates and shifts much harder.
    if p.aligned:
        theta = 0.0
        cx = s / 2 + rng.uniform(-3, 3)
        cy = s / 2 + rng.uniform(-3, 3)
    else:
        theta = rng.uniform(-0.45, 0.45)
        cx = s / 2 + rng.uniform(-10, 10)
        cy = s / 2 + rng.uniform(-10, 10)
    a = s * rng.uniform(0.27, 0.33)          # head half-width
    b = s * rng.uniform(0.36, 0.42)          # head half-height
    skin = rng.uniform(0.65, 0.85)
    bg = rng.uniform(0.15, 0.35)
    eye_u = a * rng.uniform(0.38, 0.46)
    eye_v = -b * rng.uniform(0.24, 0.32)
    eye_r = a * rng.uniform(0.10, 0.14)
    nose_u = a * rng.uniform(-0.04, 0.04)
    nose_v = b * rng.uniform(0.10, 0.20)
    mouth_v = b * rng.uniform(0.45, 0.58)
    mouth_w = a * rng.uniform(0.40, 0.50)
    mouth_t = s * rng.uniform(0.015, 0.03)
    curve = rng.uniform(-4.0, 4.0)
    tint = rng.uniform(0.9, 1.0, size=3)

    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    du, dv = xs - cx, ys - cy
    u = cos_t * du + sin_t * dv              # head-frame coordinates
    v = -sin_t * du + cos_t * dv

    def blend(img, value, alpha):
        return img * (1.0 - alpha) + value * alpha

    def soft(dist, edge):
        # 1 inside (dist <= 0), 0 outside, linear ramp of width `edge`.
        return np.clip(1.0 - dist / edge, 0.0, 1.0)

    gray = np.full((s, s), bg)
    head_q = (u / a) ** 2 + (v / b) ** 2
    gray = blend(gray, skin, soft(head_q - 1.0, 0.08))
    for side in (-1, 1):
        d = np.hypot(u - side * eye_u, v - eye_v) - eye_r
        gray = blend(gray, 0.12, soft(d / eye_r, 0.15))
    nose_top = eye_v * 0.3
    span = np.clip((v - nose_top) / (nose_v - nose_top), 0.0, 1.0)
    nose_d = np.abs(u - nose_u) - 0.10 * a * span
    nose_mask = soft(nose_d / a, 0.05) * (span > 0) * (span < 1)
    gray = blend(gray, 0.5, nose_mask)
    arc_v = mouth_v + curve * (u / a) ** 2
    mouth_d = np.maximum(np.abs(v - arc_v) - mouth_t, np.abs(u) - mouth_w)
    gray = blend(gray, 0.2, soft(mouth_d / mouth_t, 0.3))
    gray = np.clip(gray + p.noise * rng.normal(size=(s, s)), 0.0, 1.0)
    img = np.clip(gray[None] * tint[:, None, None], 0.0, 1.0)

    def to_image(uu, vv):
        return (cx + cos_t * uu - sin_t * vv, cy + sin_t * uu + cos_t * vv)

    corner_v = mouth_v + curve * (mouth_w / a) ** 2
    pts = [to_image(-eye_u, eye_v), to_image(eye_u, eye_v),
           to_image(nose_u, nose_v),
           to_image(-mouth_w, corner_v), to_image(mouth_w, corner_v)]
    lm = LandmarkSet(np.array(pts) * (128.0 / s))
    return FaceSample(sample_id, build_pyramid(img if s == 128 else
                                               resize_bilinear(img, 128, 128)), lm)


# ---------------------------------------------------------------------------
# PNG and manifest persistence
# ---------------------------------------------------------------------------

def save_png(path: Path, img: np.ndarray) -> None:
    """Write a 3,H,W [0,1] array as 8-bit RGB."""
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise UnreadableImage(str(path)) from exc
    return arr.transpose(2, 0, 1) / 255.0


@dataclass
class ManifestRecord:
    id: str
    path: str                     # relative to the manifest's directory
    landmarks: LandmarkSet | None


@dataclass
class DatasetManifest:
    root: Path
    split: str = "train"
    version: int = MANIFEST_VERSION
    records: list[ManifestRecord] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)


def _format_record(rec: ManifestRecord) -> str:
    if rec.landmarks is None:
        return f"sample {rec.id} {rec.path} none"
    coords = " ".join(f"{c:.6f}" for c in rec.landmarks.points.reshape(-1))
    vis = " ".join(str(int(v)) for v in rec.landmarks.visibility)
    return f"sample {rec.id} {rec.path} {coords} {vis}"


def write_manifest(manifest: DatasetManifest, path: Path | None = None) -> Path:
    path = path or manifest.root / "manifest.txt"
    lines = [f"facesr-manifest v{manifest.version}", f"split {manifest.split}"]
    lines += [_format_record(r) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("facesr-manifest v"):
        raise MalformedLandmarkRecord(f"{path}: missing manifest header")
    version = int(lines[0].split("v")[-1])
    if version != MANIFEST_VERSION:
        raise VersionMismatch(f"manifest v{version}, expected v{MANIFEST_VERSION}")
    manifest = DatasetManifest(root=path.parent, version=version)
    seen: set[str] = set()
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "split":
            manifest.split = parts[1]
            continue
        if parts[0] != "sample":
            raise MalformedLandmarkRecord(f"{path}: bad line {ln!r}")
        if len(parts) == 4 and parts[3] == "none":
            lm = None
        elif len(parts) == 3 + 3 * N_LANDMARKS:
            try:
                vals = [float(x) for x in parts[3:3 + 2 * N_LANDMARKS]]
                vis = [bool(int(x)) for x in parts[3 + 2 * N_LANDMARKS:]]
            except ValueError as exc:
                raise MalformedLandmarkRecord(f"{path}: bad line {ln!r}") from exc
            lm = LandmarkSet(np.array(vals).reshape(-1, 2), np.array(vis))
        else:
            raise MalformedLandmarkRecord(f"{path}: bad field count in {ln!r}")
        if parts[1] in seen:
            raise MalformedLandmarkRecord(f"{path}: duplicate id {parts[1]}")
        seen.add(parts[1])
        manifest.records.append(ManifestRecord(parts[1], parts[2], lm))
    return manifest


def generate_split(out_dir: Path, split: str, count: int, rng: Rng,
                   params: SynthParams | None = None) -> Path:
    """Write one split of synthetic faces under out_dir/split; returns the
    manifest path."""
    split_dir = Path(out_dir) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=split_dir, split=split)
    for i in range(count):
        sample = synth_face(rng, params, sample_id=f"{split}-{i:06d}")
        name = f"{sample.id}.png"
        save_png(split_dir / name, sample.images[128])
        manifest.records.append(ManifestRecord(sample.id, name, sample.landmarks))
    return write_manifest(manifest)


def generate_dataset(out_dir: Path, n_train: int, n_test: int, seed: int,
                     params: SynthParams | None = None) -> dict[str, Path]:
    """Write train/ and test/ splits of synthetic faces; returns manifest paths."""
    return {split: generate_split(out_dir, split, count, Rng(seed).derived(key), params)
            for split, count, key in (("train", n_train, 0), ("test", n_test, 1))}


# ---------------------------------------------------------------------------
# Folder ingestion
# ---------------------------------------------------------------------------

def _read_sidecar(path: Path) -> dict[str, LandmarkSet]:
    out: dict[str, LandmarkSet] = {}
    for ln in path.read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 1 + 3 * N_LANDMARKS:
            raise MalformedLandmarkRecord(f"{path}: bad field count in {ln!r}")
        try:
            vals = [float(x) for x in parts[1:1 + 2 * N_LANDMARKS]]
            vis = [bool(int(x)) for x in parts[1 + 2 * N_LANDMARKS:]]
        except ValueError as exc:
            raise MalformedLandmarkRecord(f"{path}: bad line {ln!r}") from exc
        out[parts[0]] = LandmarkSet(np.array(vals).reshape(-1, 2), np.array(vis))
    return out


def transform_point(x: float, y: float, w0: int, h0: int) -> tuple[float, float]:
    """Map source-image coordinates through center-crop + resize-to-128."""
    side = min(w0, h0)
    x0, y0 = (w0 - side) // 2, (h0 - side) // 2
    scale = 128.0 / side
    # Pixel-center convention, matching the bilinear resample.
    return ((x - x0 + 0.5) * scale - 0.5, (y - y0 + 0.5) * scale - 0.5)


def ingest_folder(src: Path, out_dir: Path,
                  landmark_file: Path | None = None,
                  split: str = "test") -> DatasetManifest:
    """Center-crop and resize every PNG in `src` to 128x128.

    Landmarks from the optional sidecar are carried through the same affine;
    points that land outside the frame are marked invisible.  Unreadable
    images are skipped and counted."""
    src, out_dir = Path(src), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = _read_sidecar(Path(landmark_file)) if landmark_file else {}
    manifest = DatasetManifest(root=out_dir, split=split)
    for path in sorted(src.glob("*.png")):
        try:
            img = load_png(path)
        except UnreadableImage:
            log.warning("skipping unreadable image %s", path)
            manifest.skipped += 1
            continue
        _, h0, w0 = img.shape
        side = min(w0, h0)
        x0, y0 = (w0 - side) // 2, (h0 - side) // 2
        crop = img[:, y0:y0 + side, x0:x0 + side]
        out = np.clip(resize_bilinear(crop, 128, 128), 0.0, 1.0)
        stem = path.stem
        lm = None
        if stem in sidecar:
            raw = sidecar[stem]
            pts = np.array([transform_point(x, y, w0, h0) for x, y in raw.points])
            inside = ((pts[:, 0] >= 0) & (pts[:, 0] < 128)
                      & (pts[:, 1] >= 0) & (pts[:, 1] < 128))
            lm = LandmarkSet(pts, raw.visibility & inside)
        name = f"{stem}.png"
        save_png(out_dir / name, out)
        manifest.records.append(ManifestRecord(stem, name, lm))
    write_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# Batch stream
# ---------------------------------------------------------------------------

class Dataset:
    """Lazy PNG-backed sample access with a bounded decode cache."""

    def __init__(self, manifest: DatasetManifest, cache_size: int = 512):
        self.manifest = manifest
        self.cache_size = cache_size
        self._cache: OrderedDict[int, FaceSample] = OrderedDict()

    def __len__(self) -> int:
        return len(self.manifest)

    def sample(self, index: int) -> FaceSample:
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        rec = self.manifest.records[index]
        img = load_png(self.manifest.root / rec.path)
        if img.shape[-2:] != (128, 128):
            raise ShapeMismatch(f"{rec.path}: expected 128x128, got {img.shape}")
        out = FaceSample(rec.id, build_pyramid(img), rec.landmarks)
        self._cache[index] = out
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return out


@dataclass
class FaceBatch:
    ids: list[str]
    images: dict[int, Tensor]              # level -> B,3,H,W
    landmarks: list[LandmarkSet | None]


def batch_iter(dataset: Dataset, batch_size: int, rng: Rng,
               shuffle: bool = True):
    """One epoch of batches; the trailing partial batch is dropped.

    Pass an epoch-derived rng (e.g. `master.derived(epoch)`) to make the
    order a pure function of (seed, epoch), independent of prior draws."""
    n = len(dataset)
    if n == 0:
        raise EmptyManifest("dataset has no samples")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n - batch_size + 1, batch_size):
        chosen = [dataset.sample(i) for i in order[start:start + batch_size]]
        images = {
            level: Tensor(np.stack([s.images[level] for s in chosen]))
            for level in PYRAMID_LEVELS
        }
        yield FaceBatch([s.id for s in chosen], images,
                        [s.landmarks for s in chosen])
