"""Training loops (progressive SR and FAN distillation), Adam, fade
schedule, and versioned binary checkpointing.

Resumability is built on stateless addressing: the batch for global
iteration k is a pure function of (seed, k), and the only stateful RNG (the
gradient-penalty epsilon stream) is checkpointed word-for-word, so a resumed
run replays the original trajectory bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, FaceBatch, PYRAMID_LEVELS
from .errors import (DivergenceDetected, EmptyManifest, MissingLandmarks,
                     ShapeMismatch, VersionMismatch, CorruptChecksum)
from .heatmaps import (HeatmapStack, attention_map, default_sigma,
                       extract_landmarks, normalize_minmax, render_gaussian)
from .losses import (LossTerms, LossWeights, attention_loss, heatmap_loss,
                     perceptual_loss, pixel_loss, total_generator_loss,
                     wgan_gp_losses)
from .metrics import MetricsReport, evaluate_pairs, nme
from .models import (Discriminator, DistilledFan, FanConfig, Generator,
                     GeneratorConfig, PerceptualNet)
from .tensor import Rng, Tensor, mean, no_grad, square, sub

# Paper-reported parameter count of the stacked-hourglass teacher the
# distilled student is measured against.
TEACHER_PARAM_REFERENCE = 23_820_176

CKPT_MAGIC = b"FSR1CKPT"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class StepConfig:
    """Knobs for one SR training run (desk-scale defaults)."""

    iterations: tuple[int, int, int] = (500, 500, 1000)
    fade_fraction: float = 0.5
    lr: float = 1e-3
    batch: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    base_channels: int = 32
    eval_every: int = 200
    eval_count: int = 8
    ckpt_every: int = 0            # 0 = checkpoint at step boundaries only

    def __post_init__(self):
        self.iterations = tuple(int(i) for i in self.iterations)
        if any(i < 0 for i in self.iterations) or sum(self.iterations) == 0:
            raise ValueError("iterations must be >= 0 and not all zero")
        if not 0.0 < self.fade_fraction <= 1.0:
            raise ValueError("fade_fraction must lie in (0, 1]")


def config_hash(cfg) -> int:
    """Stable 32-bit fingerprint of a (possibly nested) config dataclass."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return zlib.crc32(blob.encode())


def fade_alpha(iter_in_step: int, step_iters: int, fade_fraction: float,
               step: int) -> float:
    """Linear 0..1 ramp over the first `fade_fraction` of a step; step 1 has
    nothing to fade from and always returns 1."""
    if step == 1:
        return 1.0
    return min(1.0, iter_in_step / (fade_fraction * step_iters))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; parameters without a gradient
    this round are left untouched."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config_hash: int
    step: int
    iter_in_step: int
    global_iter: int
    alpha: float
    rng_words: tuple[int, ...]
    tensors: dict[str, np.ndarray]
    version: int = CKPT_VERSION


_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<u8")}


def _dtype_tag(arr: np.ndarray) -> int:
    if arr.dtype == np.float64:
        return 0
    if arr.dtype == np.uint64:
        return 1
    raise ShapeMismatch(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Atomic write: magic, header, name-indexed tensor table, crc32."""
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<IQIQQd", ckpt.version, ckpt.config_hash, ckpt.step,
                       ckpt.iter_in_step, ckpt.global_iter, ckpt.alpha)
    out += struct.pack("<6Q", *ckpt.rng_words)
    out += struct.pack("<Q", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", _dtype_tag(arr), arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(CKPT_MAGIC) + 4:
        raise CorruptChecksum(f"{path}: file too short")
    if blob[:8] != CKPT_MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptChecksum(f"{path}: checksum mismatch")
    off = 8
    try:
        version, chash, step, it, git, alpha = struct.unpack_from("<IQIQQd", body, off)
        off += struct.calcsize("<IQIQQd")
        if version != CKPT_VERSION:
            raise VersionMismatch(f"{path}: checkpoint v{version}, expected v{CKPT_VERSION}")
        rng_words = struct.unpack_from("<6Q", body, off)
        off += 48
        (count,) = struct.unpack_from("<Q", body, off)
        off += 8
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            tag, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            dtype = _DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(body[off:off + nbytes], dtype=dtype).reshape(shape)
            off += nbytes
            tensors[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise CorruptChecksum(f"{path}: malformed body") from exc
    return Checkpoint(chash, step, it, git, alpha, rng_words, tensors, version)


def _pack_states(models: dict[str, nn.Module],
                 adams: dict[str, AdamState]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for prefix, model in models.items():
        for name, t in model.state().items():
            out[f"{prefix}.{name}"] = t.data
    for prefix, st in adams.items():
        out[f"{prefix}.t"] = np.array(st.t, dtype=np.uint64)
        for name, arr in st.m.items():
            out[f"{prefix}.m.{name}"] = arr
        for name, arr in st.v.items():
            out[f"{prefix}.v.{name}"] = arr
    return out


def _unpack_states(tensors: dict[str, np.ndarray], models: dict[str, nn.Module],
                   adams: dict[str, AdamState]) -> None:
    for prefix, model in models.items():
        for name, t in model.state().items():
            t.data = tensors[f"{prefix}.{name}"].copy()
    for prefix, st in adams.items():
        st.t = int(tensors[f"{prefix}.t"])
        st.m.clear()
        st.v.clear()
        for key, arr in tensors.items():
            if key.startswith(f"{prefix}.m."):
                st.m[key[len(prefix) + 3:]] = arr.copy()
            elif key.startswith(f"{prefix}.v."):
                st.v[key[len(prefix) + 3:]] = arr.copy()


# ---------------------------------------------------------------------------
# Metric log
# ---------------------------------------------------------------------------

class MetricLog:
    """Append-only text records with full-precision float formatting."""

    def __init__(self, path: Path | None = None):
        self.lines: list[str] = []
        self._fh = open(path, "a") if path else None

    @staticmethod
    def _fmt(v) -> str:
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    def write(self, kind: str, **fields) -> None:
        line = " ".join([kind] + [f"{k}={self._fmt(v)}" for k, v in fields.items()])
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# Batch addressing and evaluation
# ---------------------------------------------------------------------------

def _nth_batch(ds: Dataset, batch_size: int, master: Rng, k: int) -> FaceBatch:
    """Batch for global iteration k as a pure function of (seed, k)."""
    n = len(ds)
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise EmptyManifest(f"dataset of {n} smaller than one batch of {batch_size}")
    epoch, off = divmod(k, per_epoch)
    order = master.derived(7, epoch).permutation(n)
    chosen = [ds.sample(i) for i in order[off * batch_size:(off + 1) * batch_size]]
    images = {level: Tensor(np.stack([s.images[level] for s in chosen]))
              for level in PYRAMID_LEVELS}
    return FaceBatch([s.id for s in chosen], images, [s.landmarks for s in chosen])


def evaluate_sr(g: Generator, step: int, ds: Dataset, count: int,
                alpha: float = 1.0) -> MetricsReport:
    """PSNR/SSIM/MS-SSIM of eval-mode SR output against the pyramid target."""
    res = g.cfg.resolution(step)
    pairs = []
    for i in range(min(count, len(ds))):
        s = ds.sample(i)
        sr = g(Tensor(s.images[16][None]), step, alpha)
        pairs.append((s.id, sr.data[0], s.images[res]))
    _, report = evaluate_pairs(pairs)
    return report


def _attention_mask_stack(batch: FaceBatch, res: int) -> Tensor:
    masks = []
    scale = res / 128.0
    for lm in batch.landmarks:
        if lm is None:
            raise MissingLandmarks("attention term needs landmarks for every sample")
        stack = render_gaussian(lm.scaled(scale), (res, res), default_sigma(res))
        masks.append(attention_map(normalize_minmax(stack)).data)
    return Tensor(np.stack(masks))


def _require_landmarks(ds: Dataset, w: LossWeights, fan) -> None:
    if w.lambda_hm == 0.0 and w.eta_attn == 0.0:
        return
    if any(r.landmarks is None for r in ds.manifest.records):
        raise MissingLandmarks("steps 2-3 with landmark terms need landmarks "
                               "for every training sample")
    if w.lambda_hm > 0.0 and fan is None:
        raise MissingLandmarks("lambda_hm > 0 needs a distilled fan")


# ---------------------------------------------------------------------------
# SR training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    g: Generator
    d: Discriminator
    log: MetricLog
    checkpoint_path: Path | None
    reports: list[tuple[int, MetricsReport]]


def build_sr_models(cfg: StepConfig) -> tuple[Generator, Discriminator]:
    master = Rng(cfg.seed)
    gen_cfg = GeneratorConfig(base_channels=cfg.base_channels)
    return (Generator(gen_cfg, master.derived(1)),
            Discriminator(gen_cfg, master.derived(2)))


def train_sr(cfg: StepConfig, train_ds: Dataset, eval_ds: Dataset | None = None,
             fan: DistilledFan | None = None, out_dir: Path | None = None,
             resume: Checkpoint | None = None,
             log: MetricLog | None = None) -> TrainResult:
    """Progressive 3-step SR training; returns models, log and checkpoint.

    With `resume`, picks up at the stored global iteration and replays the
    original run bit-exactly (same batches, same epsilon draws)."""
    master = Rng(cfg.seed)
    g, d = build_sr_models(cfg)
    eps_rng = master.derived(3)
    phi = PerceptualNet(seed=0)
    if fan is not None:
        nn.freeze(fan)
    w = cfg.weights
    chash = config_hash(cfg)
    adam_g, adam_d = AdamState(), AdamState()
    models = {"g": g, "d": d}
    if fan is not None:
        models["fan"] = fan
    adams = {"adam_g": adam_g, "adam_d": adam_d}
    start_iter = 0
    if resume is not None:
        if resume.config_hash != chash:
            raise VersionMismatch("checkpoint was written by a different config")
        _unpack_states(resume.tensors, models, adams)
        eps_rng.set_state_words(resume.rng_words)
        start_iter = resume.global_iter
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = log or MetricLog(out_dir / "train.log" if out_dir else None)
    # hr-side features/heatmaps/masks are constants per batch; a one-slot
    # cache makes small-dataset runs (overfit, smoke) nearly free.
    cache: dict = {"key": None}
    reports: list[tuple[int, MetricsReport]] = []
    ckpt_path = out_dir / "sr.ckpt" if out_dir else None

    def snapshot(step, it, k, alpha):
        return Checkpoint(chash, step, it, k, alpha,
                          tuple(eps_rng.state_words()),
                          _pack_states(models, adams))

    bounds = np.cumsum((0,) + cfg.iterations)
    for step in (1, 2, 3):
        if step >= 2:
            _require_landmarks(train_ds, w, fan)
        res = g.cfg.resolution(step)
        for it in range(cfg.iterations[step - 1]):
            k = int(bounds[step - 1]) + it
            if k < start_iter:
                continue
            if step > 1 and cfg.iterations[step - 2] == 0:
                # nothing was trained at the previous step, so there is no
                # meaningful branch to fade from
                alpha = 1.0
            else:
                alpha = fade_alpha(it, cfg.iterations[step - 1],
                                   cfg.fade_fraction, step)
            batch = _nth_batch(train_ds, cfg.batch, master, k)
            hr = batch.images[res]
            sr = g(batch.images[16], step, alpha, training=True)
            d_val = math.nan
            if w.gamma_adv != 0.0:
                d_loss, g_adv = wgan_gp_losses(d, hr, sr, eps_rng, step, alpha,
                                               w.gp_coefficient)
                d.zero_grad()
                d_loss.backward()
                adam_step(d.parameters(),
                          {n: p.grad for n, p in d.parameters().items()},
                          adam_d, cfg.lr)
                d_val = d_loss.item()
                # the penalty graph is by far the largest allocation of the
                # iteration; release it before the generator loss is built
                del d_loss
            else:
                g_adv = Tensor(0.0)
            key = (step, tuple(sorted(batch.ids)))
            if cache["key"] != key:
                # stored in id-sorted row order so any reshuffle of the same
                # samples still hits; phi and the eval-mode fan act on each
                # sample independently, so row gathers are exact
                order = np.argsort(batch.ids)
                entry = {"ids": np.asarray(batch.ids)[order],
                         "feats": [f.data[order] for f in phi.features(hr)]}
                if step >= 2 and w.eta_attn != 0.0:
                    entry["mask"] = _attention_mask_stack(batch, res).data[order]
                if step >= 2 and w.lambda_hm != 0.0:
                    with no_grad():
                        entry["heat"] = fan(batch.images[128]).data[order]
                cache.update(key=key, entry=entry)
            entry = cache["entry"]
            rows = np.searchsorted(entry["ids"], batch.ids)
            terms = LossTerms(
                pixel=pixel_loss(sr, hr),
                feat=perceptual_loss(phi, sr, hr,
                                     hr_feats=[Tensor(a[rows])
                                               for a in entry["feats"]]),
                adv_g=g_adv,
            )
            if step >= 2 and w.eta_attn != 0.0:
                terms.attention = attention_loss(sr, hr,
                                                 Tensor(entry["mask"][rows]))
            if step >= 2 and w.lambda_hm != 0.0:
                sr128 = sr if step == 3 else nn.upsample_nearest(sr)
                terms.heatmap = heatmap_loss(fan, sr128, batch.images[128],
                                             target_heat=Tensor(entry["heat"][rows]))
            total = total_generator_loss(step, terms, w)
            if not (math.isfinite(total.item())
                    and (w.gamma_adv == 0.0 or math.isfinite(d_val))):
                if ckpt_path:
                    save_checkpoint(snapshot(step, it, k, alpha),
                                    Path(str(ckpt_path) + ".diverged"))
                raise DivergenceDetected(f"non-finite loss at iteration {k}")
            g.zero_grad()
            total.backward()
            adam_step(g.parameters(),
                      {n: p.grad for n, p in g.parameters().items()},
                      adam_g, cfg.lr)
            log.write("train", iter=k, step=step, alpha=alpha, d_loss=d_val,
                      pixel=terms.pixel.item(), feat=terms.feat.item(),
                      adv=g_adv.item(),
                      hm=terms.heatmap.item() if terms.heatmap else 0.0,
                      attn=terms.attention.item() if terms.attention else 0.0,
                      total=total.item())
            done = k + 1
            if eval_ds is not None and cfg.eval_every > 0 \
                    and done % cfg.eval_every == 0:
                rep = evaluate_sr(g, step, eval_ds, cfg.eval_count, alpha)
                reports.append((done, rep))
                log.write("eval", iter=done, step=step, psnr=rep.psnr,
                          ssim=rep.ssim, ms_ssim=rep.ms_ssim)
            if ckpt_path:
                snap = None
                if cfg.ckpt_every > 0 and done % cfg.ckpt_every == 0:
                    snap = snapshot(step, it + 1, done, alpha)
                    save_checkpoint(snap, out_dir / f"sr-{done:06d}.ckpt")
                if done in bounds[1:]:
                    save_checkpoint(snap or snapshot(step, it + 1, done, alpha),
                                    ckpt_path)
    return TrainResult(g, d, log, ckpt_path, reports)


# ---------------------------------------------------------------------------
# FAN distillation
# ---------------------------------------------------------------------------

class AnalyticTeacher:
    """Default teacher: renders ground-truth Gaussians from known landmarks."""

    def __init__(self, resolution: int = 64, sigma: float | None = None):
        self.resolution = resolution
        self.sigma = sigma if sigma is not None else default_sigma(resolution)

    def __call__(self, batch: FaceBatch) -> np.ndarray:
        maps = []
        for lm in batch.landmarks:
            if lm is None:
                raise MissingLandmarks("teacher needs landmarks for every sample")
            scaled = lm.scaled(self.resolution / 128.0)
            maps.append(render_gaussian(scaled, (self.resolution,) * 2,
                                        self.sigma).maps.data)
        return np.stack(maps)


@dataclass
class DistillResult:
    fan: DistilledFan
    log: MetricLog
    hint_loss: float
    nme: float
    params: int
    teacher_params: int


def distill_nme(fan: DistilledFan, teacher, ds: Dataset, count: int) -> float:
    """Mean NME between student and teacher argmax decodes on `ds`.

    Both stacks use the same threshold-free decoder, per the shared-decoder
    convention."""
    vals = []
    res = fan.cfg.heatmap_resolution
    for i in range(min(count, len(ds))):
        s = ds.sample(i)
        batch = FaceBatch([s.id], {128: Tensor(s.images[128][None])},
                          [s.landmarks])
        with no_grad():
            pred = fan(batch.images[128])
        t_maps = teacher(batch)[0]
        # min-max rescale preserves argmax, so the shared decoder sees both
        # stacks on the same unit footing regardless of raw output range
        lm_s = extract_landmarks(normalize_minmax(HeatmapStack(Tensor(pred.data[0]))),
                                 threshold=0.0)
        lm_t = extract_landmarks(normalize_minmax(HeatmapStack(Tensor(t_maps))),
                                 threshold=0.0)
        vals.append(nme(lm_s, lm_t, res))
    return float(np.mean(vals))


def distill_fan(fan_cfg: FanConfig, train_ds: Dataset, eval_ds: Dataset,
                iterations: int, batch: int = 16, lr: float = 1e-3,
                seed: int = 0, teacher=None, out_dir: Path | None = None,
                eval_count: int = 64,
                log: MetricLog | None = None) -> DistillResult:
    """Train the compact student against a heatmap teacher (analytic GT by
    default), then report hint loss, student-vs-teacher NME, and the
    parameter ratio against the declared full-FAN reference count."""
    teacher = teacher or AnalyticTeacher(fan_cfg.heatmap_resolution)
    master = Rng(seed)
    fan = DistilledFan(fan_cfg, master.derived(4))
    adam = AdamState()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = log or MetricLog(out_dir / "distill.log" if out_dir else None)
    hint = math.nan
    for k in range(iterations):
        b = _nth_batch(train_ds, batch, master, k)
        target = Tensor(teacher(b))
        pred = fan(b.images[128], training=True)
        loss = mean(square(sub(pred, target)))
        hint = loss.item()
        if not math.isfinite(hint):
            raise DivergenceDetected(f"non-finite hint loss at iteration {k}")
        fan.zero_grad()
        loss.backward()
        adam_step(fan.parameters(),
                  {n: p.grad for n, p in fan.parameters().items()}, adam, lr)
        log.write("distill", iter=k, hint=hint)
    score = distill_nme(fan, teacher, eval_ds, eval_count)
    params = nn.count_params(fan)
    log.write("distill-eval", iters=iterations, hint=hint, nme=score,
              params=params, ratio=params / TEACHER_PARAM_REFERENCE)
    if out_dir is not None:
        ckpt = Checkpoint(config_hash(fan_cfg), 0, 0, iterations, 1.0,
                          tuple(master.derived(5).state_words()),
                          _pack_states({"fan": fan}, {"adam_fan": adam}))
        save_checkpoint(ckpt, out_dir / "fan.ckpt")
    return DistillResult(fan, log, hint, score, params, TEACHER_PARAM_REFERENCE)


def load_fan(path: Path, fan_cfg: FanConfig) -> DistilledFan:
    """Rebuild a distilled student from its checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.config_hash != config_hash(fan_cfg):
        raise VersionMismatch("fan checkpoint was written by a different config")
    fan = DistilledFan(fan_cfg, Rng(0))
    for name, t in fan.state().items():
        t.data = ckpt.tensors[f"fan.{name}"].copy()
    return fan
