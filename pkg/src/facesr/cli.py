"""Command-line surface: data generation, distillation, training, inference,
evaluation, and gradient checking.

Configuration is a flat `key = value` text file; any key can be overridden
on the command line with repeated `--set key=value` flags, and `--seed`
outranks both.  Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (Dataset, SynthParams, generate_split, load_png,
                   read_manifest, save_png)
from .errors import (DivergenceDetected, EmptyManifest, FaceSRError,
                     ResolutionMismatch, VersionMismatch)
from .gradcheck import format_results, run_all
from .losses import LossWeights
from .metrics import (bilinear_downsample, bilinear_upsample, evaluate_pairs,
                      report_lines, resize_bilinear)
from .models import FanConfig
from .tensor import Rng, Tensor
from .trainer import (StepConfig, build_sr_models, config_hash, distill_fan,
                      load_checkpoint, load_fan, train_sr)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Flat key=value configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Union of all tunables, file- and flag-settable."""

    seed: int = 0
    iters1: int = 500
    iters2: int = 500
    iters3: int = 1000
    fade_fraction: float = 0.5
    lr: float = 1e-3
    batch: int = 16
    base_channels: int = 32
    eval_every: int = 200
    eval_count: int = 8
    ckpt_every: int = 0
    alpha_pix: float = 1.0
    beta_feat: float = 0.1
    gamma_adv: float = 0.01
    lambda_hm: float = 1.0
    eta_attn: float = 1.0
    gp_coefficient: float = 10.0
    fan_landmarks: int = 5
    fan_resolution: int = 64
    fan_channels: int = 64
    fan_depth: int = 6
    distill_iters: int = 2000
    distill_batch: int = 16
    distill_lr: float = 1e-3

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_pix, self.beta_feat, self.gamma_adv,
                           self.lambda_hm, self.eta_attn, self.gp_coefficient)

    def step_config(self) -> StepConfig:
        return StepConfig(iterations=(self.iters1, self.iters2, self.iters3),
                          fade_fraction=self.fade_fraction, lr=self.lr,
                          batch=self.batch, weights=self.weights(),
                          seed=self.seed, base_channels=self.base_channels,
                          eval_every=self.eval_every,
                          eval_count=self.eval_count,
                          ckpt_every=self.ckpt_every)

    def fan_config(self) -> FanConfig:
        return FanConfig(n_landmarks=self.fan_landmarks,
                         heatmap_resolution=self.fan_resolution,
                         channels=self.fan_channels, depth=self.fan_depth)


def _parse_kv_lines(lines, origin: str) -> dict[str, str]:
    out = {}
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{i}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = val
    return out


def load_run_config(config_path: str | None, overrides: list[str] | None,
                    seed: int | None = None) -> RunConfig:
    """Defaults, then config file, then --set pairs, then --seed."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    layers = []
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        layers.append(_parse_kv_lines(text.splitlines(), str(config_path)))
    layers.append(_parse_kv_lines(overrides or [], "--set"))
    for layer in layers:
        for key, val in layer.items():
            if key not in fields:
                raise UsageError(f"unknown config key {key!r}")
            caster = type(getattr(RunConfig, key))
            try:
                values[key] = caster(val)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {val!r}") from exc
    if seed is not None:
        values["seed"] = seed
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _validated_step_config(cfg: RunConfig) -> StepConfig:
    try:
        return cfg.step_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    params = SynthParams(aligned=args.mode == "aligned")
    rng = Rng(args.seed).derived(0 if args.split == "train" else 1)
    manifest = generate_split(Path(args.out), args.split, args.count, rng, params)
    print(f"wrote {args.count} samples, manifest {manifest}")
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    train_ds = Dataset(read_manifest(Path(args.data)))
    test_ds = Dataset(read_manifest(Path(args.test)))
    res = distill_fan(cfg.fan_config(), train_ds, test_ds,
                      iterations=cfg.distill_iters, batch=cfg.distill_batch,
                      lr=cfg.distill_lr, seed=cfg.seed, out_dir=Path(args.out))
    print(f"distilled fan: hint={res.hint_loss:.6f} nme={res.nme:.6f} "
          f"params={res.params} ({res.params / res.teacher_params:.2%} of teacher)")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    step_cfg = _validated_step_config(cfg)
    train_ds = Dataset(read_manifest(Path(args.data)))
    eval_ds = Dataset(read_manifest(Path(args.test))) if args.test else None
    fan = load_fan(Path(args.fan), cfg.fan_config()) if args.fan else None
    resume = load_checkpoint(Path(args.resume)) if args.resume else None
    res = train_sr(step_cfg, train_ds, eval_ds, fan=fan,
                   out_dir=Path(args.out), resume=resume)
    if res.reports:
        it, rep = res.reports[-1]
        print(f"final eval at iter {it}: psnr={rep.psnr:.4f} "
              f"ssim={rep.ssim:.6f} ms_ssim={rep.ms_ssim:.6f}")
    print(f"checkpoint {res.checkpoint_path}")
    return 0


def _to_16(img: np.ndarray) -> np.ndarray:
    if img.shape[1:] == (16, 16):
        return img
    return resize_bilinear(img, 16, 16)


def _nearest_up(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=1), factor, axis=2)


def cmd_sr(args, cfg: RunConfig) -> int:
    step_cfg = _validated_step_config(cfg)
    ckpt = load_checkpoint(Path(args.ckpt))
    if ckpt.config_hash != config_hash(step_cfg):
        raise VersionMismatch("checkpoint was written by a different config; "
                              "pass the matching --config/--set values")
    g, _ = build_sr_models(step_cfg)
    for name, t in g.state().items():
        t.data = ckpt.tensors[f"g.{name}"].copy()
    inputs = sorted(Path(args.input).glob("*.png"))
    if not inputs:
        raise EmptyManifest(f"no .png inputs in {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    factor = 2 ** args.step
    for path in inputs:
        lr = _to_16(load_png(path))
        sr = g(Tensor(lr[None]), args.step, 1.0).data[0]
        save_png(out_dir / f"{path.stem}_sr.png", sr)
        panels = [_nearest_up(lr, factor),
                  np.clip(bilinear_upsample(lr, factor), 0.0, 1.0), sr]
        if args.target:
            tpath = Path(args.target) / path.name
            if tpath.exists():
                target = load_png(tpath)
                if target.shape != sr.shape:
                    target = resize_bilinear(target, sr.shape[1], sr.shape[2])
                panels.append(target)
        save_png(out_dir / f"{path.stem}_strip.png",
                 np.concatenate(panels, axis=2))
    print(f"wrote {len(inputs)} super-resolved images to {out_dir}")
    return 0


def _paired_images(sr_dir: Path, ref_dir: Path):
    names = sorted(set(p.name for p in sr_dir.glob("*.png"))
                   & set(p.name for p in ref_dir.glob("*.png")))
    if not names:
        raise EmptyManifest(f"no matching .png pairs between {sr_dir} and {ref_dir}")
    for name in names:
        yield name, load_png(sr_dir / name), load_png(ref_dir / name)


def _baseline_pairs(pairs, kind: str):
    """Rebuild a (lr-upscale, ref) pair stream from the refs themselves."""
    for name, _, ref in pairs:
        size = ref.shape[1]
        steps = 0
        low = ref
        while low.shape[1] > 16:
            if low.shape[1] % 2:
                raise ResolutionMismatch(f"{name}: size {size} is not 16*2^k")
            low = bilinear_downsample(low, 2)
            steps += 1
        up = _nearest_up(low, 2 ** steps) if kind == "nearest" \
            else np.clip(bilinear_upsample(low, 2 ** steps), 0.0, 1.0)
        yield name, up, ref


def cmd_eval(args) -> int:
    sr_dir, ref_dir = Path(args.sr), Path(args.ref)
    pairs = list(_paired_images(sr_dir, ref_dir))
    for name, sr, ref in pairs:
        if sr.shape != ref.shape:
            raise ResolutionMismatch(f"{name}: sr {sr.shape} vs ref {ref.shape}")
    records, ours = evaluate_pairs(iter(pairs))
    _, bilinear = evaluate_pairs(_baseline_pairs(pairs, "bilinear"))
    _, nearest = evaluate_pairs(_baseline_pairs(pairs, "nearest"))
    lines = [f"facesr-eval n={ours.n_images}", "per-image (ours):"]
    lines += report_lines(records, ours)
    lines.append("baselines:")
    for label, rep in (("ours", ours), ("bilinear", bilinear),
                       ("nearest", nearest)):
        lines.append(f"{label}\tpsnr={rep.psnr:.4f}\tssim={rep.ssim:.6f}"
                     f"\tms_ssim={rep.ms_ssim:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(n=args.instances, seed=args.seed)
    print("\n".join(format_results(results)))
    return 0 if all(r.ok for r in results) else 3


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="override the seed")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facesr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic faces + manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--mode", choices=("aligned", "unaligned"), default="aligned")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen_data, needs_config=False)

    d = sub.add_parser("distill", help="train the compact landmark student")
    d.add_argument("--data", required=True, help="train manifest")
    d.add_argument("--test", required=True, help="test manifest")
    d.add_argument("--out", required=True)
    _add_config_flags(d)
    d.set_defaults(func=cmd_distill, needs_config=True)

    t = sub.add_parser("train", help="run progressive SR training")
    t.add_argument("--data", required=True, help="train manifest")
    t.add_argument("--test", help="eval manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--fan", help="distilled fan checkpoint")
    t.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train, needs_config=True)

    s = sub.add_parser("sr", help="super-resolve a folder of images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--step", type=int, choices=(1, 2, 3), default=3)
    s.add_argument("--target", help="folder of reference images for the strip")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sr, needs_config=True)

    e = sub.add_parser("eval", help="score SR outputs against references")
    e.add_argument("--sr", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", help="report file to write")
    e.set_defaults(func=cmd_eval, needs_config=False)

    c = sub.add_parser("gradcheck", help="finite-difference the whole engine")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck, needs_config=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:    # --help
            return int(exc.code or 0)
        if args.needs_config:
            cfg = load_run_config(args.config, args.set, args.seed)
            return args.func(args, cfg)
        return args.func(args)
    except UsageError as exc:
        print(f"facesr: usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceDetected as exc:
        print(f"facesr: numeric failure: {exc}", file=sys.stderr)
        return 3
    except FaceSRError as exc:
        print(f"facesr: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"facesr: io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
