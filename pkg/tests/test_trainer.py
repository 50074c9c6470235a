"""Trainer tests: fade schedule, Adam against a hand-rolled reference,
checkpoint format round-trips, and small end-to-end training runs."""

from __future__ import annotations

import copy
import math
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from facesr.data import Dataset, generate_dataset, read_manifest
from facesr.errors import (CorruptChecksum, DivergenceDetected, EmptyManifest,
                           MissingLandmarks, ShapeMismatch, VersionMismatch)
from facesr.losses import LossWeights
from facesr.models import DistilledFan, FanConfig
from facesr.tensor import Rng, Tensor
from facesr.trainer import (AdamState, AnalyticTeacher, Checkpoint, MetricLog,
                            StepConfig, TEACHER_PARAM_REFERENCE, adam_step,
                            config_hash, distill_fan, distill_nme,
                            evaluate_sr, fade_alpha, load_checkpoint,
                            load_fan, save_checkpoint, train_sr, _nth_batch)

FAN_CFG = FanConfig(channels=8, depth=1)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    paths = generate_dataset(root, 8, 4, seed=123)
    return (Dataset(read_manifest(paths["train"])),
            Dataset(read_manifest(paths["test"])))


def small_cfg(**kw):
    base = dict(iterations=(3, 3, 3), batch=2, base_channels=8,
                eval_every=0, eval_count=2, seed=7)
    base.update(kw)
    return StepConfig(**base)


def state_arrays(model):
    return {k: t.data.copy() for k, t in model.state().items()}


# ---------------------------------------------------------------------------
# Fade schedule
# ---------------------------------------------------------------------------

class TestFadeAlpha:
    def test_step_one_is_always_full(self):
        for it in (0, 1, 250, 499):
            assert fade_alpha(it, 500, 0.5, step=1) == 1.0

    def test_ramp_endpoints_and_midpoint(self):
        assert fade_alpha(0, 500, 0.5, step=2) == 0.0
        assert fade_alpha(125, 500, 0.5, step=2) == 0.5
        assert fade_alpha(250, 500, 0.5, step=2) == 1.0
        assert fade_alpha(499, 500, 0.5, step=2) == 1.0

    def test_monotone_within_step(self):
        vals = [fade_alpha(i, 40, 0.5, step=3) for i in range(40)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert vals[0] == 0.0 and vals[-1] == 1.0

    def test_full_fade_fraction_never_exceeds_one(self):
        vals = [fade_alpha(i, 10, 1.0, step=2) for i in range(10)]
        assert all(0.0 <= v <= 1.0 for v in vals)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            StepConfig(iterations=(0, 0, 0))
        with pytest.raises(ValueError):
            StepConfig(iterations=(-1, 2, 2))
        with pytest.raises(ValueError):
            StepConfig(fade_fraction=0.0)
        # individual steps may be skipped as long as something trains
        StepConfig(iterations=(0, 0, 5))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_first_update_magnitude_is_lr(self):
        lr = 1e-3
        p = Tensor(np.zeros(4), requires_grad=True)
        st = AdamState()
        adam_step({"p": p}, {"p": np.ones(4)}, st, lr)
        expect = -lr * 1.0 / (math.sqrt(1.0) + 1e-8)
        assert np.all(np.abs(p.data - expect) < 1e-18)
        assert abs(abs(p.data[0]) - lr) < 1e-8

    def test_zero_grad_is_identity_but_counts(self):
        p = Tensor(np.full(3, 2.5), requires_grad=True)
        st = AdamState()
        adam_step({"p": p}, {"p": np.zeros(3)}, st, 0.1)
        assert np.array_equal(p.data, np.full(3, 2.5))
        assert st.t == 1

    def test_missing_grad_skips_param(self):
        p = Tensor(np.ones(2), requires_grad=True)
        st = AdamState()
        adam_step({"p": p}, {"p": None}, st, 0.1)
        assert np.array_equal(p.data, np.ones(2))
        assert "p" not in st.m

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            adam_step({"p": p}, {"p": np.ones(3)}, AdamState(), 0.1)

    def test_quadratic_trajectory_matches_reference(self):
        # minimize x^2 from x=1 for 10 steps; oracle mirrors the update
        # expression with scalar floats
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in range(1, 11):
            g = 2.0 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            expected.append(x)

        p = Tensor(np.array(1.0), requires_grad=True)
        st = AdamState()
        got = []
        for _ in range(10):
            adam_step({"x": p}, {"x": np.array(2.0 * p.data)}, st, lr)
            got.append(float(p.data))
        assert np.all(np.abs(np.array(got) - np.array(expected)) <= 1e-12)

    def test_descends_on_quadratic(self):
        p = Tensor(np.array(3.0), requires_grad=True)
        st = AdamState()
        for _ in range(200):
            adam_step({"x": p}, {"x": np.array(2.0 * p.data)}, st, 0.05)
        assert abs(float(p.data)) < 0.1


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def make_ckpt():
    rng = np.random.default_rng(0)
    tensors = {
        "g.stem.weight": rng.standard_normal((4, 3, 3, 3)),
        "g.stem.bias": np.zeros(4),
        "adam_g.t": np.array(17, dtype=np.uint64),
        "scalar": np.array(math.pi),
    }
    return Checkpoint(config_hash(StepConfig()), 2, 5, 8, 0.75,
                      tuple(Rng(42).state_words()), tensors)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        ck = make_ckpt()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ck, path)
        back = load_checkpoint(path)
        assert back.version == ck.version
        assert back.config_hash == ck.config_hash
        assert (back.step, back.iter_in_step, back.global_iter) == (2, 5, 8)
        assert back.alpha == 0.75
        assert back.rng_words == ck.rng_words
        assert list(back.tensors) == list(ck.tensors)
        for k in ck.tensors:
            assert back.tensors[k].dtype == ck.tensors[k].dtype
            assert np.array_equal(back.tensors[k], ck.tensors[k])

    def test_save_load_save_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(make_ckpt(), a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_no_tmp_file_left_behind(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_ckpt(), path)
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_ckpt(), path)
        blob = path.read_bytes()
        for cut in (len(blob) - 5, len(blob) // 2, 3):
            path.write_bytes(blob[:cut])
            with pytest.raises(CorruptChecksum):
                load_checkpoint(path)

    def test_bit_flip_detected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_ckpt(), path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptChecksum):
            load_checkpoint(path)

    def test_bad_magic_is_version_error(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_ckpt(), path)
        blob = bytearray(path.read_bytes())
        blob[:8] = b"NOTACKPT"
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_future_version_rejected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_ckpt(), path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 8, 99)
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        ck = make_ckpt()
        ck.tensors["bad"] = np.zeros(3, dtype=np.int32)
        with pytest.raises(ShapeMismatch):
            save_checkpoint(ck, tmp_path / "a.ckpt")

    def test_config_hash_sensitivity(self):
        assert config_hash(StepConfig()) == config_hash(StepConfig())
        assert config_hash(StepConfig()) != config_hash(StepConfig(lr=2e-3))
        assert config_hash(StepConfig()) != config_hash(
            StepConfig(weights=LossWeights(eta_attn=0.5)))


# ---------------------------------------------------------------------------
# Batch addressing
# ---------------------------------------------------------------------------

class TestNthBatch:
    def test_deterministic_and_epoch_covering(self, tiny_data):
        train_ds, _ = tiny_data
        a = _nth_batch(train_ds, 2, Rng(5), 3)
        b = _nth_batch(train_ds, 2, Rng(5), 3)
        assert a.ids == b.ids
        assert np.array_equal(a.images[16].data, b.images[16].data)
        seen = []
        for k in range(4):          # one epoch of 8 samples at batch 2
            seen += _nth_batch(train_ds, 2, Rng(5), k).ids
        assert sorted(seen) == sorted(r.id for r in train_ds.manifest.records)

    def test_reshuffles_across_epochs(self, tiny_data):
        train_ds, _ = tiny_data
        first = [tuple(_nth_batch(train_ds, 2, Rng(5), k).ids) for k in range(4)]
        second = [tuple(_nth_batch(train_ds, 2, Rng(5), k + 4).ids) for k in range(4)]
        assert first != second

    def test_dataset_smaller_than_batch(self, tiny_data):
        _, eval_ds = tiny_data
        with pytest.raises(EmptyManifest):
            _nth_batch(eval_ds, 16, Rng(5), 0)


# ---------------------------------------------------------------------------
# End-to-end SR training
# ---------------------------------------------------------------------------

class TestTrainSR:
    def test_smoke_all_terms(self, tiny_data, tmp_path):
        train_ds, eval_ds = tiny_data
        fan = DistilledFan(FAN_CFG, Rng(99))
        before = state_arrays(fan)
        cfg = small_cfg(eval_every=3)
        res = train_sr(cfg, train_ds, eval_ds, fan=fan, out_dir=tmp_path)
        train_lines = [l for l in res.log.lines if l.startswith("train ")]
        eval_lines = [l for l in res.log.lines if l.startswith("eval ")]
        assert len(train_lines) == 9
        assert len(eval_lines) == 3
        for line in train_lines:
            vals = dict(kv.split("=") for kv in line.split()[1:])
            for key in ("d_loss", "pixel", "feat", "adv", "hm", "attn", "total"):
                assert math.isfinite(float(vals[key])), line
        # landmark terms gate off at step 1 and on afterwards
        def field(line, key):
            return float(dict(kv.split("=") for kv in line.split()[1:])[key])
        step1 = [l for l in train_lines if " step=1 " in l]
        stepn = [l for l in train_lines if " step=1 " not in l]
        assert all(field(l, "hm") == 0.0 and field(l, "attn") == 0.0 for l in step1)
        assert all(field(l, "hm") > 0.0 and field(l, "attn") > 0.0 for l in stepn)
        # frozen teacher is bit-identical after the whole run
        after = state_arrays(fan)
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert res.checkpoint_path.exists()
        assert (tmp_path / "train.log").read_text().splitlines() == res.log.lines

    def test_gamma_zero_leaves_critic_untouched(self, tiny_data):
        train_ds, _ = tiny_data
        w = LossWeights(gamma_adv=0.0, lambda_hm=0.0)
        cfg = small_cfg(iterations=(2, 2, 2), weights=w)
        res = train_sr(cfg, train_ds)
        from facesr.trainer import build_sr_models
        _, d0 = build_sr_models(cfg)
        fresh = state_arrays(d0)
        now = state_arrays(res.d)
        assert all(np.array_equal(fresh[k], now[k]) for k in fresh)
        for line in res.log.lines:
            assert " d_loss=nan " in line

    def test_seeded_runs_produce_identical_logs(self, tiny_data):
        train_ds, _ = tiny_data
        w = LossWeights(gamma_adv=0.0, lambda_hm=0.0)
        cfg = small_cfg(iterations=(2, 2, 2), weights=w)
        a = train_sr(cfg, train_ds)
        b = train_sr(cfg, train_ds)
        assert a.log.lines == b.log.lines
        sa, sb = state_arrays(a.g), state_arrays(b.g)
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_missing_landmarks_rejected_at_step_two(self, tiny_data):
        train_ds, _ = tiny_data
        man = copy.deepcopy(train_ds.manifest)
        for r in man.records:
            r.landmarks = None
        bare = Dataset(man)
        cfg = small_cfg(iterations=(1, 1, 1),
                        weights=LossWeights(gamma_adv=0.0, lambda_hm=0.0))
        with pytest.raises(MissingLandmarks):
            train_sr(cfg, bare)

    def test_heatmap_term_needs_fan(self, tiny_data):
        train_ds, _ = tiny_data
        cfg = small_cfg(iterations=(1, 1, 1),
                        weights=LossWeights(gamma_adv=0.0))
        with pytest.raises(MissingLandmarks):
            train_sr(cfg, train_ds, fan=None)

    def test_divergence_detected_and_checkpointed(self, tiny_data, tmp_path):
        train_ds, _ = tiny_data
        w = LossWeights(gamma_adv=0.0, lambda_hm=0.0, eta_attn=0.0)
        cfg = small_cfg(iterations=(3, 1, 1), weights=w, lr=1e200)
        with np.errstate(all="ignore"):
            with pytest.raises(DivergenceDetected):
                train_sr(cfg, train_ds, out_dir=tmp_path)
        assert (tmp_path / "sr.ckpt.diverged").exists()

    def test_evaluate_sr_deterministic(self, tiny_data):
        _, eval_ds = tiny_data
        from facesr.trainer import build_sr_models
        g, _ = build_sr_models(small_cfg())
        r1 = evaluate_sr(g, 2, eval_ds, 3)
        r2 = evaluate_sr(g, 2, eval_ds, 3)
        assert (r1.psnr, r1.ssim, r1.ms_ssim) == (r2.psnr, r2.ssim, r2.ms_ssim)
        assert math.isfinite(r1.psnr) and 0.0 <= r1.ssim <= 1.0
        assert r1.n_images == 3


class TestResume:
    def test_resume_replays_bit_exactly(self, tiny_data, tmp_path):
        train_ds, _ = tiny_data
        fan = DistilledFan(FAN_CFG, Rng(99))
        cfg = small_cfg(iterations=(4, 3, 3), ckpt_every=5)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        full = train_sr(cfg, train_ds, fan=fan, out_dir=out_a)

        mid = load_checkpoint(out_a / "sr-000005.ckpt")
        fan_b = DistilledFan(FAN_CFG, Rng(99))
        resumed = train_sr(cfg, train_ds, fan=fan_b, out_dir=out_b, resume=mid)

        tail = [l for l in full.log.lines if l.startswith("train ")][5:]
        got = [l for l in resumed.log.lines if l.startswith("train ")]
        assert got == tail
        sa, sb = state_arrays(full.g), state_arrays(resumed.g)
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
        da, db = state_arrays(full.d), state_arrays(resumed.d)
        assert all(np.array_equal(da[k], db[k]) for k in da)
        # the final checkpoint files agree byte for byte
        assert (out_a / "sr.ckpt").read_bytes() == (out_b / "sr.ckpt").read_bytes()

    def test_resume_rejects_other_config(self, tiny_data, tmp_path):
        train_ds, _ = tiny_data
        w = LossWeights(gamma_adv=0.0, lambda_hm=0.0)
        cfg = small_cfg(iterations=(2, 1, 1), weights=w)
        res = train_sr(cfg, train_ds, out_dir=tmp_path)
        ck = load_checkpoint(res.checkpoint_path)
        other = small_cfg(iterations=(2, 1, 1), weights=w, lr=5e-4)
        with pytest.raises(VersionMismatch):
            train_sr(other, train_ds, resume=ck)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

class TestDistill:
    def test_analytic_teacher_renders_unit_peaks(self, tiny_data):
        train_ds, _ = tiny_data
        batch = _nth_batch(train_ds, 2, Rng(5), 0)
        maps = AnalyticTeacher()(batch)
        assert maps.shape == (2, 5, 64, 64)
        # unit-peak Gaussians sampled on the grid: the nearest pixel to a
        # fractional center sits within half a pixel, so >= exp(-1/16) at
        # sigma=2
        peaks = maps.max(axis=(2, 3))
        assert np.all(peaks <= 1.0) and np.all(peaks > math.exp(-1 / 16))

    def test_hint_loss_drops(self, tiny_data):
        train_ds, eval_ds = tiny_data
        res = distill_fan(FAN_CFG, train_ds, eval_ds, iterations=30,
                          batch=4, seed=3, eval_count=4)
        first = float(res.log.lines[0].split("hint=")[1])
        assert res.hint_loss < 0.5 * first
        assert math.isfinite(res.nme) and res.nme >= 0.0
        assert res.params < 0.01 * TEACHER_PARAM_REFERENCE
        assert res.teacher_params == TEACHER_PARAM_REFERENCE

    def test_distill_nme_zero_against_self(self, tiny_data):
        _, eval_ds = tiny_data

        class Proxy:
            cfg = FAN_CFG

            def __call__(self, x, training=False):
                return Tensor(teacher(_batch_of(x)))

        teacher = AnalyticTeacher()

        def _batch_of(x):
            # rebuild the batch the teacher expects from the probe image id
            from facesr.data import FaceBatch
            s = eval_ds.sample(_batch_of.i)
            _batch_of.i += 1
            return FaceBatch([s.id], {128: x}, [s.landmarks])

        _batch_of.i = 0
        assert distill_nme(Proxy(), teacher, eval_ds, 3) == 0.0

    def test_checkpoint_roundtrip(self, tiny_data, tmp_path):
        train_ds, eval_ds = tiny_data
        res = distill_fan(FAN_CFG, train_ds, eval_ds, iterations=2, batch=2,
                          seed=3, eval_count=2, out_dir=tmp_path)
        loaded = load_fan(tmp_path / "fan.ckpt", FAN_CFG)
        probe = _nth_batch(train_ds, 2, Rng(1), 0).images[128]
        assert np.array_equal(res.fan(probe).data, loaded(probe).data)
        with pytest.raises(VersionMismatch):
            load_fan(tmp_path / "fan.ckpt", FanConfig(channels=16, depth=1))

    def test_teacher_requires_landmarks(self, tiny_data):
        train_ds, _ = tiny_data
        batch = _nth_batch(train_ds, 2, Rng(5), 0)
        batch.landmarks[0] = None
        with pytest.raises(MissingLandmarks):
            AnalyticTeacher()(batch)
