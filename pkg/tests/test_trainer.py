"""Schedule arithmetic, freeze contract, determinism, resumability."""

import json
import os

import numpy as np
import pytest

from jooci.data import generate_corpus
from jooci.labels import TeacherOracle, build_label_store
from jooci.model import JoociModel, ModelConfig, load_checkpoint
from jooci.trainer import (Adam, StageConfig, lr_at, run_pretraining,
                           train_step)
from test_model import tiny_config


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    corpus = generate_corpus(3, 3, 4, seed=1, utt_seconds=(1.2, 1.6))
    store = build_label_store(corpus, cfg.content_layers, cfg.vocab_size,
                              cfg.num_label_sets, seed=1, iters=8)
    teacher = TeacherOracle(dim=cfg.teacher_dim, noise_scale=0.05, seed=1)
    return cfg, corpus, store, teacher


class TestLrSchedule:
    CFG = StageConfig(steps=100, lr_peak=1e-3, warmup_steps=20, content_frozen=False)

    def test_step_zero(self):
        assert lr_at(0, self.CFG) == 0.0

    def test_peak_at_warmup_boundary(self):
        assert lr_at(20, self.CFG) == 1e-3

    def test_half_peak_mid_decay(self):
        assert lr_at(60, self.CFG) == pytest.approx(5e-4, rel=1e-12)

    def test_zero_at_end(self):
        assert lr_at(100, self.CFG) == 0.0

    def test_piecewise_linear_continuous(self):
        vals = [lr_at(s, self.CFG) for s in range(101)]
        assert max(vals) == 1e-3
        diffs = np.diff(vals)
        assert np.all(diffs[:20] > 0) and np.all(diffs[20:] < 0)


def _one_batch(corpus, seconds=8.0, crop=1.0, seed=0):
    from jooci.data import make_batches
    return make_batches(corpus, seconds, crop, seed)[0]


class TestTrainStep:
    def test_zero_lr_leaves_params_unchanged(self, setup):
        cfg, corpus, store, teacher = setup
        model = JoociModel(cfg, seed=0)
        opt = Adam(list(model.named_parameters()))
        stage = StageConfig(steps=10, lr_peak=1e-3, warmup_steps=5, content_frozen=False)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        breakdown = train_step(model, _one_batch(corpus), store, teacher, opt,
                               stage, step_in_stage=0,
                               mask_rng=np.random.default_rng(0))
        # step 0 of the warmup has lr exactly 0
        assert np.isfinite(breakdown.total)
        for n, p in model.named_parameters():
            np.testing.assert_array_equal(before[n], p.data, err_msg=n)

    def test_freeze_contract_bitwise(self, setup):
        cfg, corpus, store, teacher = setup
        model = JoociModel(cfg, seed=0)
        opt = Adam(list(model.named_parameters()))
        stage = StageConfig(steps=10, lr_peak=5e-3, warmup_steps=0, content_frozen=True)
        content_before = {n: p.data.copy() for n, p in model.named_parameters()
                          if n.startswith("content.")}
        rest_before = {n: p.data.copy() for n, p in model.named_parameters()
                       if not n.startswith("content.")}
        for step in range(2):
            train_step(model, _one_batch(corpus, seed=step), store, teacher, opt,
                       stage, step, np.random.default_rng(step))
        for n, p in model.named_parameters():
            if n.startswith("content."):
                np.testing.assert_array_equal(content_before[n], p.data, err_msg=n)
        moved = [n for n, p in model.named_parameters()
                 if not n.startswith("content.") and not np.array_equal(rest_before[n], p.data)]
        assert moved, "non-content parameters should update"

    def test_total_identity_each_step(self, setup):
        cfg, corpus, store, teacher = setup
        model = JoociModel(cfg, seed=2)
        opt = Adam(list(model.named_parameters()))
        stage = StageConfig(steps=5, lr_peak=1e-3, warmup_steps=0, content_frozen=False)
        for step in range(3):
            b = train_step(model, _one_batch(corpus, seed=step), store, teacher, opt,
                           stage, step, np.random.default_rng(step))
            lhs = np.float32(np.float32(b.cl) + np.float32(b.ol)) + \
                np.float32(b.rl) / np.float32(10)
            assert np.float32(b.total) == lhs


class TestRunPretraining:
    def _stages(self, s1=4, s2=4):
        return [StageConfig(steps=s1, lr_peak=3e-3, warmup_steps=min(2, s1),
                            content_frozen=True, seconds_per_step=4.0),
                StageConfig(steps=s2, lr_peak=1e-3, warmup_steps=min(1, s2),
                            content_frozen=False, seconds_per_step=4.0)]

    def test_zero_steps_emits_initial_checkpoint_only(self, setup, tmp_path):
        cfg, corpus, store, teacher = setup
        model = JoociModel(cfg, seed=0)
        result = run_pretraining(model, self._stages(0, 0), corpus, store, teacher,
                                 str(tmp_path / "run0"), seed=0, crop_seconds=1.0)
        assert os.path.basename(result.final_checkpoint) == "ckpt_final.npz"
        ckpts = [f for f in os.listdir(tmp_path / "run0") if f.startswith("ckpt")]
        assert ckpts == ["ckpt_final.npz"]
        assert load_checkpoint(result.final_checkpoint).step == 0

    def test_identical_seeds_identical_logs(self, setup, tmp_path):
        cfg, corpus, store, teacher = setup

        def run(tag):
            model = JoociModel(cfg, seed=4)
            result = run_pretraining(model, self._stages(), corpus, store, teacher,
                                     str(tmp_path / tag), seed=11, crop_seconds=1.0)
            with open(result.metrics_path) as fh:
                return fh.read()

        assert run("a") == run("b")

    def test_resume_reproduces_trajectory(self, setup, tmp_path):
        cfg, corpus, store, teacher = setup
        stages = self._stages(3, 3)

        model = JoociModel(cfg, seed=9)
        full = run_pretraining(model, stages, corpus, store, teacher,
                               str(tmp_path / "full"), seed=21, crop_seconds=1.0,
                               ckpt_every=2)

        ckpt = load_checkpoint(str(tmp_path / "full" / "ckpt_000002.npz"))
        resumed_model = JoociModel(cfg, seed=9)
        ckpt.restore_model(resumed_model)
        opt = Adam(list(resumed_model.named_parameters()))
        opt.load_state(ckpt.optimizer_state())
        resumed = run_pretraining(resumed_model, stages, corpus, store, teacher,
                                  str(tmp_path / "resumed"), seed=21, crop_seconds=1.0,
                                  resume_step=ckpt.step, resume_stage=ckpt.stage,
                                  opt=opt)
        full_tail = [b.total for b in full.history[2:]]
        resumed_tail = [b.total for b in resumed.history]
        assert full_tail == resumed_tail
        a = load_checkpoint(full.final_checkpoint)
        b = load_checkpoint(resumed.final_checkpoint)
        for key in a.arrays:
            if key.startswith("param::"):
                np.testing.assert_array_equal(a.arrays[key], b.arrays[key], err_msg=key)

    def test_metrics_log_schema(self, setup, tmp_path):
        cfg, corpus, store, teacher = setup
        model = JoociModel(cfg, seed=0)
        result = run_pretraining(model, self._stages(2, 0), corpus, store, teacher,
                                 str(tmp_path / "log"), seed=0, crop_seconds=1.0)
        with open(result.metrics_path) as fh:
            lines = [json.loads(l) for l in fh]
        assert len(lines) == 2
        for rec in lines:
            assert {"step", "stage", "cl", "ol", "rl", "total",
                    "per_layer_mpl", "lr"} <= set(rec)


class TestDivergenceGuard:
    def test_nan_loss_aborts_with_diagnostics(self, setup):
        from jooci.trainer import TrainingDiverged
        cfg, corpus, store, teacher = setup
        model = JoociModel(cfg, seed=0)
        # poison one parameter so the forward produces NaN
        model.content.mask_emb.data[:] = np.nan
        opt = Adam(list(model.named_parameters()))
        stage = StageConfig(steps=2, lr_peak=1e-3, warmup_steps=0, content_frozen=False)
        with pytest.raises(TrainingDiverged, match="ol="):
            train_step(model, _one_batch(corpus), store, teacher, opt, stage, 0,
                       np.random.default_rng(0))
