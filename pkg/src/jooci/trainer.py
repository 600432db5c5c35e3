"""Two-stage pre-training: frozen-content warm start, then joint training.

Stage 1 freezes every content parameter (transformer blocks, mask embedding,
label projection and codewords); their values are bit-identical across the
stage while the shared encoder, other encoder, post network and regularizer
train.  Stage 2 unfreezes everything at a lower learning rate.

Determinism contract: the batch stream, masking and augmentation draws are
all functions of (seed, stage); the optimizer is plain sequential Adam with
decoupled weight decay.  Two runs with the same config and seed produce
byte-identical metric logs, and resuming from a checkpoint reproduces the
uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from itertools import islice
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, backward
from .data import AugmentConfig, Batch, NoiseBank, Utterance, batch_stream
from .labels import LabelStore, TeacherOracle
from .losses import LossBreakdown, batch_losses
from .model import JoociModel, is_pretrain_only, save_checkpoint


class TrainingDiverged(RuntimeError):
    pass


CONTENT_PREFIX = "content."


@dataclass
class StageConfig:
    steps: int
    lr_peak: float
    warmup_steps: int
    content_frozen: bool
    seconds_per_step: float = 20.0

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} > steps {self.steps}")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")


def lr_at(step: int, stage_cfg: StageConfig) -> float:
    """Linear ramp to lr_peak over the warmup, then linear decay to zero at
    the stage end.  Continuous, maximum exactly at the warmup boundary."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w, total, peak = stage_cfg.warmup_steps, stage_cfg.steps, stage_cfg.lr_peak
    if w > 0 and step <= w:
        return peak * step / w
    if total == w:
        return peak
    frac = (total - step) / (total - w)
    return peak * max(frac, 0.0)


class Adam:
    """Adam with decoupled weight decay; betas (0.9, 0.98), eps 1e-6."""

    def __init__(self, named_params: Sequence[tuple[str, object]],
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-6,
                 weight_decay: float = 0.01):
        self.named_params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr: float, skip_prefix: Optional[str] = None) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if skip_prefix and name.startswith(skip_prefix):
                continue
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update.astype(p.data.dtype)

    def state(self) -> dict:
        return {"scalars": {"t": self.t, "betas": [self.beta1, self.beta2],
                            "eps": self.eps, "weight_decay": self.weight_decay},
                "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["scalars"]["t"])
        for name, _ in self.named_params:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


def clip_global_norm(model: JoociModel, max_norm: float,
                     skip_prefix: Optional[str] = None) -> float:
    total = 0.0
    grads = []
    for name, p in model.named_parameters():
        if skip_prefix and name.startswith(skip_prefix):
            continue
        if p.grad is not None:
            grads.append(p.grad)
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = np.float32(max_norm / norm)
        for g in grads:
            g *= factor
    return norm


def train_step(model: JoociModel, batch: Batch, store: LabelStore,
               teacher: TeacherOracle, opt: Adam, stage_cfg: StageConfig,
               step_in_stage: int, mask_rng: np.random.Generator,
               skip_cl_when_frozen: bool = False,
               clip_norm: float = 1.0) -> LossBreakdown:
    """One optimisation step; returns the per-term loss breakdown.

    While the content encoder is frozen its losses may still be evaluated
    for logging, but its parameters receive no update (the optimizer skips
    the whole content group, including when CL gradients exist).
    """
    compute_cl = not (stage_cfg.content_frozen and skip_cl_when_frozen)
    dictionaries = [store.dictionary_for(i.utt_id, i.frame_offset, i.num_frames)
                    for i in batch.items]
    teachers = [teacher.embed(i) for i in batch.items]
    model.zero_grad()
    with Tape() as tape:
        outputs = model.forward(batch.waveforms(), mask_rng=mask_rng)
        # trim label slices to the realized frame count (conv boundary loses
        # up to one frame versus the 20 ms label grid)
        for out, d in zip(outputs, dictionaries):
            for entry in d.entries.values():
                entry.labels = entry.labels[: out.num_frames]
        total, breakdown = batch_losses(model, outputs, dictionaries, teachers,
                                        compute_cl=compute_cl)
    if not math.isfinite(breakdown.total):
        raise TrainingDiverged(
            f"non-finite loss at stage step {step_in_stage}: "
            f"cl={breakdown.cl} ol={breakdown.ol} rl={breakdown.rl}")
    backward(tape, total)
    skip = CONTENT_PREFIX if stage_cfg.content_frozen else None
    clip_global_norm(model, clip_norm, skip_prefix=skip)
    lr = lr_at(step_in_stage, stage_cfg)
    opt.step(lr, skip_prefix=skip)
    return breakdown


@dataclass
class PretrainResult:
    final_checkpoint: str
    metrics_path: str
    history: list[LossBreakdown]


def run_pretraining(model: JoociModel, stages: Sequence[StageConfig],
                    corpus: Sequence[Utterance], store: LabelStore,
                    teacher: TeacherOracle, out_dir: str, seed: int,
                    augment_cfg: Optional[AugmentConfig] = None,
                    crop_seconds: float = 2.0,
                    ckpt_every: int = 0,
                    resume_step: int = 0, resume_stage: int = 0,
                    opt: Optional[Adam] = None,
                    skip_cl_when_frozen: bool = False) -> PretrainResult:
    """Run the staged schedule, logging one JSON line per step and writing
    checkpoints at stage boundaries (plus every ``ckpt_every`` steps).

    Resume: pass the checkpointed (stage, step) and restored optimizer; the
    batch stream for each stage is regenerated from (seed, stage) and
    fast-forwarded, so the trajectory continues exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    mode = "a" if (resume_step or resume_stage) else "w"
    if opt is None:
        opt = Adam(list(model.named_parameters()))
    bank = NoiseBank(seed=seed) if augment_cfg is not None else None
    history: list[LossBreakdown] = []
    global_step = resume_step
    final_path = os.path.join(out_dir, "ckpt_final.npz")

    def stage_start(idx: int) -> int:
        return sum(s.steps for s in stages[:idx])

    with open(metrics_path, mode) as log:
        for stage_idx, stage_cfg in enumerate(stages):
            if stage_idx < resume_stage:
                continue
            start = stage_start(stage_idx)
            done_in_stage = max(global_step - start, 0)
            if done_in_stage >= stage_cfg.steps:
                continue
            stream = batch_stream(corpus, stage_cfg.seconds_per_step, crop_seconds,
                                  seed=seed * 10 + stage_idx,
                                  augment_cfg=augment_cfg, bank=bank)
            if done_in_stage:
                next(islice(stream, done_in_stage - 1, done_in_stage))
            for step_in_stage in range(done_in_stage, stage_cfg.steps):
                batch = next(stream)
                mask_rng = np.random.default_rng(
                    [seed, 577, stage_idx, step_in_stage])
                breakdown = train_step(model, batch, store, teacher, opt,
                                       stage_cfg, step_in_stage, mask_rng,
                                       skip_cl_when_frozen=skip_cl_when_frozen)
                global_step += 1
                history.append(breakdown)
                record = {"step": global_step, "stage": stage_idx,
                          "lr": lr_at(step_in_stage, stage_cfg)}
                record.update(breakdown.to_dict())
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
                if ckpt_every and global_step % ckpt_every == 0:
                    save_checkpoint(os.path.join(out_dir, f"ckpt_{global_step:06d}.npz"),
                                    model, step=global_step, stage=stage_idx,
                                    optimizer_state=opt.state())
            save_checkpoint(os.path.join(out_dir, f"ckpt_stage{stage_idx}.npz"),
                            model, step=global_step, stage=stage_idx,
                            optimizer_state=opt.state())
    last_stage = len(stages) - 1 if stages else 0
    save_checkpoint(final_path, model, step=global_step, stage=last_stage,
                    optimizer_state=opt.state())
    return PretrainResult(final_checkpoint=final_path, metrics_path=metrics_path,
                          history=history)
