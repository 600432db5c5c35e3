"""The dual-encoder model: shared conv front-end, masked-prediction content
encoder, cross-information other encoder, attentive-pooling post network, and
the adversarial decoder regularizer.

Gradient routing is the architectural contract:

* content taps entering the other path pass through ``stop_gradient`` before
  the learned bridge projection, so the other/post/regularizer losses can
  never move content parameters;
* the regularizer input passes through gradient reversal, so its
  cross-entropy pushes the other encoder *away* from easily decodable
  pseudo-label (content-like) structure while the decoder itself still
  learns to predict them.

Shape conventions: waveforms are 1-d sample arrays; frame sequences are
channel-major ``[C, T]``; transformer states are time-major ``[T, D]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Parameter, ShapeError, Tensor, ops
from .config import ModelConfig
from .modules import (BatchNorm1d, ChannelNorm, Conv1d, Initializer, LayerNorm,
                      Linear, Module, ModuleList, MultiHeadAttention,
                      PositionalConv, Res2NetBlock, TransformerDecoderLayer,
                      TransformerLayer, sinusoidal_positions)


def conv_stack_output_length(spec, n: int) -> int:
    for _, kernel, stride in spec:
        n = (n - kernel) // stride + 1
    return n


def min_waveform_length(spec) -> int:
    n = 1
    for _, kernel, stride in reversed(spec):
        n = (n - 1) * stride + kernel
    return n


class SharedEncoder(Module):
    """7-stage strided conv stack (320x downsampling at 16 kHz) followed by a
    layer norm and a projection to the content width."""

    def __init__(self, cfg: ModelConfig, ini: Initializer):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 1
        for i, (out_ch, kernel, stride) in enumerate(cfg.shared_conv_spec):
            stages.append(Conv1d(in_ch, out_ch, kernel, ini, stride=stride, bias=False))
            in_ch = out_ch
        self.stages = ModuleList(stages)
        self.stage0_norm = ChannelNorm(cfg.shared_conv_spec[0][0], ini)
        self.out_norm = LayerNorm(in_ch, ini)
        self.proj = Linear(in_ch, cfg.content_dim, ini)

    def forward(self, waveform) -> Tensor:
        wave = waveform if isinstance(waveform, Tensor) else Tensor(waveform)
        if wave.ndim != 1:
            raise ShapeError(f"shared encoder expects a 1-d waveform, got {wave.shape}")
        need = min_waveform_length(self.cfg.shared_conv_spec)
        if wave.shape[0] < need:
            raise ShapeError(
                f"waveform of {wave.shape[0]} samples is shorter than the "
                f"minimum input length {need}")
        x = ops.reshape(wave, (1, wave.shape[0]))
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == 0:
                x = self.stage0_norm(x)
            x = ops.gelu(x)
        x = self.out_norm(ops.transpose(x))        # [T, C]
        x = self.proj(x)                           # [T, D]
        return ops.transpose(x)                    # [D, T]


def apply_mask(frames: Tensor, mask_emb: Tensor, rng: np.random.Generator,
               mask_ratio: float, mask_span: int) -> tuple[Tensor, np.ndarray]:
    """Replace random spans of frames with the learned mask embedding.

    Span starts are drawn uniformly without replacement until the covered
    fraction reaches ``mask_ratio``; spans overlapping the end are truncated.
    Returns the masked sequence and the sorted masked frame indices.
    """
    d, t = frames.shape
    if mask_ratio <= 0.0:
        return frames, np.empty(0, dtype=np.int64)
    if mask_ratio >= 1.0:
        idx = np.arange(t, dtype=np.int64)
    else:
        target = mask_ratio * t
        covered = np.zeros(t, dtype=bool)
        for start in rng.permutation(t):
            covered[start:start + mask_span] = True
            if covered.sum() >= target:
                break
        idx = np.flatnonzero(covered).astype(np.int64)
    row = np.zeros((1, t), dtype=frames.data.dtype)
    row[0, idx] = 1.0
    m = Tensor(row)
    keep = Tensor(1.0 - row)
    fill = ops.mul(ops.reshape(mask_emb, (d, 1)), m)
    return ops.add(ops.mul(frames, keep), fill), idx


class CodewordTable(Module):
    """Learned codeword embeddings for one pseudo-label set."""

    def __init__(self, vocab: int, code_dim: int, ini: Initializer):
        super().__init__()
        self.emb = Parameter(ini.normal((vocab, code_dim), 0.1))


class ContentEncoder(Module):
    """Transformer over (masked) shared frames; exposes every layer state."""

    def __init__(self, cfg: ModelConfig, ini: Initializer):
        super().__init__()
        self.cfg = cfg
        self.mask_emb = Parameter(ini.normal((cfg.content_dim,), 0.1))
        self.pos_conv = PositionalConv(cfg.content_dim, cfg.pos_conv_kernel,
                                       cfg.pos_conv_groups, ini)
        self.in_norm = LayerNorm(cfg.content_dim, ini)
        self.blocks = ModuleList([
            TransformerLayer(cfg.content_dim, cfg.content_heads, cfg.content_ffn, ini)
            for _ in range(cfg.content_layers)])
        if cfg.untie_label_projections:
            self.proj_a = ModuleList([
                Linear(cfg.content_dim, cfg.code_dim, ini)
                for _ in range(cfg.num_label_sets)])
        else:
            self.proj_a = Linear(cfg.content_dim, cfg.code_dim, ini)
        self.codewords = ModuleList([
            CodewordTable(cfg.vocab_size, cfg.code_dim, ini)
            for _ in range(cfg.num_label_sets)])

    def projection_for(self, set_id: int) -> Linear:
        if isinstance(self.proj_a, ModuleList):
            return self.proj_a[set_id]
        return self.proj_a

    def codewords_for(self, set_id: int) -> Tensor:
        return self.codewords[set_id].emb

    def forward(self, frames: Tensor) -> list[Tensor]:
        """``[D, T]`` -> ``content_layers + 1`` time-major states ``[T, D]``."""
        x = ops.add(frames, self.pos_conv(frames))
        x = self.in_norm(ops.transpose(x))
        states = [x]
        for block in self.blocks:
            x = block(x)
            states.append(x)
        return states


def split_and_append(content_seq: Tensor, other_seq: Tensor,
                     group_size: int = 10) -> Tensor:
    """Interleave one other-encoder step after every ``group_size`` content
    steps: ``[c1..c10, o1, c11..c20, o2, ...]``.

    ``content_seq [D, group_size*S]`` + ``other_seq [D, S]`` -> ``[D, (group_size+1)*S]``.
    """
    d, t = content_seq.shape
    d2, s = other_seq.shape
    if d != d2:
        raise ShapeError(f"split_and_append: channel dims differ, {d} vs {d2}")
    if t != group_size * s:
        raise ShapeError(
            f"split_and_append: content length {t} != group_size {group_size} * other length {s}")
    c = ops.reshape(content_seq, (d, s, group_size))
    o = ops.reshape(other_seq, (d, s, 1))
    return ops.reshape(ops.concat([c, o], axis=2), (d, (group_size + 1) * s))


class OtherBlock(Module):
    """One cross-information block.

    res2net(k=1) -> tap bridge (stop-grad, then learned projection) ->
    split_and_append -> depthwise conv (k=s=group+1) restoring length ->
    res2net(k=3, dilation=4) -> residual add of the block input -> batch norm.
    The tap is stop-gradiented *before* the projection so the projection
    itself still trains from the other-path losses.
    """

    def __init__(self, cfg: ModelConfig, ini: Initializer):
        super().__init__()
        self.cfg = cfg
        d = cfg.other_dim
        self.res2_a = Res2NetBlock(d, kernel=1, dilation=1, scale=cfg.res2net_scale, ini=ini)
        self.tap_proj = Linear(cfg.content_dim, d, ini)
        self.depthwise = Conv1d(d, d, cfg.sa_kernel, ini, stride=cfg.sa_kernel, groups=d)
        self.res2_b = Res2NetBlock(d, kernel=3, dilation=4, scale=cfg.res2net_scale, ini=ini)
        self.bn = BatchNorm1d(d, ini)

    def forward(self, h: Tensor, content_tap: Tensor, t_pad: int) -> Tensor:
        s = h.shape[1]
        a = self.res2_a(h)
        tap = self.tap_proj(ops.stop_gradient(content_tap))    # [T, D]
        tap = ops.transpose(tap)                               # [D, T]
        if tap.shape[1] < t_pad:
            tap = ops.pad1d(tap, 1, 0, t_pad - tap.shape[1])
        mixed = split_and_append(tap, a, self.cfg.group_size)  # [D, (g+1)*S]
        down = self.depthwise(mixed)                           # [D, S]
        out = self.res2_b(down)
        out = ops.add(out, h)
        out = self.bn(out)
        assert out.shape[1] == s
        return out


class OtherEncoder(Module):
    """Average-pooled shared frames refined by cross-information blocks.

    Block ``i`` (1-based) taps the content layer ``ceil(i * L / B)`` so taps
    are depth-matched across the two stacks.
    """

    def __init__(self, cfg: ModelConfig, ini: Initializer):
        super().__init__()
        self.cfg = cfg
        self.in_proj = Linear(cfg.content_dim, cfg.other_dim, ini)
        self.blocks = ModuleList([OtherBlock(cfg, ini) for _ in range(cfg.other_blocks)])

    def tap_layer(self, block_index: int) -> int:
        return -(-(block_index + 1) * self.cfg.content_layers // self.cfg.other_blocks)

    def forward(self, shared_frames: Tensor, content_states: Sequence[Tensor]) -> list[Tensor]:
        g = self.cfg.group_size
        t = shared_frames.shape[1]
        t_pad = -(-t // g) * g
        x = shared_frames
        if t_pad != t:
            x = ops.pad1d(x, 1, 0, t_pad - t)
        pooled = ops.avg_pool1d(x, self.cfg.pool_kernel, self.cfg.pool_kernel)
        h = ops.transpose(self.in_proj(ops.transpose(pooled)))  # [other_dim, S]
        states = [h]
        for i, block in enumerate(self.blocks):
            h = block(h, content_states[self.tap_layer(i)], t_pad)
            states.append(h)
        return states


class PostNetwork(Module):
    """Attentive statistical pooling -> batch norm -> 512-d projection.

    The attention is single-head with a tanh bottleneck of other_dim/2.  The
    FC stage exists only for pre-training (teacher alignment); probing reads
    the ASP and BN stages.
    """

    def __init__(self, cfg: ModelConfig, ini: Initializer):
        super().__init__()
        d = cfg.other_dim
        self.att_hidden = Linear(d, max(d // 2, 1), ini)
        self.att_score = Linear(max(d // 2, 1), 1, ini)
        self.bn = BatchNorm1d(2 * d, ini)
        self.fc = Linear(2 * d, cfg.teacher_dim, ini)
        # non-zero bias keeps the student off the cosine zero-norm guard even
        # when batch norm is degenerate (batch of one at initialisation)
        self.fc.bias = Parameter(ini.normal((cfg.teacher_dim,), 0.1))

    def attentive_pool(self, h: Tensor) -> Tensor:
        """``[D, S] -> [2D]`` attention-weighted mean and std."""
        if h.shape[1] < 1:
            raise ShapeError("attentive pooling needs at least one frame")
        scores = self.att_score(ops.tanh(self.att_hidden(ops.transpose(h))))  # [S, 1]
        alpha = ops.softmax(ops.transpose(scores), axis=-1)                   # [1, S]
        mu = ops.sum_(ops.mul(h, alpha), axis=1)                              # [D]
        ex2 = ops.sum_(ops.mul(ops.mul(h, h), alpha), axis=1)
        var = ops.sub(ex2, ops.mul(mu, mu))
        sigma = ops.sqrt(ops.add(ops.relu(var), 1e-10))
        return ops.concat([mu, sigma], axis=0)

    def forward_batch(self, asp_list: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        """Batch-level BN over pooled embeddings, then the FC head.

        Returns per-utterance (bn_embedding [2D], fc_embedding [512]).
        """
        cols = ops.concat([ops.reshape(a, (a.shape[0], 1)) for a in asp_list], axis=1)
        bn = self.bn(cols)                                    # [2D, B]
        bn_per = [ops.reshape(ops.narrow(bn, 1, i, 1), (-1,))
                  for i in range(len(asp_list))]
        # FC applied per utterance: keeps eval output bit-identical across
        # batch compositions (a batched matmul tiles differently per width)
        fc_per = [ops.reshape(self.fc(ops.reshape(v, (1, -1))), (-1,))
                  for v in bn_per]
        return bn_per, fc_per


class Regularizer(Module):
    """Gradient-reversed decoder predicting per-frame pseudo labels.

    The other sequence (after GRL) is projected to the decoder width and
    nearest-neighbour upsampled back to the content frame rate; the decoder
    layer self-attends over the upsampled queries and cross-attends to the
    pre-upsample sequence.  Positions are fixed sinusoids.
    """

    def __init__(self, cfg: ModelConfig, ini: Initializer):
        super().__init__()
        self.cfg = cfg
        self.in_proj = Linear(cfg.other_dim, cfg.reg_dim, ini)
        self.decoder = TransformerDecoderLayer(cfg.reg_dim, cfg.reg_heads, cfg.reg_ffn, ini)
        self.classifier = Linear(cfg.reg_dim, cfg.vocab_size, ini)

    def forward(self, other_final: Tensor, true_t: int) -> Tensor:
        g = ops.grad_reverse(other_final, self.cfg.grl_lambda)
        z = self.in_proj(ops.transpose(g))                    # [S, R]
        s, r = z.shape
        mem = ops.add(z, Tensor(sinusoidal_positions(s, r, z.dtype)))
        q = ops.repeat_time(z, self.cfg.group_size, axis=0)   # [gS, R]
        q = ops.add(q, Tensor(sinusoidal_positions(q.shape[0], r, z.dtype)))
        h = self.decoder(q, mem)
        logits = ops.transpose(self.classifier(h))            # [V, gS]
        return ops.narrow(logits, 1, 0, true_t)


@dataclass
class ForwardOutput:
    shared_frames: Tensor                 # [content_dim, T]
    content_layers: list[Tensor]          # L+1 states, each [T, content_dim]
    masked_indices: np.ndarray
    other_layers: list[Tensor]            # B+1 states, each [other_dim, S]
    asp_embedding: Tensor                 # [2*other_dim] pre-BN
    bn_embedding: Optional[Tensor]        # [2*other_dim] post-BN, pre-FC
    post_embedding: Optional[Tensor]      # [teacher_dim]
    reg_logits: Optional[Tensor]          # [vocab, T]
    num_frames: int


class JoociModel(Module):
    """All five components wired into one forward pass."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, materialize: bool = True):
        super().__init__()
        self.cfg = cfg
        ini = Initializer(seed, materialize=materialize)
        self.shared = SharedEncoder(cfg, ini)
        self.content = ContentEncoder(cfg, ini)
        self.other = OtherEncoder(cfg, ini)
        self.post = PostNetwork(cfg, ini)
        self.reg = Regularizer(cfg, ini)

    def forward(self, waveforms: Sequence[np.ndarray],
                mask_rng: Optional[np.random.Generator] = None,
                apply_masking: bool = True) -> list[ForwardOutput]:
        cfg = self.cfg
        outs: list[ForwardOutput] = []
        asps: list[Tensor] = []
        for wave in waveforms:
            sf = self.shared(wave)
            t = sf.shape[1]
            if apply_masking and cfg.mask_ratio > 0 and mask_rng is not None:
                masked, idx = apply_mask(sf, self.content.mask_emb, mask_rng,
                                         cfg.mask_ratio, cfg.mask_span)
            else:
                masked, idx = sf, np.empty(0, dtype=np.int64)
            cstates = self.content(masked)
            other_src = masked if cfg.other_uses_masked else sf
            ostates = self.other(other_src, cstates)
            asp = self.post.attentive_pool(ostates[-1])
            reg_logits = self.reg(ostates[-1], t) if cfg.regularizer_enabled else None
            asps.append(asp)
            outs.append(ForwardOutput(
                shared_frames=sf, content_layers=cstates, masked_indices=idx,
                other_layers=ostates, asp_embedding=asp, bn_embedding=None,
                post_embedding=None, reg_logits=reg_logits, num_frames=t))
        bn_per, fc_per = self.post.forward_batch(asps)
        for out, bn, fc in zip(outs, bn_per, fc_per):
            out.bn_embedding = bn
            out.post_embedding = fc
        return outs


# ---------------------------------------------------------------------------
# parameter accounting

_COMPONENT_LABELS = {
    "shared": "Shared encoder",
    "content": "Content encoder",
    "other": "Other encoder",
    "post": "Post network",
    "reg": "Regularizer",
}

# Dropped after pre-training: the FC head aligned to the teacher, the whole
# regularizer, and the per-label-set projection/codeword heads.
_PRETRAIN_ONLY_PREFIXES = ("post.fc.", "reg.", "content.proj_a", "content.codewords")


def is_pretrain_only(name: str) -> bool:
    return name.startswith(_PRETRAIN_ONLY_PREFIXES)


def count_parameters(model_or_cfg, mode: str = "training") -> dict[str, int]:
    """Per-component parameter counts.

    ``mode="inference"`` excludes pre-training-only tensors.  Accepts either
    a built model or a config (counted without allocating weights).
    """
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be training|inference, got {mode!r}")
    model = model_or_cfg
    if isinstance(model_or_cfg, ModelConfig):
        model = JoociModel(model_or_cfg, materialize=False)
    counts = {key: 0 for key in _COMPONENT_LABELS}
    for name, p in model.named_parameters():
        if mode == "inference" and is_pretrain_only(name):
            continue
        counts[name.split(".", 1)[0]] += p.size
    counts["shared_and_content"] = counts["shared"] + counts["content"]
    counts["total"] = sum(counts[k] for k in _COMPONENT_LABELS)
    return counts


def parameter_table(cfg: ModelConfig) -> str:
    """Component x {training, inference} table in millions."""
    train = count_parameters(cfg, "training")
    infer = count_parameters(cfg, "inference")

    def fmt(n):
        return f"{n / 1e6:.2f}M" if n else "-"

    rows = [("Component", "Training", "Inference")]
    rows.append(("Shared & Content encoder",
                 fmt(train["shared_and_content"]), fmt(infer["shared_and_content"])))
    for key in ("other", "post", "reg"):
        rows.append((_COMPONENT_LABELS[key], fmt(train[key]), fmt(infer[key])))
    rows.append(("Total", fmt(train["total"]), fmt(infer["total"])))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
