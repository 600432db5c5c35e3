"""Finite-difference cases for composite blocks and losses.

Importing this module registers them with the autodiff gradcheck registry,
so ``run_suite`` / ``jooci gradcheck --all`` covers the full stack: the
cross-information block, attentive pooling, the decoder layer, every loss
term, and the whole training loss on a micro configuration.

All cases run in float64 on micro shapes.  Where a path intentionally blocks
or flips gradients (stop-gradient taps, the reversal layer) the comparison
set is restricted to tensors whose analytic gradient is well-defined.
"""

from __future__ import annotations

import numpy as np

from .. import losses
from ..autodiff import Tensor, ops, register
from ..autodiff.gradcheck import _scalarize
from .config import ModelConfig
from .modules import Initializer, TransformerDecoderLayer
from .network import JoociModel, OtherBlock, PostNetwork, Regularizer


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        shared_conv_spec=tuple((4, k, s) for _, k, s in ModelConfig.toy().shared_conv_spec),
        content_layers=2, content_dim=12, content_heads=2, content_ffn=16,
        pos_conv_kernel=4, pos_conv_groups=2,
        other_blocks=2, other_dim=8, res2net_scale=4,
        teacher_dim=6, vocab_size=7, num_label_sets=2, code_dim=5,
        reg_dim=8, reg_heads=2, reg_ffn=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _f64(rng, *shape):
    return Tensor(rng.normal(0.0, 0.5, size=shape), requires_grad=True, dtype=np.float64)


def _params_subset(module, names):
    found = dict(module.named_parameters())
    return [found[n] for n in names]


def _other_block_case(rng: np.random.Generator) -> dict:
    cfg = micro_config()
    ini = Initializer(int(rng.integers(1 << 30)), dtype=np.float64)
    block = OtherBlock(cfg, ini)
    tap = Tensor(rng.normal(size=(20, cfg.content_dim)), dtype=np.float64)
    h = _f64(rng, cfg.other_dim, 2)
    params = _params_subset(block, ["res2_a.convs.0.weight", "tap_proj.bias",
                                    "depthwise.weight", "bn.gamma"])

    def f(h_, *_):
        return _scalarize(block(h_, tap, t_pad=20))

    return {"f": f, "inputs": [h] + params}


def _asp_case(rng: np.random.Generator) -> dict:
    cfg = micro_config()
    ini = Initializer(int(rng.integers(1 << 30)), dtype=np.float64)
    post = PostNetwork(cfg, ini)
    h = _f64(rng, cfg.other_dim, 4)
    params = _params_subset(post, ["att_hidden.weight", "att_score.bias"])

    def f(h_, *_):
        return _scalarize(post.attentive_pool(h_))

    return {"f": f, "inputs": [h] + params}


def _decoder_layer_case(rng: np.random.Generator) -> dict:
    ini = Initializer(int(rng.integers(1 << 30)), dtype=np.float64)
    layer = TransformerDecoderLayer(8, 2, 12, ini)
    q = _f64(rng, 6, 8)
    mem = _f64(rng, 3, 8)
    params = _params_subset(layer, ["cross_attn.wk.weight", "ffn.fc1.bias", "ln3.gamma"])

    def f(q_, mem_, *_):
        return _scalarize(layer(q_, mem_))

    return {"f": f, "inputs": [q, mem] + params}


def _regularizer_case(rng: np.random.Generator) -> dict:
    # the reversal layer sits at the input, so only parameter gradients
    # (which do not pass through it) are compared
    cfg = micro_config()
    ini = Initializer(int(rng.integers(1 << 30)), dtype=np.float64)
    reg = Regularizer(cfg, ini)
    h = Tensor(rng.normal(size=(cfg.other_dim, 2)), dtype=np.float64)
    params = _params_subset(reg, ["in_proj.weight", "classifier.bias"])

    def f(*_):
        return _scalarize(reg(h, true_t=20))

    return {"f": f, "inputs": params}


def _mpl_case(rng: np.random.Generator) -> dict:
    cfg = micro_config()
    ini = Initializer(int(rng.integers(1 << 30)), dtype=np.float64)
    from .modules import Linear
    proj = Linear(cfg.content_dim, cfg.code_dim, ini)
    codewords = _f64(rng, cfg.vocab_size, cfg.code_dim)
    state = _f64(rng, 6, cfg.content_dim)
    masked = np.array([0, 2, 3])
    labels = rng.integers(0, cfg.vocab_size, size=6)

    def f(state_, codewords_, *_):
        return losses.mpl(state_, masked, proj, codewords_, labels, tau=0.3)

    return {"f": f,
            "inputs": [state, codewords, proj.weight, proj.bias]}


def _other_loss_case(rng: np.random.Generator) -> dict:
    teacher = rng.normal(size=6)
    teacher /= np.linalg.norm(teacher)
    student = _f64(rng, 6)
    return {"f": lambda s: losses.other_loss(s, teacher), "inputs": [student]}


def _regularizer_loss_case(rng: np.random.Generator) -> dict:
    logits = _f64(rng, 5, 4)
    labels = rng.integers(0, 5, size=4)
    return {"f": lambda z: losses.regularizer_loss(z, labels), "inputs": [logits]}


def _total_loss_case(rng: np.random.Generator) -> dict:
    cl, ol, rl = (_f64(rng) for _ in range(3))
    return {"f": lambda a, b, c: losses.total_loss(a, b, c), "inputs": [cl, ol, rl]}


_FULL_LOSS_CHECKED = [
    "shared.stages.0.weight",
    "content.mask_emb",
    "content.blocks.0.attn.wq.bias",
    "content.codewords.0.emb",
    "other.blocks.0.tap_proj.bias",
    "other.blocks.0.depthwise.weight",
    "post.fc.bias",
    "reg.classifier.bias",
]


def _full_loss_case(rng: np.random.Generator) -> dict:
    """The whole training objective on a 2-layer micro model (batch of two,
    20 frames each so masking leaves context and the batch norms have real
    statistics), checked against finite differences for one representative
    tensor per component."""
    cfg = micro_config()
    model = JoociModel(cfg, seed=int(rng.integers(1 << 30)))
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float64)
    waves = [rng.normal(0.0, 0.1, size=6400) for _ in range(2)]   # 20 frames
    labels_by_set = {s: rng.integers(0, cfg.vocab_size, size=20)
                     for s in range(cfg.num_label_sets)}
    teachers = []
    for _ in waves:
        v = rng.normal(size=cfg.teacher_dim)
        teachers.append(v / np.linalg.norm(v))
    from ..labels import layers_for_sets
    layers = layers_for_sets(cfg.content_layers, cfg.num_label_sets)

    def f(*_):
        outs = model.forward(waves, mask_rng=np.random.default_rng(3))
        dicts = []
        for out in outs:
            t = out.num_frames
            dicts.append(losses.LabelDictionary({
                layer: losses.LabelEntry(set_id=s, codebook=None,
                                         labels=labels_by_set[s][:t])
                for s, layer in enumerate(layers)}))
        total, _ = losses.batch_losses(model, outs, dicts, teachers)
        return total

    params = dict(model.named_parameters())
    inputs = [params[name] for name in _FULL_LOSS_CHECKED]
    return {"f": f, "inputs": inputs}


register("composite_other_block", _other_block_case)
register("composite_asp", _asp_case)
register("composite_decoder_layer", _decoder_layer_case)
register("composite_regularizer_params", _regularizer_case)
register("loss_mpl", _mpl_case)
register("loss_other", _other_loss_case)
register("loss_regularizer_ce", _regularizer_loss_case)
register("loss_total", _total_loss_case)
register("full_jooci_loss_micro", _full_loss_case)
