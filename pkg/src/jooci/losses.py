"""The three training losses and their weighted combination.

Masked prediction (per label set), teacher-alignment cosine loss, and the
adversarial decoder cross-entropy.  The combination is fixed at
``total = cl + ol + rl/10``; no loss-weight scheduling.

Both the masked-prediction and the regularizer cross-entropies are averaged
(over masked indices and frames respectively) so their magnitudes do not
scale with utterance length and the fixed /10 weight stays meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops

COSINE_EPS = 1e-8


@dataclass
class LabelEntry:
    """One pseudo-label set attached to one content layer, sliced to one
    utterance: the k-means codebook it came from (feature-space centers,
    kept for provenance) and the per-frame target ids."""
    set_id: int
    codebook: Optional[np.ndarray]
    labels: np.ndarray


@dataclass
class LabelDictionary:
    """Map from content-layer index (1-based) to its label set."""
    entries: dict[int, LabelEntry]

    def __post_init__(self):
        layers = list(self.entries)
        if layers != sorted(layers):
            raise ValueError("label dictionary layers must be strictly increasing")

    @property
    def num_sets(self) -> int:
        return len(self.entries)


@dataclass
class LossBreakdown:
    cl: float
    ol: float
    rl: float
    total: float
    per_layer_mpl: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cl": self.cl, "ol": self.ol, "rl": self.rl, "total": self.total,
                "per_layer_mpl": {str(k): v for k, v in self.per_layer_mpl.items()}}


def _l2_rows(x: Tensor) -> Tensor:
    """Row-normalise ``[N, D]`` with the shared zero-norm guard."""
    norms = ops.sqrt(ops.sum_(ops.mul(x, x), axis=1, keepdims=True))
    return ops.div(x, ops.add(norms, COSINE_EPS))


def mpl(layer_state: Tensor, masked: np.ndarray, projection, codewords: Tensor,
        labels: np.ndarray, tau: float) -> Tensor:
    """Masked-prediction loss for one layer and one label set.

    ``layer_state`` is time-major ``[T, D]``; only rows in ``masked`` enter
    the loss.  Logits are cosine similarities between the projected states
    and every codeword, scaled by 1/tau; the result is the mean
    cross-entropy over the masked frames, differentiable w.r.t. the states,
    the projection and the codewords.
    """
    if len(masked) == 0:
        raise ValueError("mpl: empty masked index set (caller should skip)")
    if tau <= 0:
        raise ValueError(f"mpl: tau must be positive, got {tau}")
    h = ops.index_select(layer_state, 0, masked)       # [M, D]
    p = _l2_rows(projection(h))                        # [M, c]
    e = _l2_rows(codewords)                            # [V, c]
    sims = ops.matmul(e, ops.transpose(p))             # [V, M]
    logits = ops.scale(sims, 1.0 / tau)
    return ops.cross_entropy_columns(logits, np.asarray(labels)[masked])


def mmpl(content_states: Sequence[Tensor], masked: np.ndarray,
         dictionary: LabelDictionary, content_encoder, tau: float
         ) -> tuple[Tensor, dict[int, float]]:
    """Sum of per-layer masked-prediction losses over the label dictionary."""
    per_layer: dict[int, float] = {}
    total: Optional[Tensor] = None
    for layer, entry in dictionary.entries.items():
        if not 1 <= layer < len(content_states):
            raise ValueError(f"label dictionary layer {layer} outside 1..{len(content_states) - 1}")
        term = mpl(content_states[layer], masked,
                   content_encoder.projection_for(entry.set_id),
                   content_encoder.codewords_for(entry.set_id),
                   entry.labels, tau)
        per_layer[layer] = term.item()
        total = term if total is None else ops.add(total, term)
    return total, per_layer


def other_loss(student: Tensor, teacher: np.ndarray) -> Tensor:
    """``1 - cos(student, teacher)``; the teacher is a constant (positive
    pairs only, no gradient into the teacher)."""
    return ops.sub(Tensor(np.ones((), dtype=student.dtype)),
                   ops.cosine_similarity(student, Tensor(teacher), eps=COSINE_EPS))


def regularizer_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-frame cross-entropy of the decoder predictions, ``logits
    [V, T]`` against ``labels [T]``."""
    if logits.shape[1] != len(labels):
        raise ValueError(f"regularizer_loss: {logits.shape[1]} frames vs {len(labels)} labels")
    return ops.cross_entropy_columns(logits, labels)


def total_loss(cl: Optional[Tensor], ol: Tensor, rl: Optional[Tensor]) -> Tensor:
    """``cl + ol + rl/10``; missing terms contribute zero."""
    out = ol
    if cl is not None:
        out = ops.add(cl, out)
    if rl is not None:
        out = ops.add(out, ops.div(rl, 10.0))
    return out


def batch_losses(model, outputs, dictionaries: Sequence[LabelDictionary],
                 teacher_vectors: Sequence[np.ndarray],
                 compute_cl: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Combine per-utterance losses over a batch (means over utterances,
    except CL layers which sum per the multicluster definition).

    Returns the total as a graph tensor plus a float breakdown whose
    ``total`` is exactly ``cl + ol + rl/10`` at float32.
    """
    cfg = model.cfg
    cl_terms: list[Tensor] = []
    ol_terms: list[Tensor] = []
    rl_terms: list[Tensor] = []
    layer_acc: dict[int, float] = {}
    for out, dictionary, teacher in zip(outputs, dictionaries, teacher_vectors):
        if compute_cl and len(out.masked_indices) > 0:
            cl_u, per_layer = mmpl(out.content_layers, out.masked_indices,
                                   dictionary, model.content, cfg.tau)
            cl_terms.append(cl_u)
            for k, v in per_layer.items():
                layer_acc[k] = layer_acc.get(k, 0.0) + v / len(outputs)
        ol_terms.append(other_loss(out.post_embedding, teacher))
        if out.reg_logits is not None:
            top_layer = max(dictionary.entries)
            rl_terms.append(regularizer_loss(out.reg_logits,
                                             dictionary.entries[top_layer].labels))

    def _mean(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = ops.add(acc, t)
        return ops.scale(acc, 1.0 / len(terms))

    cl = _mean(cl_terms) if cl_terms else None
    ol = _mean(ol_terms)
    rl = _mean(rl_terms) if rl_terms else None
    tot = total_loss(cl, ol, rl)
    breakdown = LossBreakdown(
        cl=cl.item() if cl is not None else 0.0,
        ol=ol.item(),
        rl=rl.item() if rl is not None else 0.0,
        total=tot.item(),
        per_layer_mpl=layer_acc)
    return tot, breakdown
