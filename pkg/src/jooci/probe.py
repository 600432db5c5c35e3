"""Frozen-encoder evaluation: layer extraction, learned weighted-sum linear
probes for speaker identification (SID) and frame-level phone recognition
(PR), canonical correlation against labels, and the CSV report bundle.

The encoder never trains here: features are extracted once in eval mode
(no masking, batch norms on running statistics) and probes fit on the
frozen arrays.  A weighted-sum probe learns exactly one scalar per layer
(softmax-normalised), 13 at the full-size configuration.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Parameter, Tape, Tensor, backward, ops
from .data import Utterance
from .model import JoociModel
from .model.modules import Initializer, Linear, Module

log = logging.getLogger(__name__)

POST_STAGES = ("asp", "bn", "fc")
PROBE_STEPS = 2000
PROBE_LR = 1e-3


@dataclass
class ProbeReport:
    task: str                     # "sid" | "pr"
    encoder: str                  # "content" | "other"
    layer_selection: str
    accuracy: float
    learned_weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass
class LayerStates:
    """Eval-mode states for one utterance: per-layer frame features
    (time-major) plus, for the other encoder, the post-network stages."""
    frames: list[np.ndarray]                  # each [T, D]
    stages: dict[str, np.ndarray] = field(default_factory=dict)
    num_frames: int = 0


def extract_layers(model: JoociModel, utterance: Utterance, encoder: str,
                   include_post: bool = True) -> LayerStates:
    """No masking, no gradient recording, batch norm in eval mode."""
    if encoder not in ("content", "other"):
        raise ValueError(f"encoder must be content|other, got {encoder!r}")
    was_training = model.training
    reg_flag = model.cfg.regularizer_enabled
    model.eval()
    model.cfg.regularizer_enabled = False   # probing never reads the decoder
    try:
        outs = model.forward([utterance.waveform], mask_rng=None, apply_masking=False)
    finally:
        model.train(was_training)
        model.cfg.regularizer_enabled = reg_flag
    out = outs[0]
    t = out.num_frames
    if encoder == "content":
        return LayerStates(frames=[s.data.copy() for s in out.content_layers],
                           num_frames=t)
    g = model.cfg.group_size
    frames = []
    for s in out.other_layers:
        up = np.repeat(s.data, g, axis=1)[:, :t]      # back to the 20 ms grid
        frames.append(up.T.copy())
    stages = {}
    if include_post:
        stages = {"asp": out.asp_embedding.data.copy(),
                  "bn": out.bn_embedding.data.copy(),
                  "fc": out.post_embedding.data.copy()}
    return LayerStates(frames=frames, stages=stages, num_frames=t)


class WeightedSum(Module):
    """One learnable scalar per layer, softmax-normalised at use."""

    def __init__(self, num_layers: int):
        super().__init__()
        self.w = Parameter(np.zeros(num_layers, dtype=np.float32))

    @property
    def num_parameters(self) -> int:
        return self.w.size

    def normalized(self) -> Tensor:
        return ops.softmax(self.w, axis=0)

    def normalized_values(self) -> np.ndarray:
        e = np.exp(self.w.data - self.w.data.max())
        return e / e.sum()

    def forward(self, layers: Tensor) -> Tensor:
        """``layers [L, ...]`` -> softmax(w)-weighted sum over the first axis."""
        ws = ops.reshape(self.normalized(), (len(self.w.data),) + (1,) * (layers.ndim - 1))
        return ops.sum_(ops.mul(layers, ws), axis=0)


def weighted_combine(layers: Sequence[Tensor], ws: WeightedSum) -> Tensor:
    """Combine same-shape layer tensors with softmax(w) weights."""
    shapes = {tuple(l.shape) for l in layers}
    if len(shapes) != 1:
        raise ValueError(f"weighted_combine: mismatched layer shapes {shapes}")
    stacked = ops.concat([ops.reshape(l, (1,) + tuple(l.shape)) for l in layers], axis=0)
    return ws(stacked)


def split_corpus(corpus: Sequence[Utterance], train_frac: float = 0.75
                 ) -> tuple[list[Utterance], list[Utterance]]:
    """Unseen utterances of seen speakers: split each speaker's utterances."""
    by_spk: dict[int, list[Utterance]] = {}
    for u in corpus:
        by_spk.setdefault(u.speaker_id, []).append(u)
    train, test = [], []
    for spk in sorted(by_spk):
        utts = sorted(by_spk[spk], key=lambda u: u.utt_id)
        cut = max(int(len(utts) * train_frac), 1)
        train.extend(utts[:cut])
        test.extend(utts[cut:])
    return train, test


def parse_layer_selection(selection: str, num_layers: int) -> list:
    """``all`` | ``last`` | ``asp``/``bn``/``fc`` | ``i`` | ``i-j`` (layer
    indices, 0 = pre-transformer input / pooled input)."""
    sel = selection.strip().lower()
    if sel == "all":
        return list(range(num_layers))
    if sel == "last":
        return [num_layers - 1]
    if sel in POST_STAGES:
        return [sel]
    if "-" in sel:
        a, b = sel.split("-", 1)
        lo, hi = int(a), int(b)
        if not 0 <= lo <= hi < num_layers:
            raise ValueError(f"layer range {selection!r} outside 0..{num_layers - 1}")
        return list(range(lo, hi + 1))
    idx = int(sel)
    if not 0 <= idx < num_layers:
        raise ValueError(f"layer {selection!r} outside 0..{num_layers - 1}")
    return [idx]


def _probe_features(model: JoociModel, utts: Sequence[Utterance], task: str,
                    encoder: str, layer_ids: list,
                    cache: Optional[dict] = None) -> tuple[np.ndarray, np.ndarray]:
    """Returns (features [L, N, D], labels [N]); for PR the rows are frames."""
    feats: list[list[np.ndarray]] = [[] for _ in layer_ids]
    labels: list[np.ndarray] = []
    for u in utts:
        key = (u.utt_id, encoder)
        if cache is not None and key in cache:
            states = cache[key]
        else:
            states = extract_layers(model, u, encoder)
            if cache is not None:
                cache[key] = states
        if task == "sid":
            for j, lid in enumerate(layer_ids):
                vec = states.stages[lid] if isinstance(lid, str) \
                    else states.frames[lid].mean(axis=0)
                feats[j].append(vec[None, :])
            labels.append(np.array([u.speaker_id]))
        elif task == "pr":
            t = states.num_frames
            for j, lid in enumerate(layer_ids):
                if isinstance(lid, str):
                    raise ValueError("post-network stages are utterance-level; "
                                     "PR probes need frame features")
                feats[j].append(states.frames[lid])
            labels.append(u.phone_seq[:t])
        else:
            raise ValueError(f"unknown probe task {task!r}")
    x = np.stack([np.concatenate(rows, axis=0) for rows in feats], axis=0)
    return x.astype(np.float32), np.concatenate(labels)


def _fit_linear_probe(x_train, y_train, x_test, y_test, num_classes: int,
                      seed: int, steps: int = PROBE_STEPS, lr: float = PROBE_LR
                      ) -> tuple[float, np.ndarray]:
    """Full-batch Adam on softmax regression over (optionally) weighted-sum
    features; returns test accuracy and the learned layer weights."""
    from .trainer import Adam

    num_layers, _, dim = x_train.shape
    ini = Initializer(seed)
    head = Linear(dim, num_classes, ini)
    ws = WeightedSum(num_layers)
    named = list(head.named_parameters(prefix="head.")) + \
        (list(ws.named_parameters(prefix="ws.")) if num_layers > 1 else [])
    opt = Adam(named, weight_decay=0.0)
    xt = Tensor(x_train)
    for _ in range(steps):
        for _, p in named:
            p.zero_grad()
        with Tape() as tape:
            combined = ws(xt) if num_layers > 1 else ops.reshape(xt, x_train.shape[1:])
            logits = head(combined)
            loss = ops.cross_entropy_columns(ops.transpose(logits), y_train)
        backward(tape, loss)
        opt.step(lr)
    w_np = head.weight.data
    b_np = head.bias.data
    lw = ws.normalized_values()
    x_eval = np.tensordot(lw, x_test, axes=(0, 0)) if num_layers > 1 else x_test[0]
    pred = np.argmax(x_eval @ w_np.T + b_np, axis=1)
    return float(np.mean(pred == y_test)), lw


def train_probe(model: JoociModel, corpus: Sequence[Utterance], task: str,
                encoder: str, layer_selection: str, seed: int = 0,
                steps: int = PROBE_STEPS, train_frac: float = 0.75,
                cache: Optional[dict] = None) -> ProbeReport:
    """Fit one probe cell on a frozen checkpoint.

    SID: one mean-pooled (or post-network) vector per utterance -> speaker
    classifier.  PR: per-frame features -> phone classifier.  Multiple
    selected layers are combined with a learnable weighted sum.
    """
    train, test = split_corpus(corpus, train_frac)
    classes = sorted({u.speaker_id for u in corpus}) if task == "sid" else None
    if task == "sid":
        if len(classes) < 2:
            raise ValueError("SID probe needs at least two speakers in the split")
        remap = {c: i for i, c in enumerate(classes)}
        num_classes = len(classes)
    else:
        num_classes = int(max(u.phone_seq.max() for u in corpus)) + 1
        if num_classes < 2:
            raise ValueError("PR probe needs at least two phone classes")
    num_layers = (model.cfg.content_layers if encoder == "content"
                  else model.cfg.other_blocks) + 1
    layer_ids = parse_layer_selection(layer_selection, num_layers)
    x_tr, y_tr = _probe_features(model, train, task, encoder, layer_ids, cache)
    x_te, y_te = _probe_features(model, test, task, encoder, layer_ids, cache)
    if task == "sid":
        y_tr = np.array([remap[y] for y in y_tr])
        y_te = np.array([remap[y] for y in y_te])
    acc, weights = _fit_linear_probe(x_tr, y_tr, x_te, y_te, num_classes,
                                     seed=seed, steps=steps)
    return ProbeReport(task=task, encoder=encoder, layer_selection=layer_selection,
                       accuracy=acc, learned_weights=[float(w) for w in weights])


# ---------------------------------------------------------------------------
# canonical correlation against label indicators

def _inv_sqrt_psd(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    vals = np.maximum(vals, 1e-12)
    return vecs @ np.diag(vals ** -0.5) @ vecs.T


def cca_similarity(representations: np.ndarray, labels: np.ndarray,
                   eps: float = 1e-8) -> float:
    """Mean canonical correlation between frame representations ``[N, D]``
    and one-hot label indicators; bounded in [0, 1] and invariant (to the
    regularisation scale) under invertible linear maps of either view."""
    x = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("cca_similarity needs at least two label classes")
    y = (labels[:, None] == classes[None, :]).astype(np.float64)
    n, d = x.shape
    if n <= d:
        log.warning("cca_similarity: %d frames for %d dims; covariance regularized", n, d)
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cxx = xc.T @ xc / max(n - 1, 1)
    cyy = yc.T @ yc / max(n - 1, 1)
    cxy = xc.T @ yc / max(n - 1, 1)
    cxx += eps * (np.trace(cxx) / d + 1e-12) * np.eye(d)
    cyy += eps * (np.trace(cyy) / len(classes) + 1e-12) * np.eye(len(classes))
    m = _inv_sqrt_psd(cxx) @ cxy @ _inv_sqrt_psd(cyy)
    sv = np.clip(np.linalg.svd(m, compute_uv=False), 0.0, 1.0)
    r = min(d, len(classes) - 1)
    return float(np.mean(sv[:r]))


# ---------------------------------------------------------------------------
# report emission (the CSV contract the figure renderer consumes)

LAYER_WEIGHTS_HEADER = ["task", "layer", "weight"]
CCA_HEADER = ["layer", "score"]
PROBES_HEADER = ["task", "encoder", "layers", "accuracy"]


def emit_report(reports: Sequence[ProbeReport],
                weight_rows: dict[str, Sequence[float]],
                cca_rows: Sequence[tuple[int, float]],
                out_dir: str) -> dict[str, str]:
    """Write layer_weights.csv / cca.csv / probes.csv with documented headers.

    ``weight_rows`` maps a task name to its per-layer normalised weights;
    ``cca_rows`` is (layer, score) pairs.  Values round-trip exactly via
    ``repr``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def _write(name, header, rows):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        paths[name] = path

    _write("layer_weights.csv", LAYER_WEIGHTS_HEADER,
           [(task, layer, repr(float(w)))
            for task, ws in sorted(weight_rows.items())
            for layer, w in enumerate(ws)])
    _write("cca.csv", CCA_HEADER,
           [(layer, repr(float(score))) for layer, score in cca_rows])
    _write("probes.csv", PROBES_HEADER,
           [(r.task, r.encoder, r.layer_selection, repr(float(r.accuracy)))
            for r in reports])
    return paths
