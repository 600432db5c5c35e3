"""Pseudo-label production and the synthetic teacher oracle.

Targets for masked prediction come from k-means over per-frame spectral
features (cepstral-mean-normalised log band energies, so constant per-speaker
spectral shape washes out and the clusters track frame content).  Six label
sets differ by seed and by cluster count on a geometric ladder up to the
configured vocabulary; sets attach to content layers at regular intervals
ending at the final layer.

The teacher is a deterministic speaker-embedding oracle: one fixed unit
vector per speaker plus a small utterance-seeded perturbation, standing in
for a pre-trained speaker-distillation model.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .losses import LabelDictionary, LabelEntry

FRAME_SAMPLES = 320  # 20 ms at 16 kHz


class KMeansError(ValueError):
    pass


@dataclass
class Codebook:
    centers: np.ndarray        # [k, feat_dim]
    inertia: float
    seed: int

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _sq_dists(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||f - c||^2 expanded; recompute the f^2 term lazily only if needed for ties
    return (np.sum(features ** 2, axis=1)[:, None]
            - 2.0 * features @ centers.T
            + np.sum(centers ** 2, axis=1)[None, :])


def kmeans_fit(features: np.ndarray, k: int, seed: int, iters: int = 50) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Inertia is non-increasing across iterations (asserted); a cluster that
    empties is re-seeded at the point currently farthest from its assigned
    center, which strictly reduces inertia as well.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < k:
        raise KMeansError(f"kmeans needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, features.shape[1]))
    centers[0] = features[rng.integers(n)]
    closest = np.sum((features - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[i] = features[rng.integers(n)]
            continue
        pick = np.searchsorted(np.cumsum(closest), rng.uniform(0.0, total))
        centers[i] = features[min(pick, n - 1)]
        closest = np.minimum(closest, np.sum((features - centers[i]) ** 2, axis=1))

    def _assignment():
        d = _sq_dists(features, centers)
        a = np.argmin(d, axis=1)
        return a, np.maximum(d[np.arange(n), a], 0.0)

    prev_inertia = np.inf
    for _ in range(iters):
        assign, best = _assignment()
        inertia = float(best.sum())
        assert inertia <= prev_inertia * (1 + 1e-9) + 1e-9, \
            f"k-means inertia increased: {prev_inertia} -> {inertia}"
        if inertia >= prev_inertia - 1e-12:
            prev_inertia = inertia
            break
        prev_inertia = inertia
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = features[mask].mean(axis=0)
            else:
                far = int(np.argmax(best))
                centers[c] = features[far]
                best[far] = 0.0
    else:
        # iteration cap hit after a center update: refresh inertia to match
        _, best = _assignment()
        prev_inertia = float(best.sum())
    return Codebook(centers=centers, inertia=prev_inertia, seed=seed)


def assign_labels(features: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-center index per row; ties resolve to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != codebook.centers.shape[1]:
        raise ValueError(
            f"feature dim {features.shape[1]} != codebook dim {codebook.centers.shape[1]}")
    d = _sq_dists(features, codebook.centers)
    return np.argmin(d, axis=1).astype(np.int64)


def spectral_frame_features(waveform: np.ndarray, n_bands: int = 24,
                            cmn: bool = True) -> np.ndarray:
    """Log band-energy features per non-overlapping 20 ms frame.

    With ``cmn`` the per-utterance mean is subtracted per band, suppressing
    static speaker coloration so the clusters follow frame-level content.
    """
    n = len(waveform) // FRAME_SAMPLES
    frames = np.asarray(waveform[: n * FRAME_SAMPLES], dtype=np.float64)
    frames = frames.reshape(n, FRAME_SAMPLES) * np.hanning(FRAME_SAMPLES)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2       # [n, 161]
    edges = np.linspace(0, power.shape[1], n_bands + 1).astype(int)
    feats = np.stack([power[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])],
                     axis=1)
    feats = np.log(feats + 1e-10)
    if cmn:
        feats = feats - feats.mean(axis=0, keepdims=True)
    return feats


def ladder_cluster_counts(vocab_size: int, num_sets: int) -> list[int]:
    """Geometric ladder of cluster counts ending at ``vocab_size``."""
    return [max(2, vocab_size // (2 ** (num_sets - 1 - i))) for i in range(num_sets)]


def layers_for_sets(content_layers: int, num_sets: int,
                    anchor: Optional[int] = None) -> list[int]:
    """Content layers hosting label sets: ``num_sets`` regularly spaced taps
    between an intermediate anchor (default ceil(L/2)+1) and the last layer.

    If the default anchor leaves fewer than ``num_sets`` layers it slides
    down just enough; fewer total layers than sets is an error.
    """
    if content_layers < num_sets:
        raise ValueError(
            f"cannot place {num_sets} label sets on {content_layers} content layers")
    if num_sets == 1:
        return [content_layers]
    if anchor is None:
        anchor = -(-content_layers // 2) + 1
        anchor = min(anchor, content_layers - num_sets + 1)
    if not 1 <= anchor <= content_layers - num_sets + 1:
        raise ValueError(f"anchor layer {anchor} leaves no room for {num_sets} sets")
    span = content_layers - anchor
    layers = [anchor + round(i * span / (num_sets - 1)) for i in range(num_sets)]
    if len(set(layers)) != num_sets:
        raise ValueError(f"degenerate layer spacing {layers}")
    return layers


class TeacherOracle:
    """Deterministic 512-d speaker embeddings.

    Each speaker id maps to a fixed random unit vector; each utterance adds
    a perturbation of norm ``noise_scale`` in a random direction seeded from
    its id, then renormalises (so within-speaker cosine is about
    ``1/sqrt(1+noise_scale^2)`` regardless of dimension).  Same utterance in,
    same vector out, across runs and processes.
    """

    def __init__(self, dim: int = 512, noise_scale: float = 0.05, seed: int = 0):
        self.dim = dim
        self.noise_scale = noise_scale
        self.seed = seed
        self._table: dict[int, np.ndarray] = {}

    def speaker_vector(self, speaker_id: int) -> np.ndarray:
        if speaker_id not in self._table:
            rng = np.random.default_rng([self.seed, 7919, speaker_id])
            v = rng.normal(size=self.dim)
            self._table[speaker_id] = (v / np.linalg.norm(v)).astype(np.float32)
        return self._table[speaker_id]

    def embed(self, utterance) -> np.ndarray:
        base = self.speaker_vector(utterance.speaker_id)
        if self.noise_scale == 0.0:
            return base
        utt_key = zlib.crc32(utterance.utt_id.encode("utf-8"))
        rng = np.random.default_rng([self.seed, 104729, utt_key])
        direction = rng.normal(size=self.dim)
        direction /= np.linalg.norm(direction)
        v = base + self.noise_scale * direction.astype(np.float32)
        return (v / np.linalg.norm(v)).astype(np.float32)


class LabelStore:
    """All label sets for a corpus: codebooks, the layer map, and per-utterance
    frame labels; persists as one npz plus a JSON manifest."""

    def __init__(self, layer_map: dict[int, int], codebooks: list[Codebook],
                 labels: dict[int, dict[str, np.ndarray]], feature_bands: int):
        self.layer_map = layer_map            # content layer -> set_id
        self.codebooks = codebooks            # indexed by set_id
        self.labels = labels                  # set_id -> utt_id -> frame labels
        self.feature_bands = feature_bands
        layers = sorted(layer_map)
        if layers != list(layer_map):
            raise ValueError("layer map must be ordered by layer")

    @property
    def top_set_id(self) -> int:
        return self.layer_map[max(self.layer_map)]

    def dictionary_for(self, utt_id: str, frame_offset: int = 0,
                       num_frames: Optional[int] = None) -> LabelDictionary:
        entries = {}
        for layer, set_id in self.layer_map.items():
            full = self.labels[set_id][utt_id]
            sl = full[frame_offset:] if num_frames is None else \
                full[frame_offset:frame_offset + num_frames]
            entries[layer] = LabelEntry(set_id=set_id,
                                        codebook=self.codebooks[set_id].centers,
                                        labels=sl)
        return LabelDictionary(entries)

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        for set_id, cb in enumerate(self.codebooks):
            arrays[f"codebook::{set_id}"] = cb.centers
        for set_id, per_utt in self.labels.items():
            for utt_id, lab in per_utt.items():
                arrays[f"labels::{set_id}::{utt_id}"] = lab
        np.savez(os.path.join(directory, "labels.npz"), **arrays)
        manifest = {
            "layer_map": {str(k): v for k, v in self.layer_map.items()},
            "feature_bands": self.feature_bands,
            "sets": [{"set_id": i, "k": cb.k, "seed": cb.seed,
                      "inertia": cb.inertia, "feature_source": "spectral-bands"}
                     for i, cb in enumerate(self.codebooks)],
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str) -> "LabelStore":
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        with np.load(os.path.join(directory, "labels.npz")) as npz:
            arrays = {k: npz[k] for k in npz.files}
        codebooks = []
        for entry in manifest["sets"]:
            codebooks.append(Codebook(centers=arrays[f"codebook::{entry['set_id']}"],
                                      inertia=entry["inertia"], seed=entry["seed"]))
        labels: dict[int, dict[str, np.ndarray]] = {}
        for key, arr in arrays.items():
            if key.startswith("labels::"):
                _, set_id, utt_id = key.split("::", 2)
                labels.setdefault(int(set_id), {})[utt_id] = arr
        layer_map = {int(k): v for k, v in manifest["layer_map"].items()}
        return cls(layer_map=dict(sorted(layer_map.items())), codebooks=codebooks,
                   labels=labels, feature_bands=manifest["feature_bands"])


def build_label_store(corpus, content_layers: int, vocab_size: int,
                      num_sets: int, seed: int, iters: int = 30,
                      n_bands: int = 24, anchor: Optional[int] = None) -> LabelStore:
    """Fit the label-set ladder over spectral features of a corpus.

    One k-means fit per set (distinct seed, distinct cluster count); per-frame
    labels are assigned for every utterance and every set.
    """
    layers = layers_for_sets(content_layers, num_sets, anchor)
    counts = ladder_cluster_counts(vocab_size, num_sets)
    feats = {u.utt_id: spectral_frame_features(u.waveform, n_bands) for u in corpus}
    stacked = np.concatenate(list(feats.values()), axis=0)
    codebooks: list[Codebook] = []
    labels: dict[int, dict[str, np.ndarray]] = {}
    for set_id, k in enumerate(counts):
        cb = kmeans_fit(stacked, k, seed=seed * 1000 + set_id, iters=iters)
        codebooks.append(cb)
        labels[set_id] = {uid: assign_labels(f, cb) for uid, f in feats.items()}
    layer_map = {layer: set_id for set_id, layer in enumerate(layers)}
    return LabelStore(layer_map=dict(sorted(layer_map.items())), codebooks=codebooks,
                      labels=labels, feature_bands=n_bands)
