"""Synthetic speech-like corpus, weak augmentation, and duration-budgeted
batching.

Utterances are harmonic tones: each speaker owns a pitch, a spectral tilt
and a comb ripple (recoverable from long-term spectra at full resolution),
while per-frame phone identity moves a spectral bump across a fixed set of
center frequencies (recoverable from the per-frame spectral peak).  The two
factors are independent by construction, which is what the probing suite
needs to separate "what is said" from "who says it".

Augmentation mixes one synthetic noise category (broadband, competing
talker, or tonal music) at an exactly-achieved SNR drawn from the category's
range, optionally convolving a decaying synthetic room impulse response;
labels are untouched.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

FRAME_SAMPLES = 320
MAX_HARMONIC_HZ = 7600.0
PHONE_SIGMA_HZ = 220.0


@dataclass
class Utterance:
    waveform: np.ndarray      # float32 samples, peak <= 1
    speaker_id: int
    phone_seq: np.ndarray     # one int label per 20 ms frame
    utt_id: str

    def __post_init__(self):
        if len(self.phone_seq) != len(self.waveform) // FRAME_SAMPLES:
            raise ValueError(
                f"{self.utt_id}: {len(self.phone_seq)} phone frames for "
                f"{len(self.waveform)} samples (expected {len(self.waveform) // FRAME_SAMPLES})")

    @property
    def num_frames(self) -> int:
        return len(self.phone_seq)

    @property
    def duration_s(self) -> float:
        return len(self.waveform) / 16000.0


@dataclass
class AugmentConfig:
    apply_fraction: float = 0.125
    snr_noise_db: tuple[float, float] = (5.0, 15.0)
    snr_speech_db: tuple[float, float] = (13.0, 20.0)
    snr_music_db: tuple[float, float] = (5.0, 15.0)
    rir_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_fraction <= 1.0:
            raise ValueError(f"apply_fraction {self.apply_fraction} outside [0, 1]")
        for name in ("snr_noise_db", "snr_speech_db", "snr_music_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) has low > high")

    def range_for(self, category: str) -> tuple[float, float]:
        return {"noise": self.snr_noise_db, "speech": self.snr_speech_db,
                "music": self.snr_music_db}[category]


@dataclass
class AugmentInfo:
    applied: bool
    category: Optional[str] = None
    snr_drawn_db: Optional[float] = None
    snr_achieved_db: Optional[float] = None
    rir_applied: bool = False
    skipped_silent: bool = False


@dataclass
class SpeakerVoice:
    f0: float
    tilt: float
    ripple_period: float
    ripple_phase: float

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        tilt = (np.maximum(freqs, 1.0) / 200.0) ** (-self.tilt)
        ripple = 1.0 + 0.6 * np.sin(2.0 * math.pi * freqs / self.ripple_period
                                    + self.ripple_phase)
        return tilt * ripple


def phone_centers(inventory: int) -> np.ndarray:
    return np.linspace(500.0, 3400.0, inventory)


def speaker_voice(speaker_id: int, seed: int) -> SpeakerVoice:
    rng = np.random.default_rng([seed, 31, speaker_id])
    return SpeakerVoice(
        f0=float(rng.uniform(140.0, 250.0)),
        tilt=float(rng.uniform(0.2, 0.8)),
        ripple_period=float(rng.uniform(600.0, 1200.0)),
        ripple_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


def _render(voice: SpeakerVoice, phones: np.ndarray, centers: np.ndarray,
            rng: np.random.Generator, sample_rate: int = 16000) -> np.ndarray:
    """Harmonic synthesis: per-frame harmonic amplitudes follow the speaker
    envelope times a Gaussian bump at the frame's phone center."""
    n_frames = len(phones)
    n = n_frames * FRAME_SAMPLES
    harmonics = np.arange(1, int(MAX_HARMONIC_HZ / voice.f0) + 1)
    freqs = harmonics * voice.f0                                  # [K]
    spk = voice.envelope(freqs)                                   # [K]
    bump = np.exp(-0.5 * ((freqs[:, None] - centers[phones][None, :])
                          / PHONE_SIGMA_HZ) ** 2) + 0.03          # [K, F]
    amps = (spk[:, None] * bump).astype(np.float32)
    amps = np.repeat(amps, FRAME_SAMPLES, axis=1)                 # [K, N]
    t = np.arange(n, dtype=np.float64) / sample_rate
    phases = rng.uniform(0.0, 2.0 * math.pi, size=len(freqs))
    wave = np.zeros(n, dtype=np.float64)
    for k in range(len(freqs)):
        wave += amps[k] * np.sin(2.0 * math.pi * freqs[k] * t + phases[k])
    peak = np.abs(wave).max()
    if peak > 0:
        wave *= 0.95 / peak
    return wave.astype(np.float32)


def _random_phone_track(n_frames: int, inventory: int,
                        rng: np.random.Generator) -> np.ndarray:
    track = np.empty(n_frames, dtype=np.int64)
    pos = 0
    while pos < n_frames:
        hold = int(rng.integers(2, 7))
        track[pos:pos + hold] = rng.integers(0, inventory)
        pos += hold
    return track


def generate_corpus(num_speakers: int, utts_per_speaker: int,
                    phone_inventory: int, seed: int,
                    utt_seconds: tuple[float, float] = (2.5, 3.5)) -> list[Utterance]:
    """Deterministic synthetic corpus; regeneration with the same seed is
    bit-identical (every utterance draws from its own derived rng)."""
    if min(num_speakers, utts_per_speaker, phone_inventory) < 1:
        raise ValueError("num_speakers, utts_per_speaker, phone_inventory must be >= 1")
    centers = phone_centers(phone_inventory)
    corpus: list[Utterance] = []
    for spk in range(num_speakers):
        voice = speaker_voice(spk, seed)
        for j in range(utts_per_speaker):
            rng = np.random.default_rng([seed, 17, spk, j])
            seconds = rng.uniform(*utt_seconds)
            n_frames = max(int(round(seconds * 50.0)), 10)
            phones = _random_phone_track(n_frames, phone_inventory, rng)
            wave = _render(voice, phones, centers, rng)
            corpus.append(Utterance(waveform=wave, speaker_id=spk,
                                    phone_seq=phones,
                                    utt_id=f"spk{spk:03d}_utt{j:03d}"))
    return corpus


# ---------------------------------------------------------------------------
# noise bank + augmentation

class NoiseBank:
    """Synthetic stand-ins for the three interference categories: broadband
    noise, a competing synthetic talker, and tonal note sequences."""

    CATEGORIES = ("noise", "speech", "music")

    def __init__(self, seed: int = 0, clips_per_category: int = 4,
                 clip_seconds: float = 4.0):
        self.clips: dict[str, list[np.ndarray]] = {c: [] for c in self.CATEGORIES}
        n = int(clip_seconds * 16000)
        n_frames = n // FRAME_SAMPLES
        for i in range(clips_per_category):
            rng = np.random.default_rng([seed, 101, i])
            self.clips["noise"].append(rng.normal(0.0, 0.2, size=n).astype(np.float32))

            voice = speaker_voice(10_000 + i, seed)
            phones = _random_phone_track(n_frames, 5, rng)
            self.clips["speech"].append(_render(voice, phones, phone_centers(5), rng))

            self.clips["music"].append(self._notes(n, rng))

    @staticmethod
    def _notes(n: int, rng: np.random.Generator) -> np.ndarray:
        scale = 220.0 * 2.0 ** (np.array([0, 2, 4, 5, 7, 9, 11]) / 12.0)
        note_len = 4000
        t = np.arange(n) / 16000.0
        wave = np.zeros(n)
        for start in range(0, n, note_len):
            f = rng.choice(scale) * rng.choice([1.0, 2.0])
            seg = slice(start, min(start + note_len, n))
            for mult, amp in ((1.0, 1.0), (2.0, 0.5), (3.0, 0.25)):
                wave[seg] += amp * np.sin(2.0 * math.pi * f * mult * t[seg])
        peak = np.abs(wave).max()
        return (0.8 * wave / peak).astype(np.float32)

    def sample(self, category: str, length: int, rng: np.random.Generator) -> np.ndarray:
        clip = self.clips[category][rng.integers(len(self.clips[category]))]
        if len(clip) < length:
            clip = np.tile(clip, length // len(clip) + 1)
        start = int(rng.integers(0, len(clip) - length + 1))
        return clip[start:start + length]


def synthetic_rir(rng: np.random.Generator, length: int = 3200,
                  decay_s: float = 0.08) -> np.ndarray:
    """Exponentially decaying impulse response with a unit direct path."""
    t = np.arange(length) / 16000.0
    tail = rng.normal(size=length) * np.exp(-t / decay_s)
    h = 0.3 * tail / (np.abs(tail).max() + 1e-12)
    h[0] = 1.0
    return h.astype(np.float32)


def measure_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    ps = float(np.mean(np.asarray(signal, dtype=np.float64) ** 2))
    pn = float(np.mean(np.asarray(noise, dtype=np.float64) ** 2))
    return 10.0 * math.log10(ps / pn)


def augment(utt: Utterance, cfg: AugmentConfig, bank: NoiseBank,
            rng: np.random.Generator) -> tuple[Utterance, AugmentInfo]:
    """With probability ``apply_fraction`` mix one noise category at a drawn
    SNR (achieved exactly by construction), optionally add reverberation.
    Speaker and phone labels are never altered."""
    if rng.uniform() >= cfg.apply_fraction:
        return utt, AugmentInfo(applied=False)
    signal = utt.waveform.astype(np.float64)
    p_sig = float(np.mean(signal ** 2))
    if p_sig <= 0.0:
        return utt, AugmentInfo(applied=False, skipped_silent=True)
    category = bank.CATEGORIES[rng.integers(len(bank.CATEGORIES))]
    lo, hi = cfg.range_for(category)
    snr = float(rng.uniform(lo, hi))
    noise = bank.sample(category, len(signal), rng).astype(np.float64)
    p_noise = float(np.mean(noise ** 2))
    gain = math.sqrt(p_sig / (p_noise * 10.0 ** (snr / 10.0)))
    noise = noise * gain
    mixed = signal + noise
    achieved = measure_snr_db(signal, noise)
    rir_applied = False
    if cfg.rir_enabled:
        h = synthetic_rir(rng)
        mixed = np.convolve(mixed, h)[: len(signal)]
        rir_applied = True
    peak = np.abs(mixed).max()
    if peak > 1.0:
        mixed = mixed / peak
    out = Utterance(waveform=mixed.astype(np.float32), speaker_id=utt.speaker_id,
                    phone_seq=utt.phone_seq, utt_id=utt.utt_id)
    return out, AugmentInfo(applied=True, category=category, snr_drawn_db=snr,
                            snr_achieved_db=achieved, rir_applied=rir_applied)


# ---------------------------------------------------------------------------
# batching

@dataclass
class BatchItem:
    utt_id: str
    speaker_id: int
    waveform: np.ndarray      # cropped (and possibly augmented) samples
    phone_frames: np.ndarray  # labels aligned with the crop
    frame_offset: int

    @property
    def num_frames(self) -> int:
        return len(self.phone_frames)


@dataclass
class Batch:
    items: list[BatchItem]

    @property
    def seconds(self) -> float:
        return sum(len(i.waveform) for i in self.items) / 16000.0

    def waveforms(self) -> list[np.ndarray]:
        return [i.waveform for i in self.items]


def _crop(utt: Utterance, crop_frames: int, rng: np.random.Generator) -> BatchItem:
    n_frames = utt.num_frames
    if n_frames >= crop_frames:
        off = int(rng.integers(0, n_frames - crop_frames + 1))
        wave = utt.waveform[off * FRAME_SAMPLES:(off + crop_frames) * FRAME_SAMPLES]
        phones = utt.phone_seq[off:off + crop_frames]
    else:
        # shorter utterance: right-pad with silence, repeat the last phone
        off = 0
        pad = crop_frames - n_frames
        wave = np.concatenate([utt.waveform[: n_frames * FRAME_SAMPLES],
                               np.zeros(pad * FRAME_SAMPLES, dtype=np.float32)])
        phones = np.concatenate([utt.phone_seq, np.full(pad, utt.phone_seq[-1])])
    return BatchItem(utt_id=utt.utt_id, speaker_id=utt.speaker_id,
                     waveform=wave.copy(), phone_frames=phones.copy(), frame_offset=off)


def batch_stream(corpus: Sequence[Utterance], max_seconds_per_batch: float,
                 crop_seconds: float, seed: int,
                 augment_cfg: Optional[AugmentConfig] = None,
                 bank: Optional[NoiseBank] = None) -> Iterator[Batch]:
    """Endless deterministic stream of duration-budgeted batches of random
    crops; epoch order, crop offsets and augmentation draws all derive from
    ``seed``.  Every utterance appears exactly once per epoch (a partial
    batch flushes at the epoch boundary)."""
    if not corpus:
        raise ValueError("batch_stream: empty corpus")
    rng = np.random.default_rng([seed, 271])
    crop_frames = max(int(round(crop_seconds * 50.0)), 1)
    per_item_s = crop_frames / 50.0
    capacity = max(int(max_seconds_per_batch / per_item_s), 1)
    while True:
        pending: list[BatchItem] = []
        for i in rng.permutation(len(corpus)):
            utt = corpus[i]
            if augment_cfg is not None and bank is not None:
                utt, _ = augment(utt, augment_cfg, bank, rng)
            pending.append(_crop(utt, crop_frames, rng))
            if len(pending) == capacity:
                yield Batch(items=pending)
                pending = []
        if pending:
            yield Batch(items=pending)


def make_batches(corpus: Sequence[Utterance], max_seconds_per_batch: float,
                 crop_seconds: float, seed: int,
                 augment_cfg: Optional[AugmentConfig] = None,
                 bank: Optional[NoiseBank] = None) -> list[Batch]:
    """One epoch of batches (each utterance cropped once)."""
    if not corpus:
        raise ValueError("make_batches: empty corpus")
    stream = batch_stream(corpus, max_seconds_per_batch, crop_seconds, seed,
                          augment_cfg, bank)
    crop_frames = max(int(round(crop_seconds * 50.0)), 1)
    capacity = max(int(max_seconds_per_batch / (crop_frames / 50.0)), 1)
    n_batches = math.ceil(len(corpus) / capacity)
    return [next(stream) for _ in range(n_batches)]


# ---------------------------------------------------------------------------
# corpus persistence

def save_corpus(corpus: Sequence[Utterance], directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for utt in corpus:
        fname = f"{utt.utt_id}.npy"
        np.save(os.path.join(directory, fname), utt.waveform)
        lines.append(json.dumps({
            "utt_id": utt.utt_id, "speaker_id": utt.speaker_id,
            "phones": utt.phone_seq.tolist(),
            "duration_s": round(utt.duration_s, 4), "file": fname,
        }, sort_keys=True))
    with open(os.path.join(directory, "manifest.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(directory: str) -> list[Utterance]:
    manifest = os.path.join(directory, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    corpus = []
    with open(manifest) as fh:
        for line in fh:
            meta = json.loads(line)
            wave = np.load(os.path.join(directory, meta["file"]))
            corpus.append(Utterance(
                waveform=wave, speaker_id=meta["speaker_id"],
                phone_seq=np.asarray(meta["phones"], dtype=np.int64),
                utt_id=meta["utt_id"]))
    return corpus
