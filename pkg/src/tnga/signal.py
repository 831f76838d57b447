"""Waveforms, WAV I/O and the synthetic spoken-word corpus.

The corpus stands in for a digit-string dataset: every word class has a
fixed sequence of tone and chirp segments, and each speaker shifts the
frequencies and stretches the durations a little.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

MAX_AMPLITUDE = 0.9

# log-spaced anchor frequencies for word signatures (Hz)
_F_LOW = 650.0
_F_HIGH = 4500.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        """Duration in seconds."""
        return len(self.samples) / self.sample_rate

    @property
    def duration_us(self) -> int:
        return int(round(len(self.samples) * 1e6 / self.sample_rate))


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 11
    words_per_sample: tuple[int, int] = (1, 7)
    seed: int = 0
    sample_rate: int = 16000
    # std of the white background noise; keeps silences off the Log-Mel floor
    noise_level: float = 3e-4

    def __post_init__(self):
        lo, hi = self.words_per_sample
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid words_per_sample range {self.words_per_sample}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        object.__setattr__(self, "words_per_sample", (int(lo), int(hi)))

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "words_per_sample": list(self.words_per_sample),
            "seed": self.seed,
            "sample_rate": self.sample_rate,
            "noise_level": self.noise_level,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "words_per_sample" in d:
            d["words_per_sample"] = tuple(d["words_per_sample"])
        return cls(**d)


@dataclass
class LabeledSample:
    waveform: Waveform
    labels: list[int]
    sample_id: str
    speaker_seed: int = field(default=-1, compare=False)

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError(f"sample {self.sample_id!r} has no labels")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 WAV file into [-1, 1] amplitudes."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise ValueError(f"malformed WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample encoding {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(waveform: Waveform, path) -> None:
    """Write a 16-bit PCM mono file. Out-of-range amplitudes are clamped."""
    x = waveform.samples
    if x.size and (x.max() > 1.0 or x.min() < -1.0):
        n = int(np.sum(np.abs(x) > 1.0))
        warnings.warn(f"clamping {n} samples outside [-1, 1]", RuntimeWarning, stacklevel=2)
        x = np.clip(x, -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, waveform.sample_rate, pcm)


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _anchor_freqs(vocab_size: int) -> np.ndarray:
    return _F_LOW * (_F_HIGH / _F_LOW) ** (np.arange(vocab_size) / (vocab_size - 1))


def _word_recipe(word_class: int, vocab_size: int):
    """Segment list for a class: (kind, f_start, f_end, base duration s, level)."""
    f = _anchor_freqs(vocab_size)
    c = word_class
    segs = [("tone", f[c], f[c], 0.16, 0.85)]
    segs.append(("chirp", f[(3 * c + 2) % vocab_size], f[(7 * c + 5) % vocab_size], 0.09, 0.55))
    if c % 3 != 1:
        k = (c + vocab_size // 2) % vocab_size
        segs.append(("tone", f[k], f[k], 0.07, 0.45))
    return segs


def synth_word(word_class: int, speaker_seed: int, spec: SynthSpec) -> Waveform:
    """Deterministic 200-500 ms word made of 2-3 enveloped tone/chirp segments."""
    if not 0 <= word_class < spec.vocab_size:
        raise ValueError(f"word_class {word_class} outside [0, {spec.vocab_size})")
    fs = spec.sample_rate
    # speaker-level frequency shift, shared by all words of the speaker
    f_scale = 1.0 + np.random.default_rng([speaker_seed, 0xF0]).uniform(-0.05, 0.05)
    rng = np.random.default_rng([speaker_seed, 0xD0, word_class])
    recipe = _word_recipe(word_class, spec.vocab_size)
    durs = np.array([s[3] for s in recipe]) * rng.uniform(0.8, 1.2, size=len(recipe))
    total = durs.sum()
    if total < 0.2 or total > 0.5:
        durs *= np.clip(total, 0.2, 0.5) / total

    pieces = []
    nyq = 0.45 * fs
    for (kind, f0, f1, _, level), d in zip(recipe, durs):
        n = max(int(round(d * fs)), 2)
        t = np.arange(n) / fs
        fa = min(f0 * f_scale, nyq)
        fb = min(f1 * f_scale, nyq)
        # linear chirp phase; a tone is the fa == fb case
        phase = 2 * np.pi * (fa * t + 0.5 * (fb - fa) / (n / fs) * t * t)
        tone = 0.8 * np.sin(phase) + 0.2 * np.sin(2 * phase)
        ramp = min(n // 4, int(0.015 * fs))
        env = np.ones(n)
        if ramp > 0:
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            env[:ramp] = edge
            env[n - ramp:] = edge[::-1]
        pieces.append(level * env * tone)
    x = np.concatenate(pieces)
    x = np.clip(x, -MAX_AMPLITUDE, MAX_AMPLITUDE)
    return Waveform(x, fs)


def _silence(rng, fs) -> np.ndarray:
    return np.zeros(int(round(rng.uniform(0.05, 0.15) * fs)))


def synth_sample(labels, speaker_seed: int, spec: SynthSpec, rng, sample_id: str) -> LabeledSample:
    """Join words with 50-150 ms silences (also used as leading/trailing padding) over a noise floor."""
    fs = spec.sample_rate
    parts = [_silence(rng, fs)]
    for lab in labels:
        parts.append(synth_word(int(lab), speaker_seed, spec).samples)
        parts.append(_silence(rng, fs))
    x = np.concatenate(parts)
    if spec.noise_level > 0:
        x = np.clip(x + rng.normal(0.0, spec.noise_level, size=len(x)), -MAX_AMPLITUDE, MAX_AMPLITUDE)
    return LabeledSample(Waveform(x, fs), [int(v) for v in labels], sample_id, speaker_seed)


def synth_dataset(spec: SynthSpec, n_train: int, n_test: int):
    """Build (train, test) lists of LabeledSample.

    Train speakers draw seeds from [0, 2**31) and test speakers from
    [2**31, 2**32), so the two splits never share a speaker.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.words_per_sample
    out = []
    for split, n, base in (("train", n_train, 0), ("test", n_test, 2**31)):
        samples = []
        for i in range(n):
            speaker = int(base + rng.integers(0, 2**31))
            k = int(rng.integers(lo, hi + 1))
            labels = rng.integers(0, spec.vocab_size, size=k).tolist()
            samples.append(synth_sample(labels, speaker, spec, rng, f"{split}-{i:05d}"))
        out.append(samples)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def write_dataset(samples, directory, split: str) -> Path:
    """Write WAVs plus a JSON-lines manifest; returns the manifest path."""
    directory = Path(directory)
    wav_dir = directory / split
    wav_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{split}.jsonl"
    with open(manifest, "w") as fh:
        for s in samples:
            wav = wav_dir / f"{s.sample_id}.wav"
            write_wav(s.waveform, wav)
            rel = os.path.relpath(wav, directory)
            fh.write(json.dumps({"id": s.sample_id, "wav": rel, "labels": s.labels}) + "\n")
    return manifest


def read_manifest(path):
    """Yield dicts from a JSON-lines manifest, resolving wav paths against its folder.

    ``labels`` may be missing or empty (label-free grafting data).
    """
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
            if "id" not in row or "wav" not in row:
                raise ValueError(f"{path}:{lineno}: manifest row needs 'id' and 'wav'")
            wav = Path(row["wav"])
            if not wav.is_absolute():
                wav = path.parent / wav
            rows.append({"id": row["id"], "wav": wav, "labels": list(row.get("labels") or [])})
    return rows
