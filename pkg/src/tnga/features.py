"""Log-Mel spectrogram and time-binned spike-count (TBSC) features.

Both extractors return a frame matrix plus per-frame timestamps in µs
taken at window centers, so audio and event frames can be paired by time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .cochlea import N_CHANNELS, EventStream
from .signal import Waveform

LOG_FLOOR = 1e-10
N_MELS = 40
MAGIC = b"TFTR"


@dataclass(frozen=True)
class FeatureConfig:
    window_ms: float = 25.0
    stride_ms: float = 10.0
    n_bands: int = N_MELS

    def __post_init__(self):
        if not self.stride_ms > 0 or self.window_ms < self.stride_ms:
            raise ValueError(f"need window_ms >= stride_ms > 0, got {self.window_ms}/{self.stride_ms}")
        if self.n_bands < 1:
            raise ValueError("n_bands must be >= 1")

    @property
    def tag(self) -> str:
        return f"{self.window_ms:g}w/{self.stride_ms:g}s"

    @classmethod
    def parse(cls, tag: str, n_bands: int = N_MELS) -> "FeatureConfig":
        """Parse a '25w/10s' style tag."""
        try:
            w, s = tag.lower().split("/")
            return cls(float(w.rstrip("w")), float(s.rstrip("s")), n_bands)
        except ValueError as exc:
            raise ValueError(f"bad feature config tag {tag!r} (expected e.g. 25w/10s)") from exc


@dataclass(frozen=True)
class Features:
    """Frame matrix (rows = frames) with frame-center timestamps in µs."""

    frames: np.ndarray
    timestamps: np.ndarray
    config: FeatureConfig

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if frames.ndim != 2 or frames.shape[0] != ts.shape[0]:
            raise ValueError(f"frames {frames.shape} and timestamps {ts.shape} disagree")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.frames.shape[0]


class SpectrogramFeatures(Features):
    pass


class EventFeatures(Features):
    pass


# ---------------------------------------------------------------------------
# Log-Mel
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_bands: int, sample_rate: int) -> np.ndarray:
    """n_bands + 2 edge frequencies in Hz, equally spaced on the HTK mel scale."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2))


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_bands, n_fft // 2 + 1) triangular weights, peak 1 at each band center."""
    edges = mel_band_edges(n_bands, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _frame_params(config: FeatureConfig, sample_rate: int):
    win = int(round(config.window_ms * sample_rate / 1000))
    hop = int(round(config.stride_ms * sample_rate / 1000))
    return win, hop


def log_mel(waveform: Waveform, config: FeatureConfig = FeatureConfig()) -> SpectrogramFeatures:
    fs = waveform.sample_rate
    win, hop = _frame_params(config, fs)
    x = waveform.samples
    if len(x) < win:
        raise ValueError(f"waveform has {len(x)} samples, shorter than one {win}-sample window")
    n_frames = (len(x) - win) // hop + 1
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2
    energy = power @ mel_filterbank(config.n_bands, n_fft, fs).T
    feats = np.log(np.maximum(energy, LOG_FLOOR))
    starts_us = np.arange(n_frames) * hop * 1e6 / fs
    ts = np.round(starts_us + win * 1e6 / fs / 2).astype(np.int64)
    return SpectrogramFeatures(feats, ts, config)


# ---------------------------------------------------------------------------
# TBSC
# ---------------------------------------------------------------------------


def tbsc(events: EventStream, config: FeatureConfig, duration_us: int) -> EventFeatures:
    """Per-channel event counts over windows [j*stride, j*stride + window)."""
    if duration_us < 0:
        raise ValueError("negative duration")
    if not events.is_sorted():
        raise ValueError("events must be sorted by timestamp")
    if len(events) and events.t_us[-1] > duration_us:
        raise ValueError(f"event at {events.t_us[-1]} µs beyond duration {duration_us} µs")
    w_us = int(round(config.window_ms * 1000))
    s_us = int(round(config.stride_ms * 1000))
    n_frames = (duration_us - w_us) // s_us + 1 if duration_us >= w_us else 0
    starts = np.arange(n_frames, dtype=np.int64) * s_us
    ends = starts + w_us
    counts = np.zeros((n_frames, N_CHANNELS))
    for ch in np.unique(events.channel):
        t = events.t_us[events.channel == ch]
        counts[:, ch] = np.searchsorted(t, ends, "left") - np.searchsorted(t, starts, "left")
    return EventFeatures(counts, starts + w_us // 2, config)


# ---------------------------------------------------------------------------
# TFTR feature files
# ---------------------------------------------------------------------------


def write_features(features: Features, path) -> None:
    """Binary layout: b"TFTR", u32 rows, u32 cols, u64 timestamps[rows], f32 values (row-major, LE)."""
    frames = features.frames
    rows, cols = frames.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.asarray(features.timestamps, dtype="<u8").tobytes())
        fh.write(np.asarray(frames, dtype="<f4").tobytes())


def read_features(path, config: FeatureConfig | None = None) -> Features:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a TFTR feature file")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", data[4:12])
    need = 12 + 8 * rows + 4 * rows * cols
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    ts = np.frombuffer(data, dtype="<u8", count=rows, offset=12).astype(np.int64)
    vals = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=12 + 8 * rows)
    return Features(vals.reshape(rows, cols).astype(np.float64), ts, config or FeatureConfig(n_bands=cols))
