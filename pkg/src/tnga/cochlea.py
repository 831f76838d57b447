"""Software spiking cochlea.

A 64-stage cascade of second-order band-pass sections

    H_n(s) = prod_{i<=n} tau_i s / (tau_i^2 s^2 + tau_i s / Q_i + 1),   tau_i = 1 / (2 pi f_i)

is tapped after every stage.  Each tap is half-wave rectified against
``v_ref`` and drives a linear-leak integrate-and-fire neuron

    dV/dt = gain * max(0, V_n - v_ref) - leak,   V >= 0,

which emits an event and resets to 0 when V reaches ``theta``.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from numba import njit
from scipy import optimize
from scipy import signal as sps

from .signal import Waveform

log = logging.getLogger(__name__)

N_CHANNELS = 64
F_MIN = 50.0
F_MAX_CAP = 20000.0
NYQUIST_FRACTION = 0.4

# defaults: a full-scale tone at a channel's best frequency gives ~TARGET_RATE events/s
DEFAULT_Q = 4.0
DEFAULT_V_REF = 0.0
DEFAULT_THETA = 1.0
DEFAULT_LEAK = 10.0
TARGET_RATE = 200.0
REFERENCE_AMPLITUDE = 1.0

# stages whose center exceeds this fraction of fs get a least-squares refinement
_REFINE_ABOVE = 0.05
_FIT_BAND = 0.2


@dataclass(frozen=True)
class ChannelParams:
    f: float
    Q: float = DEFAULT_Q
    v_ref: float = DEFAULT_V_REF
    theta: float = DEFAULT_THETA
    leak: float = DEFAULT_LEAK
    gain: float = 1.0

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"center frequency must be positive, got {self.f}")
        if not self.Q > 0:
            raise ValueError(f"Q must be positive, got {self.Q}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.leak < 0:
            raise ValueError(f"leak must be >= 0, got {self.leak}")
        if not self.gain > 0:
            raise ValueError(f"gain must be positive, got {self.gain}")

    @property
    def tau(self) -> float:
        return 1.0 / (2.0 * math.pi * self.f)


@dataclass(frozen=True)
class MismatchSpec:
    sigma_theta: float = 0.0
    sigma_Q: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_theta < 0 or self.sigma_Q < 0:
            raise ValueError("mismatch sigmas must be >= 0")


@dataclass(frozen=True)
class CochleaConfig:
    channels: tuple[ChannelParams, ...]
    sample_rate: int
    mismatch: MismatchSpec | None = None

    def __post_init__(self):
        chans = tuple(self.channels)
        object.__setattr__(self, "channels", chans)
        if len(chans) != N_CHANNELS:
            raise ValueError(f"expected {N_CHANNELS} channels, got {len(chans)}")
        f = np.array([c.f for c in chans])
        if np.any(np.diff(f) >= 0):
            raise ValueError("center frequencies must strictly decrease along the cascade")
        if f.min() < F_MIN - 1e-9 or f.max() > F_MAX_CAP + 1e-9:
            raise ValueError(f"center frequencies must lie in [{F_MIN}, {F_MAX_CAP}] Hz")
        if f.max() >= self.sample_rate / 2:
            raise ValueError("center frequency above Nyquist")

    @property
    def center_frequencies(self) -> np.ndarray:
        return np.array([c.f for c in self.channels])

    def to_dict(self):
        return {
            "sample_rate": self.sample_rate,
            "channels": [asdict(c) for c in self.channels],
            "mismatch": asdict(self.mismatch) if self.mismatch else None,
        }

    @classmethod
    def from_dict(cls, d):
        mm = d.get("mismatch")
        return cls(
            channels=tuple(ChannelParams(**c) for c in d["channels"]),
            sample_rate=int(d["sample_rate"]),
            mismatch=MismatchSpec(**mm) if mm else None,
        )


def save_config(config: CochleaConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=1)


def load_config(path) -> CochleaConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"cannot parse cochlea config {path}: {exc}") from exc
    # a bare {"sample_rate": fs} asks for the defaults
    if "channels" not in d:
        cfg = default_config(int(d["sample_rate"]))
        if d.get("mismatch"):
            cfg = apply_mismatch(cfg, MismatchSpec(**d["mismatch"]))
        return cfg
    return CochleaConfig.from_dict(d)


@dataclass(frozen=True)
class EventStream:
    """Events as parallel arrays: timestamps (µs, int64) and channel indices."""

    t_us: np.ndarray
    channel: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_us, dtype=np.int64).reshape(-1)
        ch = np.asarray(self.channel, dtype=np.int64).reshape(-1)
        if t.shape != ch.shape:
            raise ValueError("timestamp and channel arrays differ in length")
        if ch.size and (ch.min() < 0 or ch.max() >= N_CHANNELS):
            raise ValueError("channel index out of range")
        object.__setattr__(self, "t_us", t)
        object.__setattr__(self, "channel", ch)

    def __len__(self):
        return len(self.t_us)

    @property
    def N(self) -> int:
        return len(self.t_us)

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t_us) >= 0))

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64))

    def counts_per_channel(self) -> np.ndarray:
        return np.bincount(self.channel, minlength=N_CHANNELS)


def write_events_csv(events: EventStream, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "channel"])
        w.writerows(zip(events.t_us.tolist(), events.channel.tolist()))


def read_events_csv(path) -> EventStream:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["t_us", "channel"]:
            raise ValueError(f"{path}: expected header 't_us,channel', got {header}")
        rows = [(int(a), int(b)) for a, b in r]
    if not rows:
        return EventStream.empty()
    arr = np.array(rows, dtype=np.int64)
    ev = EventStream(arr[:, 0], arr[:, 1])
    if not ev.is_sorted():
        raise ValueError(f"{path}: timestamps are not ascending")
    return ev


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def center_frequencies(sample_rate: int) -> np.ndarray:
    f_max = min(F_MAX_CAP, NYQUIST_FRACTION * sample_rate)
    i = np.arange(N_CHANNELS)
    return f_max * (F_MIN / f_max) ** (i / (N_CHANNELS - 1))


def _stage_response(f_center, Q, f):
    tau = 1.0 / (2.0 * np.pi * f_center)
    s = 2j * np.pi * np.asarray(f, dtype=np.float64)
    return tau * s / (tau * tau * s * s + tau * s / Q + 1.0)


def _cascade_magnitude(fc, Q, n, f):
    h = np.ones(np.shape(f), dtype=np.complex128)
    for i in range(n):
        h = h * _stage_response(fc[i], Q[i], f)
    return np.abs(h)


def best_frequency(config: CochleaConfig, n: int) -> tuple[float, float]:
    """(frequency, magnitude) where the n-stage analog cascade peaks.

    For a product of band-pass stages the late taps peak near
    sqrt(f_1 f_n) rather than at f_n, because the tau*s skirts of the
    high stages keep attenuating low frequencies.
    """
    fs = config.sample_rate
    fc = config.center_frequencies
    Q = np.array([c.Q for c in config.channels])
    f = np.geomspace(F_MIN / 2, 0.499 * fs, 2000)
    mag = _cascade_magnitude(fc, Q, n, f)
    i = int(np.argmax(mag))
    lo, hi = f[max(i - 1, 0)], f[min(i + 1, len(f) - 1)]
    res = optimize.minimize_scalar(
        lambda lf: -np.log(_cascade_magnitude(fc, Q, n, np.exp(lf))),
        bounds=(np.log(lo), np.log(hi)), method="bounded", options={"xatol": 1e-10},
    )
    f_best = float(np.exp(res.x))
    return f_best, float(_cascade_magnitude(fc, Q, n, f_best))


def default_config(sample_rate: int) -> CochleaConfig:
    """64 log-spaced channels from min(20 kHz, 0.4 fs) down to 50 Hz.

    Per-channel ``gain`` is set so that a full-scale tone at the channel's
    best frequency fires at about TARGET_RATE events/s; the mean of a
    half-wave rectified sinusoid of amplitude A is A / pi.
    """
    if NYQUIST_FRACTION * sample_rate <= F_MIN:
        raise ValueError(f"sample_rate {sample_rate} Hz too small for a {F_MIN} Hz lowest channel")
    fc = center_frequencies(sample_rate)
    ideal = CochleaConfig(tuple(ChannelParams(f=float(f)) for f in fc), int(sample_rate))
    chans = []
    for n in range(N_CHANNELS):
        _, peak = best_frequency(ideal, n + 1)
        gain = math.pi * (TARGET_RATE * DEFAULT_THETA + DEFAULT_LEAK) / (REFERENCE_AMPLITUDE * peak)
        chans.append(replace(ideal.channels[n], gain=gain))
    return CochleaConfig(tuple(chans), int(sample_rate))


def apply_mismatch(config: CochleaConfig, mismatch: MismatchSpec) -> CochleaConfig:
    """Multiply theta and Q per channel by (1 + eps), eps ~ N(0, sigma) from ``mismatch.seed``."""
    rng = np.random.default_rng(mismatch.seed)
    eps_theta = rng.normal(0.0, 1.0, N_CHANNELS) * mismatch.sigma_theta
    eps_q = rng.normal(0.0, 1.0, N_CHANNELS) * mismatch.sigma_Q
    # keep parameters positive under large draws
    k_theta = np.maximum(1.0 + eps_theta, 0.05)
    k_q = np.maximum(1.0 + eps_q, 0.05)
    chans = tuple(
        replace(c, theta=c.theta * float(kt), Q=c.Q * float(kq))
        for c, kt, kq in zip(config.channels, k_theta, k_q)
    )
    return CochleaConfig(chans, config.sample_rate, mismatch)


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


def analytic_magnitude(config: CochleaConfig, n: int, f) -> float:
    """|H_n(j 2 pi f)| of the first ``n`` analog stages (1-based)."""
    if not 1 <= n <= N_CHANNELS:
        raise ValueError(f"n must be in [1, {N_CHANNELS}], got {n}")
    fc = config.center_frequencies
    Q = np.array([c.Q for c in config.channels])
    mag = _cascade_magnitude(fc, Q, n, f)
    return float(mag) if np.ndim(mag) == 0 else mag


def _matched_stage(f_center, Q, fs):
    """Closed-form stage: impulse-invariant poles, zero at DC, numerator fixed
    by the low-frequency slope (tau s) and the center gain (Q)."""
    w0 = 2 * math.pi * f_center / fs
    zeta = 1.0 / (2.0 * Q)
    r = math.exp(-zeta * w0)
    if zeta < 1:
        a1 = -2 * r * math.cos(math.sqrt(1 - zeta * zeta) * w0)
    else:
        a1 = -2 * r * math.cosh(math.sqrt(zeta * zeta - 1) * w0)
    a2 = r * r
    a_center = abs(1 + a1 * np.exp(-1j * w0) + a2 * np.exp(-2j * w0))
    # B(z) = (1 - z^-1)(c0 + c1 z^-1);  near DC B ~ j w (c0 + c1)
    S = fs / (2 * math.pi * f_center) * (1 + a1 + a2)
    M = Q * a_center / (2 * math.sin(w0 / 2))
    P = (S * S - M * M) / (2 * (1 - math.cos(w0)))
    disc = max(S * S - 4 * P, 0.0)
    c0 = 0.5 * (S + math.sqrt(disc))
    c1 = 0.5 * (S - math.sqrt(disc))
    if abs(c1) > abs(c0):
        c0, c1 = c1, c0
    return np.array([a1, a2, c0, c1])


def _refine_stage(p0, f_center, Q, fs):
    f = np.geomspace(1.0, _FIT_BAND * fs, 300)
    f = np.sort(np.append(f, f_center))
    zi = np.exp(-2j * np.pi * f / fs)
    target = np.log(np.abs(_stage_response(f_center, Q, f)))

    def residual(p):
        a1, a2, c0, c1 = p
        h = (1 - zi) * (c0 + c1 * zi) / (1 + a1 * zi + a2 * zi * zi)
        return np.log(np.abs(h)) - target

    fit = optimize.least_squares(residual, p0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    p = fit.x
    if np.all(np.abs(np.roots([1.0, p[0], p[1]])) < 1.0):
        return p
    log.warning("refined stage at %.1f Hz unstable; keeping closed-form design", f_center)
    return p0


@functools.lru_cache(maxsize=4096)
def _design_stage(f_center: float, Q: float, fs: int):
    if f_center >= fs / 2:
        raise ValueError(f"center frequency {f_center} Hz above Nyquist ({fs / 2} Hz)")
    p = _matched_stage(f_center, Q, fs)
    if f_center > _REFINE_ABOVE * fs:
        p = _refine_stage(p, f_center, Q, fs)
    a1, a2, c0, c1 = p
    b = np.array([c0, c1 - c0, -c1])
    a = np.array([1.0, a1, a2])
    return b, a


def design_biquads(config: CochleaConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-stage (b, a) coefficients, a[0] == 1 and sum(b) == 0 (zero at DC).

    Poles start at the impulse-invariant mapping z = exp(sT).  The
    numerator zeros are set so the low-frequency slope and center gain
    match the analog stage; stages near Nyquist are then refit (all four
    free coefficients) to the analog log-magnitude over [0, 0.2 fs].
    """
    out = []
    for c in config.channels:
        b, a = _design_stage(float(c.f), float(c.Q), int(config.sample_rate))
        out.append((b.copy(), a.copy()))
    return out


def digital_magnitude(coeffs, n: int, f, sample_rate: int) -> np.ndarray:
    """|H| of the first ``n`` digital stages at frequencies ``f`` (Hz)."""
    f = np.atleast_1d(np.asarray(f, dtype=np.float64))
    h = np.ones(f.shape, dtype=np.complex128)
    for b, a in coeffs[:n]:
        _, hi = sps.freqz(b, a, worN=f, fs=sample_rate)
        h = h * hi
    return np.abs(h)


def filter_cascade(coeffs, x: np.ndarray) -> np.ndarray:
    """Run ``x`` through the cascade sample by sample; row n is the tap after stage n.

    Late taps carry the rounding noise of every earlier stage, amplified
    by the downstream gain; prefer :func:`cascade_taps` for simulation.
    """
    taps = np.empty((len(coeffs), len(x)))
    y = np.asarray(x, dtype=np.float64)
    for n, (b, a) in enumerate(coeffs):
        y = sps.lfilter(b, a, y)
        taps[n] = y
    return taps


def _tail_samples(coeffs, floor=1e-12) -> int:
    r = max(float(np.max(np.abs(np.roots(a)))) for _, a in coeffs)
    return int(math.ceil(math.log(floor) / math.log(r))) if r > 0 else 16


def cascade_taps(coeffs, x: np.ndarray) -> np.ndarray:
    """Same LTI operation as :func:`filter_cascade`, evaluated per FFT bin.

    The cascade's dynamic range across frequency (>1e40 for late taps)
    exceeds float64; in the frequency domain each bin's rounding error
    stays relative to that bin.  Zero padding covers the impulse-response
    tail down to 1e-12 so the circular wrap is negligible.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    nfft = int(2 ** math.ceil(math.log2(n + _tail_samples(coeffs))))
    X = np.fft.rfft(x, nfft)
    zi = np.exp(-2j * np.pi * np.arange(nfft // 2 + 1) / nfft)
    H = np.ones_like(zi)
    taps = np.empty((len(coeffs), n))
    for k, (b, a) in enumerate(coeffs):
        H = H * ((b[0] + b[1] * zi + b[2] * zi * zi) / (a[0] + a[1] * zi + a[2] * zi * zi))
        taps[k] = np.fft.irfft(X * H, nfft)[:n]
    return taps


# ---------------------------------------------------------------------------
# Neurons
# ---------------------------------------------------------------------------


@njit(cache=True)
def _iaf_kernel(drive, dt, leak, theta):
    n_steps, n_ch = drive.shape
    v = np.zeros(n_ch)
    cap = 1024
    steps = np.empty(cap, np.int64)
    chans = np.empty(cap, np.int64)
    k = 0
    for t in range(n_steps):
        for c in range(n_ch):
            u = v[c] + dt * (drive[t, c] - leak[c])
            if u < 0.0:
                u = 0.0
            if u >= theta[c]:
                if k == cap:
                    cap *= 2
                    s2 = np.empty(cap, np.int64)
                    c2 = np.empty(cap, np.int64)
                    s2[:k] = steps[:k]
                    c2[:k] = chans[:k]
                    steps = s2
                    chans = c2
                steps[k] = t
                chans[k] = c
                k += 1
                u = 0.0
            v[c] = u
    return steps[:k], chans[:k]


def integrate_and_fire(drive: np.ndarray, sample_rate: float, leak, theta):
    """Linear-leak IAF over a (steps, channels) drive already scaled by gain.

    Returns (step indices, channel indices) of spikes, ordered by step and
    then channel.
    """
    drive = np.ascontiguousarray(np.atleast_2d(np.asarray(drive, dtype=np.float64)))
    n_ch = drive.shape[1]
    leak = np.broadcast_to(np.asarray(leak, dtype=np.float64), (n_ch,)).copy()
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), (n_ch,)).copy()
    return _iaf_kernel(drive, 1.0 / float(sample_rate), leak, theta)


def rectify(v: np.ndarray, v_ref) -> np.ndarray:
    return np.maximum(0.0, v - v_ref)


def run_cochlea(config: CochleaConfig, waveform: Waveform) -> EventStream:
    if waveform.sample_rate != config.sample_rate:
        raise ValueError(
            f"waveform sample rate {waveform.sample_rate} != cochlea rate {config.sample_rate}"
        )
    x = waveform.samples
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input sample")
    if len(x) == 0:
        return EventStream.empty()
    taps = cascade_taps(design_biquads(config), x)
    ch = config.channels
    v_ref = np.array([c.v_ref for c in ch])[:, None]
    gain = np.array([c.gain for c in ch])[:, None]
    drive = (gain * rectify(taps, v_ref)).T
    steps, chans = integrate_and_fire(
        drive, config.sample_rate, [c.leak for c in ch], [c.theta for c in ch]
    )
    t_us = np.round(steps * (1e6 / config.sample_rate)).astype(np.int64)
    return EventStream(t_us, chans)
