"""Temporal alignment between audio-derived and event-derived sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .cochlea import EventStream


@dataclass(frozen=True)
class WarpPath:
    pairs: np.ndarray  # (K, 2) int: (index into A, index into B)
    total_cost: float

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class StatePairing:
    pairs: np.ndarray  # (T, 2) int: (i_a, i_s)

    @property
    def T(self) -> int:
        return len(self.pairs)

    @property
    def ia(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def is_(self) -> np.ndarray:
        return self.pairs[:, 1]


@dataclass
class WarpReport:
    clamped_events: int = 0


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


@njit(cache=True)
def _dtw_tables(dist):
    n, m = dist.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = dist[i - 1, j - 1] + best
    return acc


def dtw(A, B) -> WarpPath:
    """Optimal monotone alignment under Euclidean frame distance.

    Steps are (1,0), (0,1) and (1,1); ties in the traceback prefer the
    diagonal step.
    """
    A, B = _as_2d(A), _as_2d(B)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("dtw needs two nonempty sequences")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    diff = A[:, None, :] - B[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    acc = _dtw_tables(dist)
    i, j = len(A), len(B)
    path = [(i - 1, j - 1)]
    while i > 1 or j > 1:
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    return WarpPath(np.array(path[::-1], dtype=np.int64), float(acc[-1, -1]))


def path_cost(A, B, pairs) -> float:
    """Cost of an explicit path (sum of frame distances along it)."""
    A, B = _as_2d(A), _as_2d(B)
    pairs = np.asarray(pairs)
    d = A[pairs[:, 0]] - B[pairs[:, 1]]
    return float(np.sum(np.sqrt(np.sum(d * d, axis=1))))


def envelope(frames) -> np.ndarray:
    """Per-frame total of z-normalized features, itself z-normalized (1-D)."""
    x = np.asarray(frames, dtype=np.float64)
    sd = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    e = z.sum(axis=1)
    s = e.std()
    return (e - e.mean()) / (s if s > 0 else 1.0)


def warp_events(events: EventStream, path: WarpPath, timestamps_a, timestamps_s, report: WarpReport | None = None):
    """Retime events from the event clock onto the audio clock.

    The time map is piecewise linear through (0, 0), the warp path's
    (t_s, t_a) frame correspondences (averaged when one event frame maps
    to several audio frames), and an end anchor half a frame past the last
    frames.  Events past the end anchor are clamped to it and counted in
    ``report``.
    """
    if len(events) == 0:
        return EventStream.empty()
    ta = np.asarray(timestamps_a, dtype=np.float64)
    ts = np.asarray(timestamps_s, dtype=np.float64)
    pairs = np.asarray(path.pairs)
    src = ts[pairs[:, 1]]
    dst = ta[pairs[:, 0]]
    xs, inv = np.unique(src, return_inverse=True)
    ys = np.bincount(inv, weights=dst) / np.bincount(inv)
    xs = np.concatenate([[0.0], xs, [ts[-1] + ts[0]]])
    ys = np.concatenate([[0.0], ys, [ta[-1] + ta[0]]])
    # a map must be nondecreasing; path correspondences already are
    t = events.t_us.astype(np.float64)
    over = t > xs[-1]
    if report is not None:
        report.clamped_events += int(over.sum())
    mapped = np.interp(np.minimum(t, xs[-1]), xs, ys)
    new_t = np.round(mapped).astype(np.int64)
    order = np.lexsort((events.channel, new_t))
    return EventStream(new_t[order], events.channel[order])


def pair_states(timestamps_a, timestamps_s) -> StatePairing:
    """Monotone nearest-in-time pairing with T = min(T^a, T^s) pairs.

    Each index of the shorter sequence, left to right, takes the nearest
    still-available index of the longer one.  Candidates are restricted so
    pairs stay strictly increasing and enough indices remain for the rest;
    ties go to the earlier candidate.
    """
    ta = np.asarray(timestamps_a, dtype=np.int64)
    ts = np.asarray(timestamps_s, dtype=np.int64)
    if len(ta) == 0 or len(ts) == 0:
        raise ValueError("pair_states needs two nonempty timestamp lists")
    swap = len(ta) > len(ts)
    short, long_ = (ts, ta) if swap else (ta, ts)
    n, m = len(short), len(long_)
    out = np.empty((n, 2), dtype=np.int64)
    lo = 0
    for i, t in enumerate(short):
        hi = m - (n - i)  # inclusive upper bound keeping room for the rest
        k = int(np.searchsorted(long_, t, "left"))
        k = min(max(k, lo), hi)
        # nearest of k and k - 1 within [lo, hi]; earlier wins ties
        if k - 1 >= lo and abs(int(long_[k - 1]) - int(t)) <= abs(int(long_[k]) - int(t)):
            k -= 1
        out[i] = (k, i) if swap else (i, k)
        lo = k + 1
    return StatePairing(out)
