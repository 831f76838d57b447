"""CTC loss, the state-matching grafting loss, greedy decoding and WER."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import log_softmax

BLANK = 11
N_CLASSES = 12


class InfeasibleError(ValueError):
    """The sequence is too short to emit the label string under CTC."""


class ZeroNormError(ValueError):
    pass


@dataclass(frozen=True)
class TngaLossValue:
    total: float
    ncs_term: float
    mae_term: float


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def ctc_min_frames(labels) -> int:
    """Shortest input that can emit ``labels``: one frame per token plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


@njit(cache=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + np.log1p(np.exp(-abs(a - b)))


@njit(cache=True)
def _ctc_tables(logp, ext):
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lae(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != ext[s - 2]:
                a = _lae(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + logp[t, ext[s]]
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lae(b, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != ext[s + 2]:
                b = _lae(b, beta[t + 1, s + 2])
            beta[t, s] = b + logp[t, ext[s]]
    return alpha, beta


def _extend(labels, blank):
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_loss(logits, labels, blank: int = BLANK):
    """Negative log-likelihood of ``labels`` under CTC and its gradient w.r.t. logits.

    Softmax is applied here.  Raises InfeasibleError when T is too short.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, C = logits.shape
    if np.any(labels == blank) or np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in [0, {C}) and exclude blank {blank}")
    if T < ctc_min_frames(labels) or T == 0:
        raise InfeasibleError(f"{T} frames cannot emit {len(labels)} labels")
    logp = log_softmax(logits, axis=1)
    ext = _extend(labels, blank)
    alpha, beta = _ctc_tables(logp, ext)
    S = len(ext)
    ll = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    # posterior occupancy per (t, class): sum_s alpha*beta / p(l|x), dividing out the double-counted emission
    ab = alpha + beta - logp[:, ext]
    post = np.zeros((T, C))
    for s in range(S):
        post[:, ext[s]] += np.exp(ab[:, s] - ll)
    grad = np.exp(logp) - post
    return float(-ll), grad


def ctc_brute_force(logits, labels, blank: int = BLANK) -> float:
    """Exhaustive sum over all alignments; for small oracles only."""
    import itertools

    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=1)
    T, C = logp.shape
    target = list(labels)
    total = -np.inf
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            total = np.logaddexp(total, sum(logp[t, c] for t, c in enumerate(path)))
    return float(-total)


# ---------------------------------------------------------------------------
# State matching
# ---------------------------------------------------------------------------


def _rows(x):
    return x.states if hasattr(x, "states") else np.asarray(x, dtype=np.float64)


def tnga_loss(H, G, pairing=None):
    """(1 - mean cosine) + mean over pairs of the per-dimension mean |h - g|.

    ``pairing`` is a StatePairing (or (T, 2) index array) of (i_h, i_g);
    None pairs rows one to one.  Returns (TngaLossValue, dL/dG) with the
    gradient shaped like G (zeros on unpaired rows).
    """
    Hs, Gs = _rows(H), _rows(G)
    if pairing is None:
        if len(Hs) != len(Gs):
            raise ValueError("unpaired state sequences must have equal length")
        ih = ig = np.arange(len(Hs))
    else:
        pairs = pairing.pairs if hasattr(pairing, "pairs") else np.asarray(pairing)
        ih, ig = pairs[:, 0], pairs[:, 1]
    if Hs.shape[1] != Gs.shape[1]:
        raise ValueError(f"state widths differ: {Hs.shape[1]} vs {Gs.shape[1]}")
    T = len(ih)
    if T < 1:
        raise ValueError("need at least one state pair")
    h, g = Hs[ih], Gs[ig]
    D = h.shape[1]
    nh = np.linalg.norm(h, axis=1)
    ng = np.linalg.norm(g, axis=1)
    if np.any(nh == 0) or np.any(ng == 0):
        raise ZeroNormError("zero-norm state vector in pairing; cosine undefined")
    dots = np.sum(h * g, axis=1)
    cos = dots / (nh * ng)
    diff = g - h
    ncs = 1.0 - cos.mean()
    mae = np.abs(diff).mean()
    # d cos / d g = h/(|h||g|) - cos * g/|g|^2
    dcos = h / (nh * ng)[:, None] - (cos / ng**2)[:, None] * g
    dg = -dcos / T + np.sign(diff) / (T * D)
    grad = np.zeros_like(Gs)
    np.add.at(grad, ig, dg)
    return TngaLossValue(float(ncs + mae), float(ncs), float(mae)), grad


# ---------------------------------------------------------------------------
# Decoding and scoring
# ---------------------------------------------------------------------------


def collapse(path, blank: int = BLANK) -> list[int]:
    out, prev = [], None
    for c in path:
        c = int(c)
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


def greedy_decode(logits, blank: int = BLANK) -> list[int]:
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        return []
    return collapse(np.argmax(logits, axis=1), blank)


def edit_distance(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(refs, hyps) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    n = sum(len(r) for r in refs)
    if n == 0:
        raise ValueError("empty reference corpus")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / n
