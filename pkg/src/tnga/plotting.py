"""Figures written next to CLI outputs (Agg backend, PNG files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_raster(events, path, title="cochlea events"):
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.scatter(events.t_us / 1e3, events.channel, s=1, c="k", marker="|")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("channel")
    ax.set_ylim(-1, 64)
    ax.set_title(title)
    _save(fig, path)


def plot_features(feats, path, title="features"):
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ts = feats.timestamps / 1e3 if len(feats) else np.zeros(1)
    extent = (ts[0], ts[-1], -0.5, feats.frames.shape[1] - 0.5)
    ax.imshow(feats.frames.T, origin="lower", aspect="auto", extent=extent, cmap="magma")
    ax.set_xlabel("frame center (ms)")
    ax.set_ylabel("band / channel")
    ax.set_title(title)
    _save(fig, path)


def plot_decoded(reference, decoded, path, clip_min=-10.0):
    """Reference and decoded Log-Mel side by side plus a value histogram."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    ref = None if reference is None else np.maximum(reference, clip_min)
    panels = [(ref, "reference (clipped)"), (decoded, "decoded")]
    lo = min(np.min(p) for p, _ in panels if p is not None)
    hi = max(np.max(p) for p, _ in panels if p is not None)
    for ax, (m, name) in zip(axes[:2], panels):
        if m is None:
            ax.axis("off")
            continue
        ax.imshow(m.T, origin="lower", aspect="auto", vmin=lo, vmax=hi, cmap="magma")
        ax.set_title(name)
        ax.set_xlabel("frame")
        ax.set_ylabel("mel band")
    for m, name in panels:
        if m is not None:
            axes[2].hist(m.ravel(), bins=50, alpha=0.5, label=name)
    axes[2].set_xlabel("log energy")
    axes[2].legend()
    _save(fig, path)


def plot_losses(runs, path, ylabel="loss"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in runs:
        ax.plot(np.arange(1, len(r.epoch_losses) + 1), r.epoch_losses, label=f"train seed {r.seed}")
        ax.plot(np.arange(1, len(r.val_losses) + 1), r.val_losses, "--", label=f"val seed {r.seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_wer_bars(rows, path):
    """rows: dicts with condition, model, wer_mean, wer_std (WER as a fraction)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [f"{r['model']}\n{r['condition']}" for r in rows]
    ax.bar(labels, [100 * r["wer_mean"] for r in rows], yerr=[100 * r["wer_std"] for r in rows], color="0.6")
    ax.set_ylabel("WER (%)")
    _save(fig, path)
