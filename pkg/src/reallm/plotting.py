"""Report figures, rendered headless to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 11,
    "legend.frameon": False,
    "font.size": 10,
}


def _save(fig, path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def training_curves(epochs: Sequence[int], losses: Sequence[float], path,
                    dev_epochs: Sequence[int] = (), dev_wer: Sequence[float] = ()) -> Path:
    """Train loss per epoch, with dev WER on a twin axis when available."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(epochs, losses, marker="o", ms=3, color="tab:blue", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        if len(dev_wer):
            ax2 = ax.twinx()
            ax2.plot(dev_epochs, [100 * w for w in dev_wer], marker="s", ms=3, color="tab:red", label="dev WER")
            ax2.set_ylabel("WER %")
            ax2.grid(False)
            ax2.legend(loc="center right")
        ax.legend(loc="upper right")
        return _save(fig, path)


def bucket_wer_bars(per_mode: Mapping[str, Mapping[str, float]], path) -> Path:
    """Grouped bars: WER per length bucket for each decoding mode."""
    modes = list(per_mode)
    buckets = list(next(iter(per_mode.values()))) if modes else []
    width = 0.8 / max(1, len(modes))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for i, mode in enumerate(modes):
            xs = [j + (i - (len(modes) - 1) / 2) * width for j in range(len(buckets))]
            ax.bar(xs, [100 * per_mode[mode][b] for b in buckets], width, label=mode)
        ax.set_xticks(range(len(buckets)), buckets)
        ax.set_ylabel("WER %")
        ax.legend()
        return _save(fig, path)


def cost_counts(rows: Sequence[tuple[str, float, float]], path) -> Path:
    """Predicted vs measured step counts, one pair of bars per (label, predicted, measured) row."""
    labels = [r[0] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        xs = range(len(rows))
        ax.bar([x - 0.2 for x in xs], [r[1] for r in rows], 0.4, label="cost model")
        ax.bar([x + 0.2 for x in xs], [r[2] for r in rows], 0.4, label="measured")
        ax.set_xticks(list(xs), labels, rotation=15)
        ax.set_ylabel("count")
        ax.legend()
        return _save(fig, path)


def emission_timeline(words: Sequence[tuple[str, int, int]], emissions: Sequence[tuple[str, int]],
                      chunk_ms: int, end_ms: int, path) -> Path:
    """Reference word spans (name, start_ms, end_ms) above decoded (name, chunk) emissions.

    An emission in chunk k is drawn at the end of that chunk, the earliest
    time the decoder could have produced it.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 2.6))
        for name, start, end in words:
            ax.barh(1, end - start, left=start, height=0.5, color="tab:blue", alpha=0.5)
            ax.text((start + end) / 2, 1, name, ha="center", va="center", fontsize=8)
        for i, (name, chunk) in enumerate(emissions):
            t = (chunk + 1) * chunk_ms
            ax.plot([t], [0], marker="v", color="tab:red")
            ax.text(t, -0.25 - 0.2 * (i % 2), name, ha="center", va="top", fontsize=8)
        for k in range(0, end_ms + chunk_ms, chunk_ms):
            ax.axvline(k, color="grey", lw=0.5, alpha=0.4)
        ax.set_yticks([0, 1], ["decoded", "reference"])
        ax.set_ylim(-0.8, 1.5)
        ax.set_xlim(0, max(end_ms, chunk_ms))
        ax.set_xlabel("time (ms)")
        ax.grid(False)
        return _save(fig, path)
