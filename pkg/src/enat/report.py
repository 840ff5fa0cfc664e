"""Figures for the report path: loss curves, per-bucket BLEU, latency scatter."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(records: Sequence[Mapping], path, title: str = "training losses") -> Path:
    """One line per loss component that is ever nonzero, against the step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in records]
    for key in ("l_neg", "l_align", "l_adv", "v_word", "total"):
        ys = [r.get(key, 0.0) for r in records]
        if any(ys):
            ax.plot(steps, ys, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize="small")
    return _save(fig, path)


def plot_buckets(tables: Mapping[str, Sequence[Mapping]], path) -> Path:
    """Grouped bars of per-bucket BLEU; ``tables`` maps a system name to its bucket rows."""
    labels = sorted({(r["lo"], r["hi"]) for rows in tables.values() for r in rows})
    width = 0.8 / max(len(tables), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, (name, rows) in enumerate(tables.items()):
        by = {(r["lo"], r["hi"]): r["bleu"] for r in rows}
        xs = [i + k * width for i, lab in enumerate(labels) if lab in by]
        ax.bar(xs, [by[lab] for lab in labels if lab in by], width, label=name)
    ax.set_xticks([i + width * (len(tables) - 1) / 2 for i in range(len(labels))])
    ax.set_xticklabels([f"{lo}-{hi - 1}" for lo, hi in labels])
    ax.set_xlabel("reference length")
    ax.set_ylabel("BLEU")
    ax.legend(fontsize="small")
    return _save(fig, path)


def plot_latency(summaries: Sequence, path) -> Path:
    """Per-sentence wall time against output length, one series per decoding mode."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for s in summaries:
        ax.scatter(s.lengths, [1e3 * t for t in s.times], s=6, label=s.mode)
    ax.set_xlabel("output length")
    ax.set_ylabel("ms per sentence")
    ax.legend(fontsize="small")
    return _save(fig, path)
