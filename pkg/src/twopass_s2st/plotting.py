"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_loss_csv(path) -> tuple[np.ndarray, np.ndarray]:
    steps, losses = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    return np.asarray(steps), np.asarray(losses)


def loss_curve_figure(csv_path, out_path, title: str = "training loss") -> Path:
    steps, losses = read_loss_csv(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, losses, lw=0.8, color="tab:blue")
        if len(losses) and np.all(losses > 0):
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, out_path)


def mel_comparison_figure(gold: np.ndarray, generated: np.ndarray, out_path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, sharex=True, figsize=(6.4, 4.8))
        vmin = min(gold.min(), generated.min())
        vmax = max(gold.max(), generated.max())
        for ax, m, label in zip(axes, (gold, generated), ("gold", "generated")):
            ax.imshow(m.T, origin="lower", aspect="auto", vmin=vmin, vmax=vmax, cmap="magma")
            ax.set_ylabel(f"{label}\nmel bin")
            ax.grid(False)
        axes[-1].set_xlabel("frame")
        if title:
            axes[0].set_title(title)
        return _save(fig, out_path)


def stream_timeline_figure(events: list[dict], out_path, chunk_size: int | None = None) -> Path:
    """events: dicts with ``index``, ``tokens_consumed`` and ``emitted_at`` (seconds)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = [e["emitted_at"] for e in events]
        y = [e["tokens_consumed"] for e in events]
        ax.step(x, y, where="post", color="tab:orange", label="tokens consumed at emission")
        ax.plot(x, y, "o", color="tab:orange", ms=4)
        if chunk_size:
            ax.axhline(chunk_size, ls="--", lw=0.8, color="grey", label=f"K = {chunk_size}")
        ax.set_xlabel("wall-clock time since start (s)")
        ax.set_ylabel("speech tokens")
        ax.set_title("streaming segment emission")
        ax.legend(loc="lower right")
        return _save(fig, out_path)


def bleu_precision_figure(report: dict, out_path, title: str = "n-gram precision") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        p = report["precisions"]
        ax.bar([f"{n}-gram" for n in range(1, len(p) + 1)], [100 * v for v in p], color="tab:green")
        ax.set_ylim(0, 105)
        ax.set_ylabel("precision (%)")
        ax.set_title(f"{title}: BLEU {report['score']:.2f}")
        return _save(fig, out_path)
