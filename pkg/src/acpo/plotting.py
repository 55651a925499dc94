"""PNG figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.facecolor": "white",
    "savefig.facecolor": "white",
    "savefig.dpi": 120,
}
BASE_COLOR = "#616161"
FINE_COLOR = "#1565C0"
BAD_COLOR = "#C62828"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _col(rows: list[dict], key: str) -> np.ndarray:
    return np.array([float(r[key]) for r in rows], dtype=np.float64)


def training_curves(rows: list[dict], path) -> Path:
    """Loss components and probe score over fine-tuning steps."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_s) = plt.subplots(1, 2, figsize=(8, 3))
        step = _col(rows, "step")
        for key, color in (("l_mse", BASE_COLOR), ("l_anchor", BAD_COLOR), ("l_quality", FINE_COLOR)):
            ax_l.plot(step, _col(rows, key), lw=0.8, color=color, label=key)
        ax_l.set_yscale("symlog", linthresh=1e-4)
        ax_l.set_xlabel("step")
        ax_l.set_title("loss terms")
        ax_l.legend(frameon=False)
        ax_s.plot(step, _col(rows, "guided_score"), color=FINE_COLOR, lw=1.0, label="guided score")
        ax_d = ax_s.twinx()
        ax_d.plot(step, _col(rows, "anchor_drift"), color=BAD_COLOR, lw=0.6, alpha=0.7, label="anchor drift")
        ax_s.set_xlabel("step")
        ax_s.set_ylabel("probe score")
        ax_d.set_ylabel("anchor drift (RMS)")
        ax_s.set_title("probe score and drift")
        return _save(fig, path)


def base_loss(losses, path, window: int = 100) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        y = np.asarray(losses, dtype=np.float64)
        ax.plot(y, color=BASE_COLOR, lw=0.4, alpha=0.5)
        if y.size >= window:
            smooth = np.convolve(y, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, y.size), smooth, color=FINE_COLOR, lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("denoising MSE")
        return _save(fig, path)


def scorer_scatter(scores, labels, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.scatter(labels, scores, s=4, color=FINE_COLOR, alpha=0.5)
        ax.plot([0, 1], [0, 1], color=BASE_COLOR, lw=0.6, ls="--")
        ax.set_xlabel("label (1 - severity)")
        ax.set_ylabel("predicted score")
        ax.set_title(title)
        return _save(fig, path)


def sample_pairs(base: np.ndarray, fine: np.ndarray, path, k: int = 8) -> Path:
    """Top row baseline, bottom row fine-tuned, same noise per column."""
    k = min(k, len(base))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, k, figsize=(1.1 * k, 2.4), squeeze=False)
        for j in range(k):
            for i, img in enumerate((base[j], fine[j])):
                axes[i, j].imshow(img, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
                axes[i, j].set_xticks([])
                axes[i, j].set_yticks([])
        axes[0, 0].set_ylabel("base")
        axes[1, 0].set_ylabel("fine-tuned")
        return _save(fig, path)


def paired_scores(baseline, finetuned, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        b, f = np.asarray(baseline), np.asarray(finetuned)
        ax.scatter(b, f, s=5, color=np.where(f > b, FINE_COLOR, BAD_COLOR), alpha=0.6)
        lo, hi = min(b.min(), f.min()), max(b.max(), f.max())
        ax.plot([lo, hi], [lo, hi], color=BASE_COLOR, lw=0.6, ls="--")
        ax.set_xlabel("baseline score")
        ax.set_ylabel("fine-tuned score")
        return _save(fig, path)


def ablation(rows: list[dict], path) -> Path:
    """Held-out change and anchor drift per cell, grouped."""
    with plt.rc_context(STYLE):
        fig, (ax_h, ax_d) = plt.subplots(1, 2, figsize=(9, 3.2))
        names = [r["run_id"] for r in rows]
        x = np.arange(len(rows))
        change = _col(rows, "improvement")
        ax_h.bar(x, change, color=np.where(change >= 0, FINE_COLOR, BAD_COLOR))
        ax_h.axhline(0.0, color=BASE_COLOR, lw=0.6)
        ax_h.set_title("held-out score change")
        ax_d.bar(x, _col(rows, "final_anchor_drift"), color=BASE_COLOR)
        ax_d.set_title("final anchor drift (RMS)")
        groups = [r["group"] for r in rows]
        for ax in (ax_h, ax_d):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=45, ha="right")
            for i in range(1, len(groups)):
                if groups[i] != groups[i - 1]:
                    ax.axvline(i - 0.5, color="#BDBDBD", lw=0.6)
        return _save(fig, path)
