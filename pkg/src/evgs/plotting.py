"""Report figures written next to the JSON outputs (file output only, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> str:
    fig.tight_layout()
    # fixed metadata so repeated runs write identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_loss_curves(records, path, smooth: int = 50) -> str:
    """Training losses per iteration from JSON-lines records, with a moving average."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        it = np.array([r["iter"] for r in records])
        for key, label in (("prior_l1", "prior L1 (warm-up)"), ("event", "event"), ("reg", "1 - SSIM")):
            vals = np.array([r[key] for r in records], dtype=float)
            mask = vals != 0
            if not mask.any():
                continue
            x, y = it[mask], vals[mask]
            (line,) = ax.plot(x, y, lw=0.5, alpha=0.35)
            if len(y) >= smooth:
                avg = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
                ax.plot(x[smooth - 1:], avg, lw=1.4, color=line.get_color(), label=label)
            else:
                line.set_label(label)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_eval(names, psnrs, ssims, path) -> str:
    """Per-view aligned PSNR and SSIM bars with their means."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
        x = np.arange(len(names))
        for ax, vals, label in ((a1, psnrs, "aligned PSNR [dB]"), (a2, ssims, "aligned SSIM")):
            ax.bar(x, vals, color="0.6")
            ax.axhline(np.mean(vals), color="C3", lw=1, label=f"mean {np.mean(vals):.3f}")
            ax.set_ylabel(label)
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_image_pairs(rendered, reference, path, titles=None, max_views: int = 4) -> str:
    """Rendered (top) against reference (bottom) for the first few views."""
    n = min(max_views, len(rendered))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.8 * n, 3.8), squeeze=False)
        for j in range(n):
            for i, img in enumerate((rendered[j], reference[j])):
                axes[i, j].imshow(np.clip(img, 0, 1), interpolation="nearest")
                axes[i, j].set_axis_off()
            if titles is not None:
                axes[0, j].set_title(titles[j], fontsize=7)
        return _save(fig, path)


def plot_ablation(results: dict, path) -> str:
    """Held-out aligned PSNR and final event loss per ablation variant."""
    names = list(results)
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
        a1.bar(names, [results[n]["psnr"] for n in names], color="0.6")
        a1.set_ylabel("held-out aligned PSNR [dB]")
        a2.bar(names, [results[n]["final_event_loss"] for n in names], color="0.6")
        a2.set_ylabel("event loss, k = k_end windows")
        for ax in (a1, a2):
            ax.tick_params(axis="x", rotation=30)
        return _save(fig, path)
