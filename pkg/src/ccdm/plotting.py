"""Report figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def figsize(scale: float = 1.0, ratio: float | None = None) -> tuple[float, float]:
    width = 5.0 * scale
    ratio = ratio or (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)


def plot_schedule(alpha_bar: np.ndarray, beta: np.ndarray, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        t = np.arange(alpha_bar.size)
        ax.plot(t, alpha_bar, label=r"$\bar\alpha_t$")
        ax.plot(t[1:], beta[1:], label=r"$\beta_t$", ls="--")
        ax.set_xlabel("step t")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_losses(steps, losses, epoch_losses, path) -> None:
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=figsize(1.4, 0.4))
        a.plot(steps, losses, lw=0.5, color="0.5")
        a.set_xlabel("step")
        a.set_ylabel("loss (nats)")
        a.set_yscale("log")
        b.plot(np.arange(1, len(epoch_losses) + 1), epoch_losses, marker=".", ms=3)
        b.set_xlabel("epoch")
        b.set_ylabel("mean epoch loss")
        b.set_yscale("log")
        _save(fig, path)


def plot_report(per_image: list[dict], path) -> None:
    keys = [k for k in ("ged", "hm_iou", "diversity", "miou")
            if any(r.get(k) is not None for r in per_image)]
    if not keys:
        return
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=figsize(0.45 * len(keys) + 0.3, 0.8 / len(keys)),
                                 squeeze=False)
        for ax, key in zip(axes[0], keys):
            vals = [r[key] for r in per_image if r.get(key) is not None]
            ax.hist(vals, bins=min(20, max(3, len(vals))), color="C0", alpha=0.8)
            ax.axvline(np.mean(vals), color="k", lw=1)
            ax.set_xlabel(key)
        axes[0][0].set_ylabel("images")
        _save(fig, path)


def plot_samples(image: np.ndarray, samples: list[np.ndarray], path, max_samples: int = 8) -> None:
    shown = samples[:max_samples]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(shown) + 1, figsize=(1.1 * (len(shown) + 1), 1.3))
        axes = np.atleast_1d(axes)
        axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("image")
        for i, (ax, s) in enumerate(zip(axes[1:], shown)):
            ax.imshow(s, cmap="viridis", interpolation="nearest")
            ax.set_title(f"#{i}")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)
