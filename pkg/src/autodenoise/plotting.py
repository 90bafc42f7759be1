"""Figures written next to run reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

C_VALID = "#0072B2"
C_TEST = "#D55E00"
C_NOISE = "#009E73"


def _series(records, key):
    xs = [r["epoch"] for r in records if r.get(key) is not None]
    ys = [r[key] for r in records if r.get(key) is not None]
    return xs, ys


def plot_run_curves(records: list[dict], path, title: str = "", control: dict | None = None) -> None:
    """Per-epoch AUC and logloss of the validation-phase models (plus noise precision)."""
    has_noise = any(r.get("noise_precision") is not None for r in records)
    ncols = 3 if has_noise else 2
    fig, axes = plt.subplots(1, ncols, figsize=(4.2 * ncols, 3.4), constrained_layout=True)

    for ax, metric in zip(axes, ("auc", "logloss")):
        for split, color in (("valid", C_VALID), ("test", C_TEST)):
            xs, ys = _series(records, f"{split}_{metric}")
            ax.plot(xs, ys, marker="o", ms=3, lw=1.5, color=color, label=split)
        if control and control.get(metric) is not None:
            ax.axhline(control[metric], ls="--", lw=1, color="gray", label="no denoising (test)")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric.upper() if metric == "auc" else "logloss")
        ax.grid(alpha=0.3)
    axes[0].legend(frameon=False, fontsize=8)

    if has_noise:
        ax = axes[2]
        xs, ys = _series(records, "noise_precision")
        ax.plot(xs, ys, marker="o", ms=3, lw=1.5, color=C_NOISE, label="precision")
        xs, ys = _series(records, "noise_recall")
        ax.plot(xs, ys, marker="s", ms=3, lw=1.0, color=C_NOISE, alpha=0.5, label="recall")
        ax.set_xlabel("epoch")
        ax.set_ylabel("dropped-set noise")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, fontsize=8)
        ax.grid(alpha=0.3)

    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, dpi=120)
    plt.close(fig)
