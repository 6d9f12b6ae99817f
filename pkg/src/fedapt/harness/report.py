"""Figures for ablation summaries and round logs (matplotlib, imported lazily)."""

from __future__ import annotations

from pathlib import Path


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_preset(summary: dict, path) -> Path:
    """Per-arm robust accuracy: one dot per seed, median bar, seed pairing lines."""
    plt = _pyplot()
    arms = summary["arms"]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(arms) + 1.5), 3.2))
    xs = range(len(arms))
    for i, a in enumerate(arms):
        ax.scatter([i] * len(a["robust"]), a["robust"], s=14, color="0.45", zorder=3)
        ax.hlines(a["robust_stats"]["median"], i - 0.3, i + 0.3, color="C0", lw=2.5, zorder=4)
    per_seed = list(zip(*[a["robust"] for a in arms]))
    for values in per_seed:
        ax.plot(list(xs), values, color="0.8", lw=0.8, zorder=1)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([a["label"] for a in arms], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"robust accuracy ({summary['attack']})")
    ax.set_title(f"{summary['preset']} ({len(summary['seeds'])} seeds)", fontsize=10)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rounds(rows: list[dict], path) -> Path:
    """Validation clean/robust accuracy and mean local loss per round."""
    plt = _pyplot()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
    t = [r["round"] for r in rows]
    for key, color in (("clean_acc", "C0"), ("robust_acc", "C3")):
        pts = [(r["round"], r[key]) for r in rows if r[key] is not None]
        if pts:
            a1.plot(*zip(*pts), color=color, label=key.replace("_acc", ""))
    a1.set_xlabel("round")
    a1.set_ylabel("validation accuracy")
    a1.legend(frameon=False, fontsize=8)
    loss = [(r["round"], r["mean_local_loss"]) for r in rows if r["mean_local_loss"] is not None]
    if loss:
        a2.plot(*zip(*loss), color="0.3")
    a2.set_xlabel("round")
    a2.set_ylabel("mean local adversarial loss")
    for ax in (a1, a2):
        ax.spines[["top", "right"]].set_visible(False)
        if t:
            ax.set_xlim(min(t), max(t))
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
