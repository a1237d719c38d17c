"""Matplotlib figure rendering for the CLI report path.

Figures are written next to the CSV outputs; the CSVs stay the canonical
machine-readable artifacts.  Rendering is deterministic (fixed dpi, pinned
PNG metadata) so re-running a command overwrites files byte-identically.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_DPI = 120
_PNG_METADATA = {"Software": "ssda"}

_STAGE_LOSSES = [
    ("loss_s", "source CE"),
    ("loss_u", "consistency"),
    ("loss_t", "anchor CE"),
    ("loss_d", "distillation"),
]


def _save(fig, path) -> None:
    fig.savefig(Path(path), dpi=_DPI, metadata=_PNG_METADATA)
    plt.close(fig)


def save_training_curves(history: list[dict], path) -> None:
    """Loss curves and target accuracy over iterations, stage II offset after stage I."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    stage1_max = max((r["iteration"] for r in history if r["stage"] == "UDA"), default=0)

    def x_of(row):
        return row["iteration"] + (stage1_max if row["stage"] == "SSL" else 0)

    for key, label in _STAGE_LOSSES:
        pts = [(x_of(r), r[key]) for r in history if r.get(key) is not None]
        if pts:
            ax_loss.plot(*zip(*pts), label=label, linewidth=1.2)
    if stage1_max and any(r["stage"] == "SSL" for r in history):
        ax_loss.axvline(stage1_max, color="gray", linestyle=":", linewidth=1)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)

    acc_pts = [(x_of(r), r["target_acc"]) for r in history if r.get("target_acc") is not None]
    if acc_pts:
        ax_acc.plot(*zip(*acc_pts), color="tab:green", linewidth=1.2)
    if stage1_max and any(r["stage"] == "SSL" for r in history):
        ax_acc.axvline(stage1_max, color="gray", linestyle=":", linewidth=1)
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylabel("target accuracy [%]")
    fig.tight_layout()
    _save(fig, path)


def save_pseudo_label_series(series: list[dict], path) -> None:
    """Stacked counts of the four pseudo-label buckets over evaluation points."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if series:
        stage1_max = max((r["iteration"] for r in series if r["stage"] == "UDA"), default=0)
        xs = [r["iteration"] + (stage1_max if r["stage"] == "SSL" else 0) for r in series]
        keys = ["confident_correct", "rescuable", "confident_wrong", "below_wrong"]
        colors = ["tab:green", "tab:olive", "tab:red", "tab:gray"]
        ax.stackplot(xs, [[r[k] for r in series] for k in keys], labels=keys, colors=colors, alpha=0.8)
        if stage1_max and any(r["stage"] == "SSL" for r in series):
            ax.axvline(stage1_max, color="black", linestyle=":", linewidth=1)
        ax.legend(fontsize=8, loc="lower left")
    ax.set_xlabel("iteration")
    ax.set_ylabel("unlabeled samples")
    fig.tight_layout()
    _save(fig, path)


def save_ablation_chart(table, path) -> None:
    """Grouped bars of seed-averaged accuracy per preset and shot count."""
    fig, ax = plt.subplots(figsize=(8, 4))
    presets = [preset for preset, _ in table.rows]
    width = 0.8 / max(len(table.shots), 1)
    for i, shot in enumerate(table.shots):
        xs, means, stds = [], [], []
        for j, (_, cells) in enumerate(table.rows):
            cell = cells.get(shot)
            if cell is not None and cell.mean is not None:
                xs.append(j + i * width)
                means.append(cell.mean)
                stds.append(cell.std)
        if xs:
            ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=f"{shot}-shot")
    ax.set_xticks([j + width * (len(table.shots) - 1) / 2 for j in range(len(presets))])
    ax.set_xticklabels(presets, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("target accuracy [%]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
