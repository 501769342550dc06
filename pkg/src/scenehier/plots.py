"""Figures rendered next to each delimited report the CLI writes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data_model import ClassCatalog
from .schedules import ScheduleReport

_DPI = 120


def subclass_frequency_figure(path: Path, names: list[str], counts: list[int]) -> None:
    """Bar chart of subclass sample counts, most frequent first."""
    order = np.argsort(counts)[::-1]
    fig, ax = plt.subplots(figsize=(max(6, 0.18 * len(names)), 4))
    ax.bar(range(len(names)), [counts[i] for i in order], color="#4878cf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([names[i] for i in order], rotation=90, fontsize=6)
    ax.set_ylabel("samples")
    ax.set_title("subclass frequencies")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def loss_curves_figure(path: Path, report: ScheduleReport) -> None:
    """Total loss per stage against the stage-local iteration counter."""
    fig, ax = plt.subplots(figsize=(7, 4))
    stages = []
    for stage, *_ in report.rows:
        if stage not in stages:
            stages.append(stage)
    for stage in stages:
        rows = report.stage_rows(stage)
        ax.plot([r[1] for r in rows], [r[3] for r in rows], marker=".", label=stage)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def per_class_accuracy_figure(path: Path, catalog: ClassCatalog, recalls: dict[int, float]) -> None:
    classes = sorted(recalls)
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(classes)), 4))
    ax.bar(range(len(classes)), [recalls[j] for j in classes], color="#6acc65")
    ax.set_xticks(range(len(classes)))
    ax.set_xticklabels([catalog.names[j] for j in classes], rotation=90, fontsize=7)
    ax.set_ylabel("per-class accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def per_class_delta_figure(path: Path, catalog: ClassCatalog, deltas: list[tuple[int, float]]) -> None:
    """Signed bar chart of per-class improvements, largest first."""
    ordered = sorted(deltas, key=lambda item: (-item[1], item[0]))
    values = [d for _, d in ordered]
    colors = ["#6acc65" if v >= 0 else "#d65f5f" for v in values]
    fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(ordered)), 4))
    ax.bar(range(len(ordered)), values, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(ordered)))
    ax.set_xticklabels([catalog.names[j] for j, _ in ordered], rotation=90, fontsize=7)
    ax.set_ylabel("accuracy delta")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
