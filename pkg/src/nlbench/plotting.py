"""Figures regenerated from persisted run records; no model files are read."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from nlbench.experiment import cmd_robustness, group_by_noise  # noqa: E402
from nlbench.metrics import aggregate  # noqa: E402

PLOT_KINDS = ("f1_vs_noise", "sweep", "confusion", "robustness_bar")


def _label(key: tuple) -> str:
    _, method, mode, task, freeze, kind = key
    init = task if mode == "ssl" else mode
    return f"{method}/{init}/{freeze}/{kind}"


def plot_f1_vs_noise(records, out_dir: Path) -> list[Path]:
    """One panel per dataset; BEST (solid) and LAST (dashed) mean macro-F1 against noise rate per configuration."""
    groups = group_by_noise(records)
    datasets = sorted({k[0] for k in groups})
    fig, axes = plt.subplots(1, len(datasets), figsize=(5 * len(datasets), 4), squeeze=False)
    for ax, name in zip(axes[0], datasets):
        for key in sorted((k for k in groups if k[0] == name), key=str):
            eps = sorted(groups[key])
            for metric, style in (("best", "-"), ("last", "--")):
                means = [aggregate(getattr(r, metric) for r in groups[key][e])["mean"] for e in eps]
                ax.plot(eps, means, style, marker="o", label=f"{_label(key)} {metric.upper()}")
        ax.set_title(name)
        ax.set_xlabel("noise rate")
        ax.set_ylabel("macro-F1")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
    path = out_dir / "f1_vs_noise.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def plot_confusion(records, out_dir: Path) -> list[Path]:
    paths = []
    for r in records:
        cm = np.asarray(r.report.per_epoch[-1].confusion)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(cm, cmap="Blues")
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(r.run_id[:12])
        path = out_dir / f"confusion_{r.run_id}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_robustness_bar(records, out_dir: Path) -> list[Path]:
    rows = [r for r in cmd_robustness(records) if r["score"] is not None and not r["flagged"]]
    fig, ax = plt.subplots(figsize=(max(4, len(rows)), 4))
    ax.bar(range(len(rows)), [r["score"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([f"{r['dataset']}\n{r['method']}/{r['task'] or r['pretrain']}" for r in rows], fontsize=7)
    ax.set_ylabel("robustness")
    path = out_dir / "robustness_bar.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def plot_sweep(tables: list[dict], out_dir: Path) -> list[Path]:
    """Mean +- std test macro-F1 against the sweep axis, one line per dataset."""
    paths = []
    for k, table in enumerate(tables):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name in sorted({r["dataset"] for r in table["rows"]}):
            rows = sorted((r for r in table["rows"] if r["dataset"] == name), key=lambda r: r["value"])
            ax.errorbar([r["value"] for r in rows], [r["mean"] for r in rows], [r["std"] for r in rows],
                        marker="o", capsize=3, label=name)
        ax.set_xlabel("number of classes" if table["axis"] == "classes" else "training samples")
        ax.set_ylabel("macro-F1")
        if table["axis"] == "size":
            ax.set_xscale("log")
        ax.legend(fontsize=7)
        path = out_dir / f"sweep_{table['axis']}_{k}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def load_sweep_tables(paths) -> list[dict]:
    tables = []
    for p in paths:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        doc = doc.get("sweep", doc)
        if isinstance(doc, dict) and "axis" in doc and "rows" in doc:
            tables.append(doc)
    return tables
