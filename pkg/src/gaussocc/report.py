"""Tables, directional statistics and figures for training and ablation runs.

Tables are tab-separated text (one header row); figures are PNG files written
with the Agg backend and no timestamp metadata so reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .synthetic import CLASS_NAMES

PNG_META = {"Software": None}

# directional comparisons drawn from the ablation matrix: (better, worse, what)
COMPONENT_PAIRS = (("full", "no_ldfa", "ldfa"), ("full", "no_ebfs", "ebfs"),
                   ("full", "no_mamba", "mamba_head"), ("full", "no_lidar", "lidar"))
FUSION_PAIRS = (("full", "fusion_add", "aclf_vs_add"), ("full", "fusion_concat", "aclf_vs_concat"))


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.4f}"
    return str(x)


def tsv(header, rows) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def class_names(classes):
    return [CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}" for k in classes]


def iou_table(metrics: dict) -> str:
    """Per-class IoU followed by mIoU, one row per class."""
    rows = [(k, n, float(v)) for k, n, v in zip(metrics["classes"], class_names(metrics["classes"]),
                                                metrics["iou"])]
    rows.append(("-", "mIoU", float(metrics["miou"])))
    return tsv(("class", "name", "iou"), rows)


def write_text(path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path, obj):
    write_text(path, json.dumps(obj, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# ablation rows
# --------------------------------------------------------------------------

def read_rows(path):
    rows = []
    if not os.path.exists(path):
        return rows
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def append_row(path, row: dict):
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def by_config(rows):
    """``{config: {seed: row}}`` (later rows replace earlier ones)."""
    out = {}
    for r in rows:
        out.setdefault(r["config"], {})[r["seed"]] = r
    return out


def summary(rows):
    """Per-config mean/std/min/max of clean and night mIoU."""
    out = []
    for name, per in by_config(rows).items():
        clean = np.array([r["miou"] for r in per.values()])
        night = np.array([r["miou_night"] for r in per.values()])
        out.append({"config": name, "n": len(clean), "num_gaussians": next(iter(per.values()))["num_gaussians"],
                    "miou_mean": float(clean.mean()), "miou_std": float(clean.std(ddof=1)) if len(clean) > 1 else 0.0,
                    "miou_min": float(clean.min()), "miou_max": float(clean.max()),
                    "night_mean": float(night.mean()), "drop_mean": float((clean - night).mean())})
    return out


def summary_table(rows) -> str:
    keys = ("config", "n", "num_gaussians", "miou_mean", "miou_std", "miou_min", "miou_max",
            "night_mean", "drop_mean")
    return tsv(keys, [[s[k] for k in keys] for s in summary(rows)])


@dataclass
class Comparison:
    name: str
    better: str
    worse: str
    n: int
    mean_better: float
    mean_worse: float
    wins: int
    ties: int
    p_value: float

    @property
    def mean_gap(self) -> float:
        return self.mean_better - self.mean_worse


def sign_test(diffs) -> tuple[int, int, float]:
    """One-sided sign test that positive differences dominate; ties are dropped.
    Returns ``(wins, ties, p)``."""
    diffs = np.asarray(diffs, dtype=float)
    ties = int(np.sum(diffs == 0))
    wins = int(np.sum(diffs > 0))
    n = diffs.size - ties
    if n == 0:
        return wins, ties, 1.0
    return wins, ties, float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def compare(rows, better: str, worse: str, name: str, key=None) -> Comparison | None:
    """Paired comparison on shared seeds.  ``key(row)`` is the score (higher is better)."""
    key = key or (lambda r: r["miou"])
    per = by_config(rows)
    if better not in per or worse not in per:
        return None
    seeds = sorted(set(per[better]) & set(per[worse]))
    if not seeds:
        return None
    a = np.array([key(per[better][s]) for s in seeds])
    b = np.array([key(per[worse][s]) for s in seeds])
    wins, ties, p = sign_test(a - b)
    return Comparison(name, better, worse, len(seeds), float(a.mean()), float(b.mean()), wins, ties, p)


def night_drop(r) -> float:
    return r["miou"] - r["miou_night"]


def comparisons(rows):
    out = [compare(rows, b, w, n) for b, w, n in FUSION_PAIRS + COMPONENT_PAIRS]
    out.append(compare(rows, "full", "ng_half", "density"))
    # robustness: a smaller clean-to-night drop is better, so score with the negated drop
    out.append(compare(rows, "full", "fusion_add", "night_drop_aclf_vs_add", key=lambda r: -night_drop(r)))
    return [c for c in out if c is not None]


def comparison_table(rows) -> str:
    cs = comparisons(rows)
    return tsv(("comparison", "better", "worse", "n", "mean_better", "mean_worse", "gap", "wins",
                "ties", "p_one_sided"),
               [(c.name, c.better, c.worse, c.n, c.mean_better, c.mean_worse, c.mean_gap, c.wins,
                 c.ties, c.p_value) for c in cs])


def seed_table(rows) -> str:
    per = by_config(rows)
    names = list(per)
    seeds = sorted({s for p in per.values() for s in p})
    body = [[s] + [per[n][s]["miou"] if s in per[n] else float("nan") for n in names] for s in seeds]
    return tsv(["seed"] + names, body)


# --------------------------------------------------------------------------
# figures
# --------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=PNG_META)
    _pyplot().close(fig)


def plot_loss_curve(losses, path, every: int = 1, title: str = "training loss"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(losses)) * every
    ax.plot(x, losses, lw=0.8, color="0.6", label="per step")
    if len(losses) >= 20:
        k = max(len(losses) // 50, 5)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(x[k - 1:], smooth, lw=1.6, color="C0", label=f"mean of {k}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows, path):
    """Per-config mean mIoU with one dot per seed."""
    plt = _pyplot()
    per = by_config(rows)
    names = list(per)
    fig, ax = plt.subplots(figsize=(1.1 * len(names) + 2, 3.8))
    for i, n in enumerate(names):
        vals = np.array([r["miou"] for r in per[n].values()])
        ax.bar(i, vals.mean(), color="C0" if n == "full" else "C7", alpha=0.7)
        ax.scatter(np.full(vals.size, i) + np.linspace(-0.2, 0.2, vals.size), vals, s=9, color="k", zorder=3)
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("mIoU (held-out)")
    lo = min(r["miou"] for r in rows)
    ax.set_ylim(max(0.0, lo - 0.1), min(1.0, max(r["miou"] for r in rows) + 0.05))
    ax.set_title("ablation matrix")
    fig.tight_layout()
    _save(fig, path)


def plot_robustness(rows, path):
    """Clean versus night-degraded mIoU per config."""
    plt = _pyplot()
    s = summary(rows)
    names = [r["config"] for r in s]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.1 * len(names) + 2, 3.8))
    ax.bar(x - 0.2, [r["miou_mean"] for r in s], 0.4, label="clean", color="C0")
    ax.bar(x + 0.2, [r["night_mean"] for r in s], 0.4, label="night 1.0", color="C3")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("mean mIoU")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_curves(rows, path):
    """Mean loss curve per config."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for n, per in by_config(rows).items():
        curves = [r["loss_curve"] for r in per.values() if r.get("loss_curve")]
        if not curves:
            continue
        L = min(len(c) for c in curves)
        m = np.mean([c[:L] for c in curves], axis=0)
        k = 5 if L >= 10 else 1
        m = np.convolve(m, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(m.size) * 10, m, lw=1.2, label=n)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (seed mean)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_slices(labels, path, classes=None, pred=None):
    """A few horizontal slices of a label grid (and optionally a prediction)."""
    from matplotlib.colors import ListedColormap

    from .synthetic import PALETTE

    plt = _pyplot()
    grids = [("ground truth", labels)] + ([("prediction", pred)] if pred is not None else [])
    Z = labels.shape[2]
    zs = sorted({0, 1, Z // 4, Z // 2})
    cmap = ListedColormap(np.vstack([[1.0, 1.0, 1.0], PALETTE[1:]])[: max(int(labels.max()) + 1, 2)])
    fig, axes = plt.subplots(len(grids), len(zs), figsize=(2.4 * len(zs), 2.4 * len(grids)), squeeze=False)
    for r, (title, g) in enumerate(grids):
        for c, z in enumerate(zs):
            ax = axes[r, c]
            ax.imshow(g[:, :, z].T, origin="lower", cmap=cmap, vmin=0, vmax=cmap.N - 1, interpolation="nearest")
            ax.set_title(f"{title}, z={z}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def write_ablation_report(rows, directory):
    """All ablation tables and figures into ``directory``; returns the file list."""
    os.makedirs(directory, exist_ok=True)
    files = {
        "summary.tsv": summary_table(rows),
        "comparisons.tsv": comparison_table(rows),
        "per_seed.tsv": seed_table(rows),
    }
    for name, text in files.items():
        write_text(os.path.join(directory, name), text)
    plot_ablation(rows, os.path.join(directory, "ablation_miou.png"))
    plot_robustness(rows, os.path.join(directory, "robustness.png"))
    plot_curves(rows, os.path.join(directory, "loss_curves.png"))
    return sorted(files) + ["ablation_miou.png", "loss_curves.png", "robustness.png"]
