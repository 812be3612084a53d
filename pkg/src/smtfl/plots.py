"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "defended": dict(color="tab:blue", lw=1.8),
    "no_attack": dict(color="tab:green", lw=1.2, ls="--"),
    "attacked": dict(color="tab:red", lw=1.2, ls=":"),
}


def plot_run(metrics, path) -> Path:
    fig, (ax_acc, ax_cl) = plt.subplots(1, 2, figsize=(9, 3.4))
    for name, curve in metrics.curves.items():
        ax_acc.plot(range(len(curve)), curve, label=name.replace("_", " "), **_STYLE.get(name, {}))
    ax_acc.set_xlabel("global epoch")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(frameon=False, fontsize=8)

    epochs = [e.epoch for e in metrics.epochs]
    ax_cl.step(epochs, [e.active_clients for e in metrics.epochs], where="post", color="k")
    ax_cl.set_xlabel("global epoch")
    ax_cl.set_ylabel("active clients")
    ax_cl.set_ylim(0, metrics.config.m + 1)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: list[dict], param: str, path, metrics=("acc_attacked", "acc_defended", "acc_loc", "rate_false")) -> Path:
    """Mean of each metric against one swept parameter (other axes averaged out)."""
    xs = sorted({r[param] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name in metrics:
        ys = []
        for x in xs:
            vals = [r[name] for r in rows if r[param] == x and r.get(name) is not None]
            ys.append(sum(vals) / len(vals) if vals else float("nan"))
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(param)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
