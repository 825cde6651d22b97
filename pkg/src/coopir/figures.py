"""Matplotlib figures for the ``report`` subcommand (rendered off-screen to PNG)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps the PNG bytes independent of the matplotlib build.
_PNG_META = {"Software": None}


def _save(fig, run, name):
    path = run / f"figures/{name}"
    with run.atomic(f"figures/{name}") as tmp:
        fig.savefig(tmp, format="png", dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def study_figures(records, run) -> list:
    """Out-of-scope share per combo and the rank shift from de-duplication."""
    combos = sorted({"+".join(r["gt_set"]) for r in records})
    oos = []
    for c in combos:
        rs = [r for r in records if "+".join(r["gt_set"]) == c]
        n = sum(r["n_selected"] for r in rs)
        oos.append(sum(r["oos_fraction"] * r["n_selected"] for r in rs) / n if n else 0.0)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.barh(range(len(combos)), oos, color="#4c72b0")
    ax.set_yticks(range(len(combos)), combos, fontsize=8)
    ax.set_xlim(0, 1)
    ax.set_xlabel("share of selected plans using an out-of-scope tool")
    fig.tight_layout()
    paths = [_save(fig, run, "finding1_out_of_scope.png")]

    pairs = np.array([p for r in records for p in r["dedup_rank_pairs"]], dtype=float).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    if len(pairs):
        ax.scatter(pairs[:, 0], pairs[:, 1], s=8, alpha=0.6)
        hi = float(pairs.max()) * 1.05
        ax.plot([0, hi], [0, hi], color="0.5", lw=0.8, ls="--")
    ax.set_xlabel("aggregate rank, with repeats")
    ax.set_ylabel("aggregate rank, de-duplicated")
    fig.tight_layout()
    paths.append(_save(fig, run, "finding2_dedup.png"))
    return paths


def planner_curve(log, run):
    it = [r["iter"] for r in log]
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    for key, label in (("mean_reward", "total"), ("mean_rq", "quality"), ("mean_rd", "degradation F1")):
        ax.plot(it, [r[key] for r in log], label=label, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean reward")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, run, "planner_reward.png")


def cotrain_curve(log, run):
    ep = [r["epoch"] for r in log]
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    ax.plot(ep, [r["mean_loss"] for r in log], label="scheduled loss", lw=1.2)
    ax.plot(ep, [r["mean_loss_target"] for r in log], label="loss at target weights", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, run, "cotrain_loss.png")
