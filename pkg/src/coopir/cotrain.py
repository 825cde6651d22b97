"""End-to-end co-training of tool parameters through composed plans.

The loss on the final output of a plan is back-propagated through every tool
in the chain.  Loss weights follow a cosine schedule from pure L1 towards the
target mix over the first 30% of epochs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import core, grad
from .core import Prng, derive_seed
from .grad import EVAL, Adam, NumericAbort, Tape
from .plansearch import execute_plan
from .tools import ToolRegistry, apply_tool, serialize_params, tape_tool


@dataclass(frozen=True)
class LossWeights:
    l1: float
    perc: float
    lpips: float
    nr_sharp: float
    nr_balance: float

    def as_tuple(self) -> tuple:
        return (self.l1, self.perc, self.lpips, self.nr_sharp, self.nr_balance)


TARGET_WEIGHTS = LossWeights(0.4, 0.1, 0.15, 0.1, 0.1)
TERMS = ("l1", "perc", "lpips", "nr_sharp", "nr_balance")


@dataclass(frozen=True)
class Schedule:
    total_epochs: int
    targets: LossWeights = TARGET_WEIGHTS

    @property
    def transition(self) -> int:
        return math.floor(0.3 * self.total_epochs)

    def __post_init__(self):
        if self.transition < 1:
            raise ValueError(f"{self.total_epochs} epochs leave no transition period (need >= 4)")


def anneal(e: int, transition: int) -> float:
    return 0.5 * (1.0 - math.cos(math.pi * e / transition))


def schedule_weights(sched: Schedule, e: int) -> LossWeights:
    """Loss weights at epoch ``e`` (1-based)."""
    if not 1 <= e <= sched.total_epochs:
        raise ValueError(f"epoch {e} outside [1, {sched.total_epochs}]")
    t = sched.targets
    if e > sched.transition:
        return t
    g = anneal(e, sched.transition)
    return LossWeights(1.0 - (1.0 - t.l1) * g, t.perc * g, t.lpips * g, t.nr_sharp * g, t.nr_balance * g)


# ---------------------------------------------------------------------------
# Loss


def _grad_mag(ops, y):
    gx = ops.conv2d_same(y, core.SOBEL_X)
    gy = ops.conv2d_same(y, core.SOBEL_Y)
    return ops.sqrt(ops.add(ops.mul(gx, gx), ops.mul(gy, gy)))


def gsim_term(tape: Tape, pred, gt: np.ndarray):
    """Gradient similarity of a taped prediction against a constant target."""
    gp = _grad_mag(tape, tape.luma(pred))
    gg = _grad_mag(EVAL, EVAL.luma(gt))
    num = tape.add(tape.scale(tape.mul(gp, gg), c=2.0), core.GSIM_C)
    den = tape.add(tape.add(tape.mul(gp, gp), gg * gg), core.GSIM_C)
    return tape.mean(tape.div(num, den))


def nr_terms(tape: Tape, pred):
    y = tape.luma(pred)
    s = tape.mean(_grad_mag(tape, y))
    sharp = tape.div(s, tape.add(s, 0.05))
    nu = tape.abs_mean(tape.sub(y, tape.median3(y)))
    sd = tape.sqrt(tape.square_mean(tape.sub(y, tape.mean(y))))
    balance = tape.mul(
        tape.div(1.0, tape.add(1.0, tape.scale(nu, c=20.0))),
        tape.div(sd, tape.add(sd, 0.05)),
    )
    return sharp, balance


def composite_loss(tape: Tape, pred, gt: np.ndarray, weights: LossWeights):
    """Weighted five-term loss; returns the loss node and the unweighted term nodes."""
    if pred.shape != gt.shape:
        raise core.ShapeError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    l1 = tape.abs_mean(tape.sub(pred, gt))
    sim1 = gsim_term(tape, pred, gt)
    sim2 = gsim_term(tape, tape.avgpool2(pred), EVAL.avgpool2(gt))
    perc = tape.sub(1.0, tape.scale(tape.add(sim1, sim2), c=0.5))
    lpips = tape.sub(1.0, sim1)
    sharp, balance = nr_terms(tape, pred)
    terms = {
        "l1": l1,
        "perc": perc,
        "lpips": lpips,
        "nr_sharp": tape.sub(1.0, sharp),
        "nr_balance": tape.sub(1.0, balance),
    }
    loss = None
    for name, w in zip(TERMS, weights.as_tuple()):
        part = tape.scale(terms[name], c=w)
        loss = part if loss is None else tape.add(loss, part)
    return loss, terms


@dataclass
class ChainTrace:
    plan: tuple
    nodes: list
    loss: object = None


def build_chain(tape: Tape, registry: ToolRegistry, plan, lq: np.ndarray) -> ChainTrace:
    x = tape.const(lq)
    nodes = [x]
    for tool_id in plan:
        x = tape_tool(tape, registry, tool_id, x)
        nodes.append(x)
    return ChainTrace(tuple(plan), nodes)


# ---------------------------------------------------------------------------
# Training


@dataclass
class CotrainConfig:
    epochs: int = 23
    lr: float = 1e-6
    batch: int = 2
    max_norm: float = 0.5
    max_skip_fraction: float = 0.05
    seed: int = 0


LOG_COLUMNS = ["epoch", "mean_loss", "mean_loss_target", *(f"mean_{t}" for t in TERMS), "skip_count"]


def train_tools(registry: ToolRegistry, dataset, cfg: CotrainConfig, checkpoint_dir=None, progress=None):
    """Train tool parameters on ``dataset`` = [(lq, gt, plan), ...].

    Returns per-epoch log rows.  ``mean_loss_target`` re-weights the epoch's
    mean terms with the target weights so epochs stay comparable while the
    schedule is still moving.
    """
    sched = Schedule(cfg.epochs)
    optimizer = Adam(cfg.lr)
    log = []
    skipped_total = seen_total = 0
    for epoch in range(1, cfg.epochs + 1):
        weights = schedule_weights(sched, epoch)
        order = np.argsort(Prng(derive_seed(cfg.seed, epoch)).random(len(dataset)), kind="stable")
        losses, term_sums, skipped = [], dict.fromkeys(TERMS, 0.0), 0
        for start in range(0, len(order), cfg.batch):
            batch = [dataset[i] for i in order[start : start + cfg.batch]]
            active = {t for _, _, plan in batch for t in plan}
            params = [registry[t].param for t in sorted(active)]
            grad.zero_grad(params)
            used = 0
            for lq, gt, plan in batch:
                seen_total += 1
                tape = Tape()
                chain = build_chain(tape, registry, plan, lq)
                loss, terms = composite_loss(tape, chain.nodes[-1], gt, weights)
                if not np.isfinite(loss.value):
                    skipped += 1
                    continue
                tape.backward(tape.scale(loss, c=1.0 / len(batch)))
                losses.append(float(loss.value))
                for name in TERMS:
                    term_sums[name] += float(terms[name].value)
                used += 1
            skipped_total += len(batch) - used
            if skipped_total > cfg.max_skip_fraction * max(seen_total, 1) and skipped_total > 0 and seen_total >= 20:
                raise NumericAbort(f"{skipped_total} of {seen_total} samples had non-finite loss")
            if not used or not params:
                continue
            grad.clip_grad_norm(params, cfg.max_norm)
            grad.check_finite_grads(params)
            optimizer.step(params)
        n = max(len(losses), 1)
        means = {name: term_sums[name] / n for name in TERMS}
        row = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "mean_loss_target": sum(w * means[t] for w, t in zip(TARGET_WEIGHTS.as_tuple(), TERMS)),
            **{f"mean_{t}": means[t] for t in TERMS},
            "skip_count": skipped,
        }
        log.append(row)
        if checkpoint_dir is not None:
            serialize_params(registry, Path(checkpoint_dir) / f"tools_epoch{epoch:03d}.bin")
        if progress:
            progress(epoch, row)
    return log


def chain_psnr(registry: ToolRegistry, pairs) -> float:
    """Mean PSNR of plan outputs over [(lq, gt, plan), ...]."""
    return float(np.mean([core.psnr(execute_plan(registry, plan, lq), gt) for lq, gt, plan in pairs]))


def load_plan_file(path, registry: ToolRegistry) -> list[tuple]:
    """A JSON list of plans, each a list of tool names."""
    plans = json.loads(Path(path).read_text())
    if plans and isinstance(plans[0], str):
        plans = [plans]
    return [tuple(registry.index(name) for name in plan) for plan in plans]


# ---------------------------------------------------------------------------
# Misuse evaluation


MISUSE_COLUMNS = ["tool", "psnr_before", "psnr_after", "ssim_before", "ssim_after", "delta_psnr", "delta_ssim"]


def misuse_eval(before: ToolRegistry, after: ToolRegistry, clean_images) -> list[dict]:
    """How much each tool alters already-clean images, before and after training."""
    rows = []
    for i, tool in enumerate(before.tools):
        stats = {}
        for label, reg in (("before", before), ("after", after)):
            outs = [apply_tool(reg, reg.index(tool.name), img) for img in clean_images]
            stats[f"psnr_{label}"] = float(np.mean([core.psnr(o, c) for o, c in zip(outs, clean_images)]))
            stats[f"ssim_{label}"] = float(np.mean([core.ssim(o, c) for o, c in zip(outs, clean_images)]))
        stats["tool"] = tool.name
        stats["delta_psnr"] = stats["psnr_after"] - stats["psnr_before"]
        stats["delta_ssim"] = stats["ssim_after"] - stats["ssim_before"]
        rows.append({c: stats[c] for c in MISUSE_COLUMNS})
    return rows


def config_dict(cfg: CotrainConfig) -> dict:
    return asdict(cfg)
