"""Exhaustive restoration-plan search, multi-metric ranking and plan selection.

Every plan up to a maximum length is executed on every degraded input,
scored with the five quality metrics, ranked per metric, and filtered by the
top-fraction / 3-of-5 / full-plus-no-reference rule.  Two analyzers then
measure how often selected plans use out-of-scope tools and what removing
repeated tools does to their aggregated rank.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np

from . import core
from .core import MetricVector, Prng, derive_seed
from .degrade import gen_clean, make_spec, preset_combos, synthesize
from .tools import ToolRegistry, apply_tool, load_params, make_registry

DEFAULT_PLAN_CAP = 10**6
FR_IDX = (0, 1, 2)
NR_IDX = (3, 4)


class BudgetError(RuntimeError):
    pass


def plan_count(n_tools: int, max_len: int) -> int:
    return sum(n_tools**k for k in range(1, max_len + 1))


def enumerate_plans(n_tools: int, max_len: int, cap: int = DEFAULT_PLAN_CAP) -> list[tuple]:
    """All plans of length 1..max_len, shorter first, lexicographic within a length."""
    if n_tools < 1 or max_len < 1:
        raise ValueError("n_tools and max_len must be >= 1")
    count = plan_count(n_tools, max_len)
    if count > cap:
        raise BudgetError(f"{count} plans exceed the plan budget of {cap}")
    plans = []
    for k in range(1, max_len + 1):
        plans.extend(itertools.product(range(n_tools), repeat=k))
    return plans


def execute_plan(registry: ToolRegistry, plan, img: np.ndarray) -> np.ndarray:
    for tool_id in plan:
        img = apply_tool(registry, tool_id, img)
    return img


def run_plans(registry: ToolRegistry, plans, img: np.ndarray) -> list[np.ndarray]:
    """Execute ``plans`` sharing work between plans with a common prefix."""
    cache: dict[tuple, np.ndarray] = {(): img}
    outputs = []
    for plan in plans:
        plan = tuple(plan)
        if plan not in cache:
            k = len(plan) - 1
            while plan[:k] not in cache:
                k -= 1
            out = cache[plan[:k]]
            for j in range(k, len(plan)):
                out = apply_tool(registry, plan[j], out)
                cache[plan[: j + 1]] = out
        outputs.append(cache[plan])
    return outputs


def evaluate_plans(registry: ToolRegistry, plans, lq: np.ndarray, gt: np.ndarray) -> list[MetricVector]:
    return [core.evaluate(out, gt) for out in run_plans(registry, plans, lq)]


def rank_plans(evals) -> np.ndarray:
    """Per-metric ranks, shape (N, 5); higher scores rank first, ties go to the earlier plan."""
    table = np.array([e.as_tuple() if isinstance(e, MetricVector) else e for e in evals], dtype=np.float64)
    n = table.shape[0]
    ranks = np.empty(table.shape, dtype=np.int64)
    idx = np.arange(n)
    for m in range(table.shape[1]):
        order = np.lexsort((idx, -table[:, m]))
        ranks[order, m] = idx + 1
    return ranks


def agg_ranks(ranks: np.ndarray) -> np.ndarray:
    return ranks.mean(axis=1)


def good_cutoff(n: int, fraction: float = 0.1) -> int:
    return max(1, math.ceil(round(fraction * n, 9)))


def select_high_performing(ranks: np.ndarray, fraction: float = 0.1, min_good: int = 3) -> list[int]:
    """Plans good under >= ``min_good`` metrics, including an FR and an NR metric."""
    good = ranks <= good_cutoff(ranks.shape[0], fraction)
    keep = (
        (good.sum(axis=1) >= min_good)
        & good[:, list(FR_IDX)].any(axis=1)
        & good[:, list(NR_IDX)].any(axis=1)
    )
    return [int(i) for i in np.flatnonzero(keep)]


def is_out_of_scope(registry: ToolRegistry, tool_id: int, gt_set) -> bool:
    return registry[tool_id].target not in gt_set


def analyze_out_of_scope(registry: ToolRegistry, plans, selected, agg, gt_set) -> dict:
    """Out-of-scope usage among selected plans, and best aggregated ranks.

    ``best_rank_oos`` is the best rank over all plans with at least one
    out-of-scope tool; ``best_rank_matched`` over plans whose tool targets are
    exactly the ground-truth set.
    """
    gt_set = frozenset(gt_set)
    has_oos = [any(is_out_of_scope(registry, t, gt_set) for t in p) for p in plans]
    matched = [frozenset(registry[t].target for t in p) == gt_set for p in plans]
    oos_sel = [i for i in selected if has_oos[i]]
    oos_ranks = [agg[i] for i in range(len(plans)) if has_oos[i]]
    matched_ranks = [agg[i] for i in range(len(plans)) if matched[i]]
    return {
        "oos_fraction": len(oos_sel) / len(selected) if selected else 0.0,
        "best_rank_oos": float(min(oos_ranks)) if oos_ranks else None,
        "best_rank_matched": float(min(matched_ranks)) if matched_ranks else None,
    }


def dedup(plan) -> tuple:
    """Keep the first occurrence of every tool, in order."""
    seen = set()
    out = []
    for t in plan:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return tuple(out)


def analyze_duplicates(plans, selected, agg) -> dict:
    index = {tuple(p): i for i, p in enumerate(plans)}
    pairs = []
    for i in selected:
        plan = tuple(plans[i])
        short = dedup(plan)
        if len(short) == len(plan):
            continue
        pairs.append((i, index[short], float(agg[i]), float(agg[index[short]])))
    n_dup = len(pairs)
    shift = float(np.mean([b - a for _, _, a, b in pairs])) if pairs else None
    return {
        "dup_fraction": n_dup / len(selected) if selected else 0.0,
        "dedup_pairs": pairs,
        "mean_dedup_shift": shift,
    }


@dataclass
class SelectionReport:
    selected: list
    per_image_count: int
    oos_fraction: float
    dup_fraction: float
    dedup_rank_pairs: list
    best_rank_oos: float | None = None
    best_rank_matched: float | None = None
    extra: dict = field(default_factory=dict)


def analyze_input(registry, plans, evals, gt_set, fraction: float = 0.1):
    ranks = rank_plans(evals)
    agg = agg_ranks(ranks)
    selected = select_high_performing(ranks, fraction)
    oos = analyze_out_of_scope(registry, plans, selected, agg, gt_set)
    dup = analyze_duplicates(plans, selected, agg)
    report = SelectionReport(
        selected=selected,
        per_image_count=len(selected),
        oos_fraction=oos["oos_fraction"],
        dup_fraction=dup["dup_fraction"],
        dedup_rank_pairs=[(a, b) for _, _, a, b in dup["dedup_pairs"]],
        best_rank_oos=oos["best_rank_oos"],
        best_rank_matched=oos["best_rank_matched"],
        extra={"mean_dedup_shift": dup["mean_dedup_shift"]},
    )
    return ranks, agg, report


# ---------------------------------------------------------------------------
# Study driver

CLEAN_SALT = 0x5EED_C1EA


@dataclass
class StudyConfig:
    n_images: int = 15
    preset: str = "empirical8"
    max_len: int = 4
    registry: str = "study"
    registry_params: str | None = None
    image_size: int = 64
    clean_kinds: tuple = ("value_noise_texture", "shapes")
    fraction: float = 0.1
    plan_cap: int = DEFAULT_PLAN_CAP
    ranges: dict | None = None
    seed: int = 0
    workers: int = 1


def clean_image(cfg: StudyConfig, i: int) -> np.ndarray:
    kind = cfg.clean_kinds[i % len(cfg.clean_kinds)]
    return gen_clean(kind, cfg.image_size, Prng(derive_seed(cfg.seed ^ CLEAN_SALT, i)))


def build_registry(name: str, params_path: str | None) -> ToolRegistry:
    reg = make_registry(name)
    if params_path:
        load_params(reg, params_path)
    return reg


_WORKER_STATE: dict = {}


def _study_one(args):
    cfg, idx = args
    key = (cfg.registry, cfg.registry_params)
    if _WORKER_STATE.get("key") != key:
        _WORKER_STATE["key"] = key
        _WORKER_STATE["registry"] = build_registry(*key)
    registry = _WORKER_STATE["registry"]
    combos = preset_combos(cfg.preset)
    img_i, combo_j = divmod(idx, len(combos))
    clean = clean_image(cfg, img_i)
    spec = make_spec(combos[combo_j], Prng(derive_seed(cfg.seed, idx)), cfg.ranges)
    lq, gt_set = synthesize(clean, spec)
    plans = enumerate_plans(len(registry), cfg.max_len, cfg.plan_cap)
    evals = evaluate_plans(registry, plans, lq, clean)
    ranks, agg, rep = analyze_input(registry, plans, evals, gt_set, cfg.fraction)
    names = registry.names
    record = {
        "input": idx,
        "image": img_i,
        "combo": combo_j,
        "gt_set": sorted(str(k) for k in gt_set),
        "steps": [[str(k), params] for k, params in spec.steps],
        "n_plans": len(plans),
        "selected": rep.selected,
        "n_selected": rep.per_image_count,
        "oos_fraction": rep.oos_fraction,
        "dup_fraction": rep.dup_fraction,
        "best_rank_oos": rep.best_rank_oos,
        "best_rank_matched": rep.best_rank_matched,
        "dedup_rank_pairs": [list(p) for p in rep.dedup_rank_pairs],
        "mean_dedup_shift": rep.extra["mean_dedup_shift"],
        "lq_metrics": list(core.evaluate(lq, clean).as_tuple()),
    }
    rows = [
        [idx, i, ">".join(names[t] for t in plan), *evals[i].as_tuple(), *ranks[i].tolist(), float(agg[i])]
        for i, plan in enumerate(plans)
    ]
    return record, rows


PLAN_COLUMNS = [
    "input", "plan_index", "plan",
    "psnr", "ssim", "gsim", "nr_sharp", "nr_balance",
    "rank_psnr", "rank_ssim", "rank_gsim", "rank_nr_sharp", "rank_nr_balance",
    "agg_rank",
]


def run_study(cfg: StudyConfig, progress=None) -> tuple[list[dict], list[list]]:
    """Evaluate every plan on every (clean image, preset combo) input.

    Returns the per-input records and the plan table rows, both in input
    order regardless of the worker count.
    """
    n_inputs = cfg.n_images * len(preset_combos(cfg.preset))
    enumerate_plans(len(make_registry(cfg.registry)), cfg.max_len, cfg.plan_cap)
    jobs = [(cfg, i) for i in range(n_inputs)]
    if cfg.workers > 1:
        with Pool(cfg.workers) as pool:
            results = []
            for res in pool.imap(_study_one, jobs):
                results.append(res)
                if progress:
                    progress(len(results), n_inputs)
    else:
        results = []
        for job in jobs:
            results.append(_study_one(job))
            if progress:
                progress(len(results), n_inputs)
    records = [r for r, _ in results]
    rows = [row for _, rs in results for row in rs]
    return records, rows


def summarize_study(records: list[dict]) -> dict:
    sel = [r["n_selected"] for r in records]
    total_sel = sum(sel)
    oos_sel = sum(r["oos_fraction"] * r["n_selected"] for r in records)
    dup_sel = sum(r["dup_fraction"] * r["n_selected"] for r in records)
    paired = [r for r in records if r["best_rank_oos"] is not None and r["best_rank_matched"] is not None]
    pairs = [p for r in records for p in r["dedup_rank_pairs"]]
    return {
        "n_inputs": len(records),
        "n_plans": records[0]["n_plans"] if records else 0,
        "mean_selected": float(np.mean(sel)) if sel else 0.0,
        "oos_fraction": oos_sel / total_sel if total_sel else 0.0,
        "oos_wins_fraction": (
            float(np.mean([r["best_rank_oos"] < r["best_rank_matched"] for r in paired])) if paired else None
        ),
        "mean_best_rank_oos": float(np.mean([r["best_rank_oos"] for r in paired])) if paired else None,
        "mean_best_rank_matched": float(np.mean([r["best_rank_matched"] for r in paired])) if paired else None,
        "dup_fraction": dup_sel / total_sel if total_sel else 0.0,
        "mean_rank_with_duplicates": float(np.mean([p[0] for p in pairs])) if pairs else None,
        "mean_rank_deduplicated": float(np.mean([p[1] for p in pairs])) if pairs else None,
    }
