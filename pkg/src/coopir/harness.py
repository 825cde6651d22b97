"""Run configuration, run-directory persistence and the subcommand bodies.

Every artifact is written through :class:`RunDir`, which writes to a
temporary sibling and renames it into place, so a crash never leaves a
half-written file behind.  Timestamps live only in ``meta.json``; everything
else is a pure function of the effective configuration.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import core
from .cotrain import LOG_COLUMNS as COTRAIN_COLUMNS
from .cotrain import MISUSE_COLUMNS, CotrainConfig, chain_psnr, load_plan_file, misuse_eval, train_tools
from .core import Prng, derive_seed
from .degrade import (
    APPLY_ORDER,
    ConfigError,
    DegradationKind,
    gen_clean,
    make_spec,
    preset,
    preset_combos,
    synthesize,
)
from .planner import (
    LOG_COLUMNS as PLANNER_COLUMNS,
    GrpoConfig,
    PolicyParams,
    PromptSampler,
    compute_reward,
    greedy_plan,
    train_planner,
)
from .plansearch import PLAN_COLUMNS, StudyConfig, build_registry, execute_plan, run_study, summarize_study
from .tools import ToolRegistry, serialize_params


class MissingArtifact(ConfigError):
    """A subcommand needs a file that an earlier step should have produced."""

    def __init__(self, path, hint: str = ""):
        super().__init__(f"missing input artifact: {path}" + (f" ({hint})" if hint else ""))
        self.path = Path(path)


# ---------------------------------------------------------------------------
# Configuration

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "workers": 1,
    "registry": {"preset": "default", "params": None},
    "degradation": {
        "image_size": 64,
        "clean_kinds": ["value_noise_texture", "shapes"],
        "ranges": None,
    },
    "synth": {"preset": "all", "n_samples": 32},
    "study": {
        "preset": "empirical8",
        "registry": "study",
        "registry_params": None,
        "n_images": 15,
        "max_len": 4,
        "fraction": 0.1,
        "plan_cap": 1_000_000,
    },
    "planner": {
        "preset": "all",
        "group_size": 8,
        "batch": 32,
        "clip_eps": 0.2,
        "kl_beta": 0.01,
        "lr": 1e-3,
        "iterations": 100,
        "l_max": 6,
        "std_floor": 1e-8,
        "hidden": 32,
        "embed": 16,
    },
    "cotrain": {
        "preset": "all",
        "n_samples": 50,
        "epochs": 23,
        "lr": 1e-6,
        "batch": 2,
        "max_norm": 0.5,
        "plan_source": "policy",
        "plan": ["denoise_mid", "derain"],
        "plan_file": None,
        "policy": None,
        "dataset": "generate",
        "n_clean_eval": 20,
    },
    "eval": {"preset": "groupC", "n_per_combo": 8, "policy": None, "registry_params": None},
}

# Keys whose value may be replaced by a structured value rather than a scalar.
_FREE_FORM = {"degradation.ranges", "degradation.clean_kinds", "cotrain.plan"}


def flat_keys(cfg: dict, prefix: str = "") -> list[str]:
    keys = []
    for k, v in cfg.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and path not in _FREE_FORM:
            keys.extend(flat_keys(v, path + "."))
        else:
            keys.append(path)
    return keys


def _unknown(key: str):
    valid = "\n  ".join(flat_keys(DEFAULT_CONFIG))
    return ConfigError(f"unknown config key {key!r}; valid keys:\n  {valid}")


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict) or ".".join(parts[: i + 1]) in _FREE_FORM:
            raise _unknown(dotted)
        node = node[part]
    if parts[-1] not in node or (isinstance(node[parts[-1]], dict) and dotted not in _FREE_FORM):
        raise _unknown(dotted)
    node[parts[-1]] = value


def _merge(cfg: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        path = f"{prefix}{k}"
        if k not in cfg:
            raise _unknown(path)
        if isinstance(cfg[k], dict) and path not in _FREE_FORM:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} expects an object")
            _merge(cfg[k], v, path + ".")
        else:
            cfg[k] = v


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(p, "config file")
        try:
            _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_key(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# Run directory


class RunDir:
    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def __truediv__(self, name) -> Path:
        return self.path / name

    @contextmanager
    def atomic(self, name):
        """Yield a temporary path that is renamed to ``name`` on success."""
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        os.close(fd)
        try:
            yield Path(tmp)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def write_text(self, name, text: str) -> Path:
        with self.atomic(name) as tmp:
            tmp.write_text(text)
        return self.path / name

    def write_json(self, name, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_jsonl(self, name, records) -> Path:
        return self.write_text(name, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    def write_csv(self, name, columns, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] for c in columns] if isinstance(row, dict) else row)
        return self.write_text(name, buf.getvalue())

    def write_config(self, cfg: dict) -> Path:
        return self.write_json("config.json", cfg)

    def stamp(self, command: str, **fields) -> None:
        meta_path = self.path / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        meta.setdefault(command, {}).update(fields)
        self.write_json("meta.json", meta)

    def require(self, name, hint: str = "") -> Path:
        p = self.path / name
        if not p.exists():
            raise MissingArtifact(p, hint)
        return p


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _num(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Shared helpers


def combo_label(combo) -> str:
    kinds = {DegradationKind(k) for k in combo}
    return "+".join(k.value for k in APPLY_ORDER if k in kinds)


def tool_registry(cfg: dict, params: str | None = None) -> ToolRegistry:
    return build_registry(cfg["registry"]["preset"], params or cfg["registry"]["params"])


def prompt_sampler(cfg: dict, preset_name: str) -> PromptSampler:
    deg = cfg["degradation"]
    return PromptSampler(preset(preset_name), deg["image_size"], tuple(deg["clean_kinds"]), deg["ranges"])


def load_policy(run: RunDir, path: str | None) -> PolicyParams:
    p = Path(path) if path else run / "policy.bin"
    if not p.exists():
        raise MissingArtifact(p, "run train-planner first or set the policy path")
    return PolicyParams.load(p)


def behavior_stats(policy, registry: ToolRegistry, dataset, l_max: int = 6) -> dict:
    """Planning-behavior statistics over ``dataset`` = [(lq, gt_set), ...].

    ``policy`` is either a :class:`PolicyParams` (greedy decoding) or any
    callable mapping an image to a plan of tool ids.
    """
    if isinstance(policy, PolicyParams):
        def plan_fn(img):
            return greedy_plan(policy, img, l_max).plan
    else:
        plan_fn = policy
    targets = [str(t.target) for t in registry.tools]
    noisy = first_denoise = both = ordered = 0
    lengths = {1: [], 2: [], 3: []}
    used = dict.fromkeys(registry.names, 0)
    repeated = dict.fromkeys(registry.names, 0)
    for img, gt_set in dataset:
        plan = tuple(plan_fn(img))
        kinds = {str(k) for k in gt_set}
        tgt = [targets[t] for t in plan]
        if "noise" in kinds:
            noisy += 1
            first_denoise += bool(tgt) and tgt[0] == "noise"
        if {"rain", "haze"} <= kinds:
            both += 1
            if "rain" in tgt and "haze" in tgt and tgt.index("rain") < tgt.index("haze"):
                ordered += 1
        if len(kinds) in lengths:
            lengths[len(kinds)].append(len(plan))
        for t in set(plan):
            name = registry.names[t]
            used[name] += 1
            repeated[name] += plan.count(t) > 1
    return {
        "denoise_first": first_denoise / noisy if noisy else None,
        "n_noisy": noisy,
        "derain_before_dehaze": ordered / both if both else None,
        "n_rain_haze": both,
        "repetition_rate": {n: repeated[n] / used[n] if used[n] else None for n in registry.names},
        "mean_length": {str(k): float(np.mean(v)) if v else None for k, v in lengths.items()},
    }


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(cfg: dict, run: RunDir) -> dict:
    s, deg = cfg["synth"], cfg["degradation"]
    table = preset(s["preset"])
    sampler = PromptSampler(table, deg["image_size"], tuple(deg["clean_kinds"]), deg["ranges"])
    rng = Prng(cfg["seed"])
    manifest = []
    for i in range(s["n_samples"]):
        lq, clean, gt_set = sampler(rng)
        stem = f"images/{i:04d}"
        with run.atomic(f"{stem}_lq.opimg") as tmp:
            core.save_image(lq, tmp)
        with run.atomic(f"{stem}_gt.opimg") as tmp:
            core.save_image(clean, tmp)
        with run.atomic(f"{stem}_lq.ppm") as tmp:
            core.save_ppm(lq, tmp)
        manifest.append({
            "index": i,
            "lq": f"{stem}_lq.opimg",
            "gt": f"{stem}_gt.opimg",
            "gt_set": combo_label(gt_set).split("+"),
        })
    run.write_jsonl("synth_manifest.jsonl", manifest)
    return {"n_samples": len(manifest)}


def study_config(cfg: dict) -> StudyConfig:
    s, deg = cfg["study"], cfg["degradation"]
    return StudyConfig(
        n_images=s["n_images"],
        preset=s["preset"],
        max_len=s["max_len"],
        registry=s["registry"],
        registry_params=s["registry_params"],
        image_size=deg["image_size"],
        clean_kinds=tuple(deg["clean_kinds"]),
        fraction=s["fraction"],
        plan_cap=s["plan_cap"],
        ranges=deg["ranges"],
        seed=cfg["seed"],
        workers=cfg["workers"],
    )


def cmd_study(cfg: dict, run: RunDir, progress=None) -> dict:
    records, rows = run_study(study_config(cfg), progress)
    run.write_jsonl("study_report.jsonl", records)
    run.write_csv("plans.csv", PLAN_COLUMNS, rows)
    summary = summarize_study(records)
    run.write_json("study_summary.json", summary)
    return summary


def grpo_config(cfg: dict) -> GrpoConfig:
    p = cfg["planner"]
    fields = ("group_size", "batch", "clip_eps", "kl_beta", "lr", "iterations", "l_max", "std_floor", "hidden",
              "embed")
    return GrpoConfig(**{k: p[k] for k in fields}, seed=cfg["seed"])


def cmd_train_planner(cfg: dict, run: RunDir, progress=None) -> dict:
    registry = tool_registry(cfg)
    policy, log = train_planner(grpo_config(cfg), registry, prompt_sampler(cfg, cfg["planner"]["preset"]), progress)
    run.write_csv("planner_log.csv", PLANNER_COLUMNS, log)
    with run.atomic("policy.bin") as tmp:
        policy.save(tmp)
    return {"iterations": len(log), "final_mean_reward": log[-1]["mean_reward"] if log else None}


def cotrain_dataset(cfg: dict, run: RunDir) -> list:
    """(lq, gt, gt_set) triples, either freshly generated or read from a synth run."""
    c = cfg["cotrain"]
    if c["dataset"] == "generate":
        sampler = prompt_sampler(cfg, c["preset"])
        rng = Prng(derive_seed(cfg["seed"], 3))
        return [sampler(rng) for _ in range(c["n_samples"])]
    if c["dataset"] == "synth":
        manifest = read_jsonl(run.require("synth_manifest.jsonl", "run synth first"))
        return [
            (core.load_image(run.require(m["lq"])), core.load_image(run.require(m["gt"])), frozenset(m["gt_set"]))
            for m in manifest[: c["n_samples"]]
        ]
    raise ConfigError(f"cotrain.dataset must be 'generate' or 'synth', got {c['dataset']!r}")


def cotrain_plans(cfg: dict, run: RunDir, registry: ToolRegistry, images) -> list[tuple]:
    c = cfg["cotrain"]
    source = c["plan_source"]
    if source == "fixed":
        try:
            plan = tuple(registry.index(name) for name in c["plan"])
        except KeyError as exc:
            raise ConfigError(f"cotrain.plan: {exc}") from None
        return [plan] * len(images)
    if source == "file":
        if not c["plan_file"]:
            raise ConfigError("cotrain.plan_source 'file' needs cotrain.plan_file")
        if not Path(c["plan_file"]).exists():
            raise MissingArtifact(c["plan_file"], "cotrain.plan_file")
        plans = load_plan_file(c["plan_file"], registry)
        if len(plans) == 1:
            return plans * len(images)
        if len(plans) != len(images):
            raise ConfigError(f"plan file has {len(plans)} plans for {len(images)} samples")
        return plans
    if source == "policy":
        policy = load_policy(run, c["policy"])
        if policy.n_tools != len(registry):
            raise ConfigError(f"policy was trained for {policy.n_tools} tools, registry has {len(registry)}")
        return [greedy_plan(policy, img, cfg["planner"]["l_max"]).plan for img in images]
    raise ConfigError(f"cotrain.plan_source must be 'policy', 'fixed' or 'file', got {source!r}")


def clean_eval_images(cfg: dict, n: int) -> list:
    deg = cfg["degradation"]
    kinds = deg["clean_kinds"]
    return [gen_clean(kinds[i % len(kinds)], deg["image_size"], Prng(derive_seed(cfg["seed"] ^ 0xC1EA7, i)))
            for i in range(n)]


def cmd_cotrain(cfg: dict, run: RunDir, progress=None) -> dict:
    c = cfg["cotrain"]
    registry = tool_registry(cfg)
    before = registry.copy()
    data = cotrain_dataset(cfg, run)
    plans = cotrain_plans(cfg, run, registry, [lq for lq, _, _ in data])
    dataset = [(lq, gt, plan) for (lq, gt, _), plan in zip(data, plans)]
    tcfg = CotrainConfig(epochs=c["epochs"], lr=c["lr"], batch=c["batch"], max_norm=c["max_norm"], seed=cfg["seed"])
    (run / "checkpoints").mkdir(exist_ok=True)
    log = train_tools(registry, dataset, tcfg, checkpoint_dir=None, progress=_checkpointing(run, registry, progress))
    run.write_csv("cotrain_log.csv", COTRAIN_COLUMNS, log)
    with run.atomic("tools.bin") as tmp:
        serialize_params(registry, tmp)
    misuse = misuse_eval(before, registry, clean_eval_images(cfg, c["n_clean_eval"]))
    run.write_csv("misuse.csv", MISUSE_COLUMNS, misuse)
    return {
        "epochs": len(log),
        "psnr_before": chain_psnr(before, dataset),
        "psnr_after": chain_psnr(registry, dataset),
    }


def _checkpointing(run: RunDir, registry: ToolRegistry, progress):
    def hook(epoch, row):
        with run.atomic(f"checkpoints/tools_epoch{epoch:03d}.bin") as tmp:
            serialize_params(registry, tmp)
        if progress:
            progress(epoch, row)
    return hook


EVAL_COLUMNS = ["combo", "n", "psnr", "ssim", "gsim", "nr_sharp", "nr_balance", "lq_psnr", "lq_ssim",
                "mean_rd", "rf_rate", "mean_plan_len"]


def eval_inputs(cfg: dict, preset_name: str, n_per_combo: int) -> list[tuple]:
    """Seeded (combo, lq, clean, gt_set) inputs, ``n_per_combo`` per combination."""
    deg = cfg["degradation"]
    kinds = deg["clean_kinds"]
    out = []
    for j, combo in enumerate(preset_combos(preset_name)):
        for i in range(n_per_combo):
            idx = j * n_per_combo + i
            rng = Prng(derive_seed(cfg["seed"] ^ 0xE7A1, idx))
            clean = gen_clean(kinds[i % len(kinds)], deg["image_size"], Prng(rng.next_u64()))
            lq, gt_set = synthesize(clean, make_spec(combo, rng, deg["ranges"]))
            out.append((combo, lq, clean, gt_set))
    return out


def cmd_eval(cfg: dict, run: RunDir, progress=None) -> dict:
    e = cfg["eval"]
    registry = tool_registry(cfg, e["registry_params"])
    policy = load_policy(run, e["policy"])
    l_max = cfg["planner"]["l_max"]
    inputs = eval_inputs(cfg, e["preset"], e["n_per_combo"])
    by_combo: dict = {}
    for combo, lq, clean, gt_set in inputs:
        sample = greedy_plan(policy, lq, l_max)
        out = execute_plan(registry, sample.plan, lq)
        m = core.evaluate(out, clean)
        reward = compute_reward(registry, lq, clean, gt_set, sample, l_max, rq=0.0)
        by_combo.setdefault(combo_label(combo), []).append(
            (m.as_tuple(), core.psnr(lq, clean), core.ssim(lq, clean), reward.rd, reward.rf, len(sample.plan))
        )
    rows = []
    for label, items in by_combo.items():
        metrics = np.mean([it[0] for it in items], axis=0)
        rows.append({
            "combo": label,
            "n": len(items),
            **{f: float(v) for f, v in zip(core.MetricVector.FIELDS, metrics)},
            "lq_psnr": float(np.mean([it[1] for it in items])),
            "lq_ssim": float(np.mean([it[2] for it in items])),
            "mean_rd": float(np.mean([it[3] for it in items])),
            "rf_rate": float(np.mean([it[4] for it in items])),
            "mean_plan_len": float(np.mean([it[5] for it in items])),
        })
    run.write_csv("eval.csv", EVAL_COLUMNS, rows)
    stats = behavior_stats(policy, registry, [(lq, gt) for _, lq, _, gt in inputs], l_max)
    run.write_json("behavior.json", stats)
    return {"rows": len(rows)}


# ---------------------------------------------------------------------------
# Report


def finding_tables(records: list[dict]) -> tuple[list[dict], list[dict]]:
    """Per-combo tables for the out-of-scope and duplicate-tool findings."""
    groups: dict = {}
    for r in records:
        groups.setdefault("+".join(r["gt_set"]), []).append(r)
    f1, f2 = [], []
    for combo, rs in groups.items():
        s = summarize_study(rs)
        f1.append({"combo": combo, "n_inputs": len(rs), "mean_selected": s["mean_selected"],
                   "oos_fraction": s["oos_fraction"], "oos_wins_fraction": s["oos_wins_fraction"],
                   "mean_best_rank_oos": s["mean_best_rank_oos"],
                   "mean_best_rank_matched": s["mean_best_rank_matched"]})
        f2.append({"combo": combo, "n_inputs": len(rs), "dup_fraction": s["dup_fraction"],
                   "mean_rank_with_duplicates": s["mean_rank_with_duplicates"],
                   "mean_rank_deduplicated": s["mean_rank_deduplicated"]})
    return f1, f2


FINDING1_COLUMNS = ["combo", "n_inputs", "mean_selected", "oos_fraction", "oos_wins_fraction",
                    "mean_best_rank_oos", "mean_best_rank_matched"]
FINDING2_COLUMNS = ["combo", "n_inputs", "dup_fraction", "mean_rank_with_duplicates", "mean_rank_deduplicated"]


def cmd_report(cfg: dict, run: RunDir, progress=None) -> dict:
    from . import figures

    summary: dict = {}
    rendered = []
    study_path = run / "study_report.jsonl"
    if study_path.exists():
        records = read_jsonl(study_path)
        summary["study"] = summarize_study(records)
        f1, f2 = finding_tables(records)
        run.write_csv("finding1.csv", FINDING1_COLUMNS, f1)
        run.write_csv("finding2.csv", FINDING2_COLUMNS, f2)
        rendered += figures.study_figures(records, run)
    if (run / "planner_log.csv").exists():
        log = read_csv(run / "planner_log.csv")
        summary["planner"] = {"iterations": len(log), "first_mean_reward": log[0]["mean_reward"],
                              "last_mean_reward": log[-1]["mean_reward"]}
        rendered.append(figures.planner_curve(log, run))
    if (run / "cotrain_log.csv").exists():
        log = read_csv(run / "cotrain_log.csv")
        summary["cotrain"] = {"epochs": len(log), "first_loss_target": log[0]["mean_loss_target"],
                              "last_loss_target": log[-1]["mean_loss_target"]}
        rendered.append(figures.cotrain_curve(log, run))
    if (run / "eval.csv").exists():
        summary["eval"] = read_csv(run / "eval.csv")
    if (run / "behavior.json").exists():
        summary["behavior"] = json.loads((run / "behavior.json").read_text())
    if not summary:
        expected = ", ".join(str(run / n) for n in ("study_report.jsonl", "planner_log.csv", "cotrain_log.csv",
                                                   "eval.csv"))
        raise MissingArtifact(run.path, f"nothing to report; expected one of {expected}")
    summary["figures"] = [str(p.relative_to(run.path)) for p in rendered]
    run.write_json("summary.json", summary)
    run.write_csv("summary.csv", ["section", "key", "value"], _flatten_summary(summary))
    return {"sections": sorted(k for k in summary if k != "figures"), "figures": len(rendered)}


def _flatten_summary(summary: dict) -> list[list]:
    rows = []
    for section, body in summary.items():
        if isinstance(body, dict):
            for k, v in body.items():
                if not isinstance(v, (dict, list)):
                    rows.append([section, k, v])
    return rows


COMMANDS = {
    "synth": cmd_synth,
    "study": cmd_study,
    "train-planner": cmd_train_planner,
    "cotrain": cmd_cotrain,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_command(name: str, cfg: dict, progress=None) -> dict:
    """Write the effective config, run one subcommand, record timestamps."""
    run = RunDir(cfg["output_dir"])
    run.write_config(cfg)
    run.stamp(name, started=time.strftime("%Y-%m-%dT%H:%M:%S"), status="running")
    fn = COMMANDS[name]
    result = fn(cfg, run) if name == "synth" else fn(cfg, run, progress)
    run.stamp(name, finished=time.strftime("%Y-%m-%dT%H:%M:%S"), status="ok")
    return result

