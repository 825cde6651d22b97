"""Single-pass restoration planner trained with GRPO.

A fixed featurizer summarizes the degraded image; a small policy emits a
degradation set (eight Bernoulli decisions) followed by a tool sequence
terminated by STOP.  Rewards multiply restoration quality, degradation F1,
a structural format gate and a constant consistency factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import core, grad
from .core import Prng, check_image, derive_seed, load_arrays, save_arrays
from .degrade import KINDS, ComboTable, box_downsample, gen_clean, make_spec, resize_bilinear, sample_combo, synthesize
from .grad import EVAL, Adam, Param, Tape
from .plansearch import execute_plan
from .tools import ToolRegistry

N_FEATURES = 20
N_KINDS = len(KINDS)
MAGIC_POLICY = b"OPPOL1"
RQ_WEIGHTS = (0.30, 0.25, 0.15, 0.15, 0.15)
PSNR_NORM = 50.0


# ---------------------------------------------------------------------------
# Features


_BAND_EDGES = (0.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, np.inf)


def featurize(img: np.ndarray) -> np.ndarray:
    """Twenty fixed image statistics, each scaled to roughly [0, 1]."""
    img = check_image(img)
    rgb = img if img.shape[2] == 3 else np.repeat(img, 3, axis=2)
    y = core.luma(img)
    h, w = y.shape
    f = []
    f.extend(rgb.mean(axis=(0, 1)))
    f.extend(rgb.std(axis=(0, 1)))
    # Sobel magnitude of a unit step is 4
    g = core.sobel_magnitude(y)
    f.extend([g.mean() / 4.0, g.std() / 4.0])
    lap = ndimage.laplace(y, mode="nearest")
    f.append(10.0 * np.median(np.abs(lap - np.median(lap))))
    # radial band energy fractions of the mean-removed spectrum (cycles/pixel)
    power = np.abs(np.fft.fft2(y - y.mean())) ** 2
    fy, fx = np.meshgrid(np.fft.fftfreq(h), np.fft.fftfreq(w), indexing="ij")
    radius = np.hypot(fy, fx)
    energy = power.sum()
    for lo, hi in zip(_BAND_EDGES[:-1], _BAND_EDGES[1:]):
        band = power[(radius >= lo) & (radius < hi)].sum()
        f.append(band / energy if energy > 0 else 0.0)
    f.append(ndimage.minimum_filter(rgb.min(axis=2), size=7, mode="nearest").mean())
    # RMS residual after a 2x down/up round trip, x10
    up = resize_bilinear(box_downsample(y[:, :, None], 2), h + h % 2, w + w % 2)[:h, :w, 0]
    f.append(10.0 * math.sqrt(np.mean((y - up) ** 2)))
    # share of absolute neighbor differences that sit on the 8-pixel grid
    dh = np.abs(np.diff(y, axis=1))
    dv = np.abs(np.diff(y, axis=0))
    on = np.concatenate([dh[:, 7::8].ravel(), dv[7::8].ravel()])
    off_h = np.delete(dh, np.s_[7::8], axis=1)
    off_v = np.delete(dv, np.s_[7::8], axis=0)
    off = np.concatenate([off_h.ravel(), off_v.ravel()])
    b = on.mean() if on.size else 0.0
    o = off.mean() if off.size else 0.0
    f.append(b / (b + o) if b + o > 0 else 0.0)
    f.append(y.mean())
    f.extend(np.percentile(y, [5.0, 95.0]))
    # horizontal-gradient energy share: near-vertical streaks push it up
    gx = ndimage.correlate(y, core.SOBEL_X, mode="nearest")
    gy = ndimage.correlate(y, core.SOBEL_Y, mode="nearest")
    ex, ey = np.mean(gx * gx), np.mean(gy * gy)
    f.append(ex / (ex + ey) if ex + ey > 0 else 0.0)
    out = np.asarray(f, dtype=np.float64)
    assert out.shape == (N_FEATURES,)
    return out


# ---------------------------------------------------------------------------
# Policy


class PolicyParams:
    """Degradation head, tool embeddings and a two-layer plan head."""

    NAMES = ("deg_w", "deg_b", "embed", "w1", "b1", "w2", "b2")

    def __init__(self, params: dict[str, Param]):
        self.params = params

    @classmethod
    def zeros(cls, n_tools: int, hidden: int = 32, embed: int = 16) -> PolicyParams:
        v = n_tools + 1
        shapes = {
            "deg_w": (N_KINDS, N_FEATURES),
            "deg_b": (N_KINDS,),
            "embed": (v, embed),
            "w1": (hidden, N_FEATURES + embed),
            "b1": (hidden,),
            "w2": (v, hidden),
            "b2": (v,),
        }
        return cls({n: Param(n, np.zeros(s)) for n, s in shapes.items()})

    @classmethod
    def init(cls, n_tools: int, rng: Prng, hidden: int = 32, embed: int = 16) -> PolicyParams:
        """Uniform initial policy; hidden weights random so the plan head can learn."""
        pol = cls.zeros(n_tools, hidden, embed)
        for name in ("embed", "w1"):
            p = pol.params[name]
            fan_in = p.value.shape[1]
            p.value = rng.normal(p.value.size).reshape(p.value.shape) / math.sqrt(fan_in)
        return pol

    @property
    def n_tools(self) -> int:
        return self.params["b2"].value.shape[0] - 1

    @property
    def stop(self) -> int:
        return self.n_tools

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def list(self) -> list[Param]:
        return [self.params[n] for n in self.NAMES]

    def copy(self) -> PolicyParams:
        return PolicyParams({n: Param(n, p.value.copy()) for n, p in self.params.items()})

    def save(self, path) -> None:
        save_arrays(path, MAGIC_POLICY, {n: self.params[n].value for n in self.NAMES})

    @classmethod
    def load(cls, path) -> PolicyParams:
        arrays = load_arrays(path, MAGIC_POLICY)
        missing = [n for n in cls.NAMES if n not in arrays]
        if missing:
            raise KeyError(f"{path}: missing policy arrays {missing}")
        return cls({n: Param(n, arrays[n]) for n in cls.NAMES})


def _handles(ops, policy: PolicyParams) -> dict:
    return {n: ops.param(p) for n, p in policy.params.items()}


def deg_logits(ops, h, feats):
    return ops.add(ops.matmul(feats, ops.transpose(h["deg_w"])), h["deg_b"])


def plan_logits(ops, h, feats, prefix_weights):
    """Logits over tools+STOP for rows ``concat(features, mean prefix embedding)``."""
    x = ops.concat(feats, ops.matmul(prefix_weights, h["embed"]), axis=1)
    hidden = ops.tanh(ops.add(ops.matmul(x, ops.transpose(h["w1"])), h["b1"]))
    return ops.add(ops.matmul(hidden, ops.transpose(h["w2"])), h["b2"])


def prefix_weights(prefixes, vocab: int) -> np.ndarray:
    """Row i averages the embeddings of ``prefixes[i]`` (zero row when empty)."""
    m = np.zeros((len(prefixes), vocab))
    for i, prefix in enumerate(prefixes):
        for t in prefix:
            m[i, t] += 1.0
        if prefix:
            m[i] /= len(prefix)
    return m


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(grad.log_softmax(logits))


def policy_forward(policy: PolicyParams, features, prefix, l_max: int = 6):
    """Next-token distribution over tools+STOP, and the eight degradation probabilities."""
    if len(prefix) >= l_max:
        raise ValueError(f"prefix of length {len(prefix)} reaches l_max={l_max}")
    h = _handles(EVAL, policy)
    feats = np.asarray(features, dtype=np.float64)[None]
    logits = plan_logits(EVAL, h, feats, prefix_weights([list(prefix)], policy.stop + 1))
    deg = grad.sigmoid(deg_logits(EVAL, h, feats))
    return _softmax(logits)[0], deg[0]


@dataclass
class PlanSample:
    """One rollout.  ``step_logprobs`` holds the eight degradation decisions then the plan tokens."""

    tokens: list
    step_logprobs: list
    deg_probs: np.ndarray
    deg_pred: frozenset
    stop: int
    total_logprob: float = field(init=False)

    def __post_init__(self):
        self.total_logprob = float(sum(self.step_logprobs))

    @property
    def plan(self) -> tuple:
        if self.tokens and self.tokens[-1] == self.stop:
            return tuple(self.tokens[:-1])
        return tuple(self.tokens)


def _make_sample(tokens, step_lps, deg_probs, deg_bits, stop) -> PlanSample:
    pred = frozenset(k for k, bit in zip(KINDS, deg_bits) if bit)
    return PlanSample(list(tokens), [float(x) for x in step_lps], np.asarray(deg_probs), pred, stop)


def sample_plans(policy: PolicyParams, feats: np.ndarray, rng: Prng | None, l_max: int = 6,
                 greedy: bool = False) -> list[PlanSample]:
    """Roll out one sample per feature row (greedy decoding when ``greedy``)."""
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n = feats.shape[0]
    vocab = policy.stop + 1
    h = _handles(EVAL, policy)
    z = deg_logits(EVAL, h, feats)
    probs = grad.sigmoid(z)
    if greedy:
        bits = probs >= 0.5
    else:
        bits = rng.random(n * N_KINDS).reshape(n, N_KINDS) < probs
    deg_lp = np.where(bits, grad.log_sigmoid(z), grad.log_sigmoid(-z))
    tokens = [[] for _ in range(n)]
    lps = [list(deg_lp[i]) for i in range(n)]
    active = list(range(n))
    for _ in range(l_max):
        if not active:
            break
        m = prefix_weights([tokens[i] for i in active], vocab)
        logp = grad.log_softmax(plan_logits(EVAL, h, feats[active], m))
        still = []
        for row, i in enumerate(active):
            if greedy:
                tok = int(np.argmax(logp[row]))
            else:
                tok = rng.categorical(np.exp(logp[row]))
            tokens[i].append(tok)
            lps[i].append(float(logp[row, tok]))
            if tok != policy.stop:
                still.append(i)
        active = still
    return [_make_sample(tokens[i], lps[i], probs[i], bits[i], policy.stop) for i in range(n)]


def greedy_plan(policy: PolicyParams, img: np.ndarray, l_max: int = 6) -> PlanSample:
    return sample_plans(policy, featurize(img), None, l_max, greedy=True)[0]


# ---------------------------------------------------------------------------
# Reward


@dataclass(frozen=True)
class RewardBreakdown:
    rq: float
    rd: float
    rf: int
    rc: int
    total: float


def f1_score(pred, gt) -> float:
    pred, gt = set(pred), set(gt)
    if not pred and not gt:
        return 1.0
    if not pred or not gt:
        return 0.0
    return 2.0 * len(pred & gt) / (len(pred) + len(gt))


def quality_reward(m: core.MetricVector) -> float:
    terms = (min(m.psnr, PSNR_NORM) / PSNR_NORM, m.ssim, m.gsim, m.nr_sharp, m.nr_balance)
    return max(0.0, sum(w * t for w, t in zip(RQ_WEIGHTS, terms)))


def format_ok(plan, n_tools: int, l_max: int) -> bool:
    return 1 <= len(plan) <= l_max and all(0 <= t < n_tools for t in plan)


def compute_reward(registry: ToolRegistry, lq, gt, gt_set, sample: PlanSample, l_max: int = 6,
                   rq: float | None = None) -> RewardBreakdown:
    """Multiplicative reward; ``rq`` may be supplied when already computed for this plan."""
    plan = sample.plan
    rf = int(format_ok(plan, len(registry), l_max))
    if rq is None:
        valid = all(0 <= t < len(registry) for t in plan)
        rq = quality_reward(core.evaluate(execute_plan(registry, plan, lq), gt)) if valid else 0.0
    rd = f1_score(sample.deg_pred, gt_set)
    rc = 1
    return RewardBreakdown(rq, rd, rf, rc, rq * rd * rf * rc)


# ---------------------------------------------------------------------------
# GRPO


@dataclass
class GrpoConfig:
    group_size: int = 8
    batch: int = 32
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    lr: float = 1e-3
    iterations: int = 100
    l_max: int = 6
    std_floor: float = 1e-8
    hidden: int = 32
    embed: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")


def grpo_advantages(rewards, std_floor: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if np.all(r == r[0]):
        # the mean of equal floats can differ from them by rounding; keep the zero exact
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + std_floor)


@dataclass
class Group:
    features: np.ndarray
    samples: list
    rewards: list

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.rewards])


def grpo_objective(tape: Tape, policy: PolicyParams, ref: PolicyParams, groups, cfg: GrpoConfig,
                   advantages: np.ndarray):
    """Build the negated clipped-surrogate-minus-KL objective on ``tape``."""
    samples = [s for g in groups for s in g.samples]
    feats = np.stack([g.features for g in groups for _ in g.samples])
    n = len(samples)
    vocab = policy.stop + 1
    seq_of_state, prefixes, chosen = [], [], []
    for i, s in enumerate(samples):
        for j, tok in enumerate(s.tokens):
            seq_of_state.append(i)
            prefixes.append(s.tokens[:j])
            chosen.append(tok)
    n_states = len(chosen)
    seq_of_state = np.asarray(seq_of_state, dtype=np.int64)
    chosen = np.asarray(chosen, dtype=np.int64)
    state_feats = feats[seq_of_state] if n_states else np.zeros((0, N_FEATURES))
    pw = prefix_weights(prefixes, vocab)
    seg = np.zeros((n, n_states))
    seg[seq_of_state, np.arange(n_states)] = 1.0
    bits = np.array([[k in s.deg_pred for k in KINDS] for s in samples], dtype=np.float64)

    h = _handles(tape, policy)
    z = deg_logits(tape, h, feats)
    ls_pos, ls_neg = tape.log_sigmoid(z), tape.log_sigmoid(tape.scale(z, c=-1.0))
    deg_lp = tape.total(tape.add(tape.mul(bits, ls_pos), tape.mul(1.0 - bits, ls_neg)), axis=1)
    seq_lp = deg_lp
    if n_states:
        logits = plan_logits(tape, h, state_feats, pw)
        logp = tape.log_softmax(logits)
        tok_lp = tape.take(logp, index=(np.arange(n_states), chosen))
        seq_lp = tape.add(seq_lp, tape.matmul(seg, tok_lp))

    old_lp = np.array([s.total_logprob for s in samples])
    ratio = tape.exp(tape.sub(seq_lp, old_lp))
    unclipped = tape.mul(ratio, advantages)
    clipped = tape.mul(tape.clip(ratio, lo=1.0 - cfg.clip_eps, hi=1.0 + cfg.clip_eps), advantages)
    surrogate = tape.mean(tape.minimum(unclipped, clipped))

    # exact KL(pi || pi_ref) at every visited decision
    ref_vals = _handles(EVAL, ref)
    kl_sum = tape.total(tape.kl_bernoulli(z, deg_logits(EVAL, ref_vals, feats)))
    if n_states:
        ref_logp = grad.log_softmax(plan_logits(EVAL, ref_vals, state_feats, pw))
        kl_sum = tape.add(kl_sum, tape.total(tape.kl_categorical(logits, ref_logp)))
    kl = tape.scale(kl_sum, c=1.0 / (n * N_KINDS + n_states))
    loss = tape.scale(tape.sub(surrogate, tape.scale(kl, c=cfg.kl_beta)), c=-1.0)
    return loss, ratio, kl


def grpo_update(policy: PolicyParams, ref: PolicyParams, groups, cfg: GrpoConfig, optimizer: Adam) -> dict:
    """One gradient step on the clipped surrogate; returns diagnostics."""
    advantages = np.concatenate([grpo_advantages(g.totals, cfg.std_floor) for g in groups])
    params = policy.list()
    grad.zero_grad(params)
    tape = Tape()
    loss, ratio, kl = grpo_objective(tape, policy, ref, groups, cfg, advantages)
    tape.backward(loss)
    if not np.isfinite(loss.value):
        raise grad.NumericAbort("non-finite GRPO objective", {"loss": float(loss.value)})
    grad.check_finite_grads(params)
    optimizer.step(params)
    r = np.asarray(ratio.value)
    return {
        "loss": float(loss.value),
        "mean_reward": float(np.mean([t for g in groups for t in g.totals])),
        "mean_abs_adv": float(np.mean(np.abs(advantages))),
        "kl": float(kl.value),
        "clip_frac": float(np.mean((r < 1.0 - cfg.clip_eps) | (r > 1.0 + cfg.clip_eps))),
    }


# ---------------------------------------------------------------------------
# Training


@dataclass
class PromptSampler:
    """Draws (degraded, clean, ground-truth set) triples from a combination table."""

    table: ComboTable
    image_size: int = 64
    clean_kinds: tuple = ("value_noise_texture", "shapes")
    ranges: dict | None = None

    def __call__(self, rng: Prng):
        combo = sample_combo(self.table, rng)
        kind = self.clean_kinds[rng.integers(0, len(self.clean_kinds))]
        clean = gen_clean(kind, self.image_size, Prng(rng.next_u64()))
        lq, gt_set = synthesize(clean, make_spec(combo, rng, self.ranges))
        return lq, clean, gt_set


LOG_COLUMNS = ["iter", "mean_reward", "mean_rq", "mean_rd", "rf_rate", "kl", "clip_frac"]


def rollout_group(policy, registry, lq, clean, gt_set, n: int, rng: Prng, l_max: int,
                  feats: np.ndarray | None = None) -> Group:
    if feats is None:
        feats = featurize(lq)
    samples = sample_plans(policy, np.repeat(feats[None], n, axis=0), rng, l_max)
    cache: dict[tuple, float] = {}
    rewards = []
    for s in samples:
        plan = s.plan
        if plan not in cache:
            cache[plan] = quality_reward(core.evaluate(execute_plan(registry, plan, lq), clean))
        rewards.append(compute_reward(registry, lq, clean, gt_set, s, l_max, rq=cache[plan]))
    return Group(feats, samples, rewards)


def train_planner(cfg: GrpoConfig, registry: ToolRegistry, sampler: PromptSampler, progress=None):
    """GRPO training; returns the policy and one log row per iteration."""
    rng = Prng(cfg.seed)
    policy = PolicyParams.init(len(registry), Prng(derive_seed(cfg.seed, 1)), cfg.hidden, cfg.embed)
    optimizer = Adam(cfg.lr)
    log = []
    for it in range(1, cfg.iterations + 1):
        ref = policy.copy()
        groups = []
        for _ in range(cfg.batch):
            lq, clean, gt_set = sampler(rng)
            groups.append(rollout_group(policy, registry, lq, clean, gt_set, cfg.group_size, rng, cfg.l_max))
        diag = grpo_update(policy, ref, groups, cfg, optimizer)
        rewards = [r for g in groups for r in g.rewards]
        log.append({
            "iter": it,
            "mean_reward": diag["mean_reward"],
            "mean_rq": float(np.mean([r.rq for r in rewards])),
            "mean_rd": float(np.mean([r.rd for r in rewards])),
            "rf_rate": float(np.mean([r.rf for r in rewards])),
            "kl": diag["kl"],
            "clip_frac": diag["clip_frac"],
        })
        if progress:
            progress(it, log[-1])
    return policy, log


def mean_policy_reward(policy: PolicyParams, registry: ToolRegistry, sampler: PromptSampler,
                       n_rollouts: int, seed: int, l_max: int = 6) -> dict:
    """Average reward of ``n_rollouts`` sampled rollouts, one per fresh prompt."""
    rng = Prng(seed)
    rewards = []
    for _ in range(n_rollouts):
        lq, clean, gt_set = sampler(rng)
        rewards.extend(rollout_group(policy, registry, lq, clean, gt_set, 1, rng, l_max).rewards)
    return {
        "mean_reward": float(np.mean([r.total for r in rewards])),
        "mean_rq": float(np.mean([r.rq for r in rewards])),
        "mean_rd": float(np.mean([r.rd for r in rewards])),
        "rf_rate": float(np.mean([r.rf for r in rewards])),
    }


def uniform_policy(n_tools: int) -> PolicyParams:
    """All-zero parameters: uniform over tools+STOP, every degradation at 0.5."""
    return PolicyParams.zeros(n_tools)
