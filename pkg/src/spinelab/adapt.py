"""Label-free test-time adaptation: sample, vote, standardise, mask, update."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .band import band_thresholds
from .consensus import build_group
from .evaluation import evaluate_pass1
from .forks import select_forking
from .objective import NORMALIZATIONS, assemble_loss
from .optim import Adam
from .policy import DecodeConfig, TransformerPolicy, generate, save_checkpoint, score_responses
from .tasks import Prompt, TaskInstance, extract_answer
from .telemetry import (MetricsRecord, append_jsonl, rollout_records, write_metrics_csv,
                        write_timing_csv)

log = logging.getLogger(__name__)

METHODS = ("ttrl", "spine")
KL_SCOPES = ("auto", "fork", "all")


class ConfigError(ValueError):
    def __init__(self, name, message):
        self.field = name
        super().__init__(f"invalid config value for {name!r}: {message}")


@dataclass
class AdaptConfig:
    method: str = "spine"
    n_rollouts: int = 8
    temperature: float = 0.7
    top_p: float = 0.95
    max_new_tokens: int = 64
    fork_ratio: float = 0.20
    q_low: float = 0.10
    q_high: float = 0.50
    beta_low: float = 0.05
    beta_high: float = 0.05
    lambda_kl: float = 0.01
    kl_scope: str = "auto"
    clip_eps: float = 0.2
    std_eps: float = 1e-6
    loss_eps: float = 1e-6
    normalization: str = "mask"
    leave_one_out: bool = False
    optimizer: str = "adam"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 60
    prompts_per_step: int = 8
    eval_every: int = 5
    seed: int = 0
    dump_rollouts: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(self.method in METHODS, "method", f"expected one of {METHODS}")
        need(self.n_rollouts >= 2, "n_rollouts", "must be >= 2")
        need(not self.leave_one_out or self.n_rollouts >= 3, "leave_one_out",
             "needs n_rollouts >= 3")
        need(self.temperature > 0, "temperature", "sampling needs temperature > 0")
        need(0 < self.top_p <= 1, "top_p", "must lie in (0, 1]")
        need(self.max_new_tokens >= 1, "max_new_tokens", "must be >= 1")
        need(0 < self.fork_ratio <= 1, "fork_ratio", "must lie in (0, 1]")
        need(0 <= self.q_low <= self.q_high <= 1, "q_low", "need 0 <= q_low <= q_high <= 1")
        need(self.beta_low >= 0 and self.beta_high >= 0, "beta_low", "must be >= 0")
        need(self.lambda_kl >= 0, "lambda_kl", "must be >= 0")
        need(self.kl_scope in KL_SCOPES, "kl_scope", f"expected one of {KL_SCOPES}")
        need(0 < self.clip_eps < 1, "clip_eps", "must lie in (0, 1)")
        need(self.std_eps > 0 and self.loss_eps > 0, "std_eps", "must be > 0")
        need(self.normalization in NORMALIZATIONS, "normalization",
             f"expected one of {NORMALIZATIONS}")
        need(self.optimizer == "adam", "optimizer", "only 'adam' is available")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "adam_beta1",
             "moment coefficients must lie in [0, 1)")
        need(self.steps >= 0, "steps", "must be >= 0")
        need(self.prompts_per_step >= 1, "prompts_per_step", "must be >= 1")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")

    # method-resolved switches
    @property
    def uses_fork_mask(self):
        return self.method == "spine"

    @property
    def uses_band(self):
        return self.method == "spine" and (self.beta_low > 0 or self.beta_high > 0)

    @property
    def kl_masked(self):
        if self.kl_scope == "auto":
            return self.method == "spine"
        return self.kl_scope == "fork"

    def decode_config(self):
        return DecodeConfig(self.temperature, self.top_p, self.max_new_tokens, seed=self.seed)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return AdaptConfig(**d)


def _coerce(tp, raw, name):
    raw = raw.strip()
    try:
        if tp in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp in (int, "int"):
            return int(raw)
        if tp in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {tp}") from None
    return raw


FIELD_TYPES = {f.name: f.type for f in fields(AdaptConfig)}


def parse_config_text(text):
    """Flat ``key = value`` lines (``#`` comments) into a dict of typed values."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(key, "unknown config key")
        out[key] = _coerce(FIELD_TYPES[key], value, key)
    return out


def config_text(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(AdaptConfig))


def coerce_value(name, raw):
    if name not in FIELD_TYPES:
        raise ConfigError(name, "unknown config key")
    return _coerce(FIELD_TYPES[name], str(raw), name)


@dataclass
class PolicySnapshot:
    """Frozen copy of the policy serving as behaviour or reference policy."""
    policy: TransformerPolicy
    tag: str
    step_created: int

    @classmethod
    def of(cls, policy, tag, step):
        return cls(policy.copy(), tag, step)

    def digest(self):
        return self.policy.digest()


@dataclass
class AdaptState:
    policy: TransformerPolicy
    optimizer: Adam
    reference: PolicySnapshot
    behavior: PolicySnapshot | None = None
    step: int = 0
    sample_rng: np.random.Generator = None
    order_rng: np.random.Generator = None
    order: list = field(default_factory=list)
    cursor: int = 0


def init_state(policy, cfg):
    return AdaptState(
        policy=policy,
        optimizer=Adam(policy.parameters(), cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps),
        reference=PolicySnapshot.of(policy, "reference", 0),
        sample_rng=np.random.default_rng([cfg.seed, 1]),
        order_rng=np.random.default_rng([cfg.seed, 2]),
    )


def next_batch(state, prompts, k):
    """Cycle through ``prompts`` in reshuffled epochs."""
    out = []
    while len(out) < k:
        if state.cursor >= len(state.order):
            state.order = list(state.order_rng.permutation(len(prompts)))
            state.cursor = 0
        out.append(prompts[state.order[state.cursor]])
        state.cursor += 1
    return out


def _as_prompts(items):
    out = []
    for i, x in enumerate(items):
        if isinstance(x, Prompt):
            out.append(x)
        elif isinstance(x, TaskInstance):
            out.append(x.unlabeled())
        else:
            out.append(Prompt(f"p{i:05d}", tuple(int(t) for t in x)))
    return out


@dataclass
class StepResult:
    record: MetricsRecord
    groups: list
    updated: bool
    max_ratio_deviation: float
    bands: list


def sample_groups(policy, prompts, cfg, rng):
    """Steps (i)-(iii): N rollouts per prompt, votes, rewards, advantages."""
    batch = [p.prompt_tokens for p in prompts for _ in range(cfg.n_rollouts)]
    rollouts = generate(policy, batch, cfg.decode_config(), rng)
    groups = []
    for j, p in enumerate(prompts):
        rs = rollouts[j * cfg.n_rollouts:(j + 1) * cfg.n_rollouts]
        answers = [extract_answer(r) for r in rs]
        for r, a in zip(rs, answers):
            r.answer = a
        groups.append(build_group(p.id, rs, answers, cfg.leave_one_out, cfg.std_eps))
    return groups


def adapt_step(state, prompts, cfg):
    """One outer step of the update loop on a batch of unlabeled prompts.

    Numeric failures anywhere in the step surface as :class:`NumericError`
    naming the step index.
    """
    try:
        return _adapt_step(state, prompts, cfg)
    except T.TensorError as exc:
        raise T.NumericError(f"adapt step {state.step}", str(exc)) from exc


def _adapt_step(state, prompts, cfg):
    t0 = time.perf_counter()
    prompts = _as_prompts(prompts)
    state.behavior = PolicySnapshot.of(state.policy, "behavior", state.step)
    groups = sample_groups(state.behavior.policy, prompts, cfg, state.sample_rng)
    rollouts = [r for g in groups for r in g.rollouts]
    advantages = np.concatenate([g.advantages for g in groups])

    # step (iv): masks and bands from the sampling-time entropies
    bands = []
    for i, r in enumerate(rollouts):
        if cfg.uses_fork_mask:
            r.fork_mask = select_forking(r.entropies, cfg.fork_ratio).mask
        else:
            r.fork_mask = np.ones(len(r), dtype=bool)
        bands.append(band_thresholds(r.entropies[r.fork_mask], cfg.q_low, cfg.q_high, i))

    if all(g.consensus is None for g in groups):
        log.warning("step %d: no valid consensus in any group", state.step)
    signal = bool(np.any(advantages != 0)) or cfg.lambda_kl > 0 or cfg.uses_band

    ref_logp = None
    if cfg.lambda_kl > 0:
        with T.no_grad():
            ref_logp = score_responses(state.reference.policy,
                                       [r.prompt_tokens for r in rollouts],
                                       [r.response_tokens for r in rollouts])["logp_all"].data

    # step (v): a single gradient step on the full loss
    with T.fresh_tape():
        lb = assemble_loss(state.policy, rollouts, advantages,
                           [r.fork_mask for r in rollouts],
                           bands if cfg.uses_band else None,
                           clip_eps=cfg.clip_eps, lambda_kl=cfg.lambda_kl,
                           ref_logp=ref_logp, kl_masked=cfg.kl_masked,
                           beta_low=cfg.beta_low, beta_high=cfg.beta_high,
                           eps=cfg.loss_eps, normalization=cfg.normalization)
        state.optimizer.zero_grad()
        if signal:
            T.backward(lb.total)
    if signal:
        state.optimizer.step()

    lengths = np.array([len(r) for r in rollouts])
    ent = np.concatenate([r.entropies for r in rollouts])
    rewards = np.concatenate([g.rewards for g in groups])
    dev = max(abs(lb.ratio_max - 1.0), abs(lb.ratio_min - 1.0))
    rec = MetricsRecord(
        step=state.step, method=cfg.method, seed=cfg.seed, updated=int(signal),
        mean_vote_reward=float(rewards.mean()),
        consensus_rate=float(np.mean([g.consensus is not None for g in groups])),
        mean_response_length=float(lengths.mean()),
        mean_token_entropy=float(ent.mean()), pass_at_1=None,
        loss_total=float(lb.total.item()), ppo_term=lb.ppo_term, kl_term=lb.kl_term,
        band_term=lb.band_term, mask_count=lb.mask_count, ratio_mean=lb.ratio_mean,
        ratio_min=lb.ratio_min, ratio_max=lb.ratio_max, clip_fraction=lb.clip_fraction,
        fork_mask_density=float(lb.mask_count / lengths.sum()),
        band_violation_rate=lb.band_violation_rate,
        wall_clock_s=time.perf_counter() - t0)
    state.step += 1
    return StepResult(rec, groups, signal, dev, bands)


def _final_record(state, prompts, cfg, pass_at_1):
    """Sampling-only statistics of the final policy (no update)."""
    groups = sample_groups(state.policy, _as_prompts(prompts), cfg, state.sample_rng)
    rollouts = [r for g in groups for r in g.rollouts]
    lengths = np.array([len(r) for r in rollouts])
    if cfg.uses_fork_mask:
        selected = sum(select_forking(r.entropies, cfg.fork_ratio).k_selected for r in rollouts)
    else:
        selected = int(lengths.sum())
    return MetricsRecord(
        step=state.step, method=cfg.method, seed=cfg.seed, updated=0,
        mean_vote_reward=float(np.concatenate([g.rewards for g in groups]).mean()),
        consensus_rate=float(np.mean([g.consensus is not None for g in groups])),
        mean_response_length=float(lengths.mean()),
        mean_token_entropy=float(np.concatenate([r.entropies for r in rollouts]).mean()),
        pass_at_1=pass_at_1, loss_total=0.0, ppo_term=0.0, kl_term=0.0, band_term=0.0,
        mask_count=0, ratio_mean=1.0, ratio_min=1.0, ratio_max=1.0, clip_fraction=0.0,
        fork_mask_density=float(selected / lengths.sum()), band_violation_rate=0.0)


def run_adaptation(cfg, prompts, policy, eval_instances=None, out_dir=None):
    """Run ``cfg.steps`` adaptation steps and return ``(policy, records)``.

    ``policy`` is adapted in place. Pass@1 on ``eval_instances`` (greedy) is
    measured before step 0, every ``cfg.eval_every`` steps, and once after the
    last update in a trailing evaluation-only record. When ``out_dir`` is
    given the run directory receives ``config.txt``, ``metrics.csv``,
    ``timing.csv``, ``rollouts.jsonl``, ``final.npz`` and ``summary.json``.
    """
    prompts = _as_prompts(prompts)
    if not prompts:
        raise ValueError("adaptation split is empty")
    if len({p.id for p in prompts}) != len(prompts):
        prompts = [Prompt(f"{p.id}#{i}", p.prompt_tokens) for i, p in enumerate(prompts)]
    state = init_state(policy, cfg)
    ref_digest = state.reference.digest()
    records = []
    dump = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(config_text(cfg))
        if cfg.dump_rollouts:
            dump = open(os.path.join(out_dir, "rollouts.jsonl"), "w", encoding="utf-8", newline="\n")

    def evaluate():
        if eval_instances is None:
            return None
        return evaluate_pass1(state.policy, eval_instances, cfg.max_new_tokens)

    try:
        for s in range(cfg.steps):
            pass1 = evaluate() if s % cfg.eval_every == 0 else None
            batch = next_batch(state, prompts, cfg.prompts_per_step)
            res = adapt_step(state, batch, cfg)
            res.record.pass_at_1 = pass1
            records.append(res.record)
            if dump is not None:
                append_jsonl(rollout_records(s, res.groups, res.bands), dump)
            if out_dir is not None:
                write_metrics_csv(records, os.path.join(out_dir, "metrics.csv"))
            log.info("[%s] step %d reward %.3f len %.2f ent %.3f pass@1 %s", cfg.method, s,
                     res.record.mean_vote_reward, res.record.mean_response_length,
                     res.record.mean_token_entropy, pass1)
        final_batch = next_batch(state, prompts, cfg.prompts_per_step)
        records.append(_final_record(state, final_batch, cfg, evaluate()))
    finally:
        if dump is not None:
            dump.close()
    if state.reference.digest() != ref_digest:
        raise AssertionError("reference policy changed during adaptation")
    if out_dir is not None:
        write_metrics_csv(records, os.path.join(out_dir, "metrics.csv"))
        write_timing_csv(records, os.path.join(out_dir, "timing.csv"))
        save_checkpoint(state.policy, os.path.join(out_dir, "final.npz"),
                        extra={"method": cfg.method, "steps": cfg.steps, "seed": cfg.seed})
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"method": cfg.method, "seed": cfg.seed, "steps": cfg.steps,
                       "initial_pass_at_1": records[0].pass_at_1,
                       "final_pass_at_1": records[-1].pass_at_1,
                       "reference_digest": ref_digest}, fh, indent=2, sort_keys=True)
    return state.policy, records
