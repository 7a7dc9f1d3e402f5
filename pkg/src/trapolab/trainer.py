"""Training loop for every regime plus the pass@k evaluator.

Rollout work for the prompts of one batch is independent: each prompt gets
its own random stream derived from ``(seed, step, slot)``, so results do
not depend on how prompts are scheduled across workers.  Inside a prompt
the micro-groups run sequentially (see :mod:`trapolab.microgroup`).  The
optimizer step is exclusive and gradients are reduced in batch order, so a
run is bit-for-bit reproducible regardless of ``workers``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from trapolab.env import FamilyParams, Task, generate_tasks, verify
from trapolab.errors import ConfigError, DivergenceDetected, DomainError
from trapolab.grpo import rl_gradient
from trapolab.microgroup import MicroGroupSpec, run_prompt, sample_group
from trapolab.objective import MaskedSequence, trsft_gradient
from trapolab.policy import ContextSoftmaxPolicy, Gradient, Trajectory

REGIMES = ("trapo", "grpo_only", "sft_only", "sft_then_rl", "microgroup_only", "microgroup_plus_sft")
MICRO_REGIMES = ("trapo", "microgroup_only", "microgroup_plus_sft")

# stream tags for SeedSequence so independent consumers never share draws
_ORDER, _ROLLOUT, _WARM, _EVAL = 0, 1, 2, 3

METRIC_FIELDS = ("step", "phase", "reward", "length", "n_unguided", "entropy",
                 "guided_fraction", "trsft_norm", "rl_norm", "eval_reward")


@dataclass
class TrainRunConfig:
    regime: str = "trapo"
    tasks: Sequence[Task] = ()
    family: FamilyParams = field(default_factory=FamilyParams)
    steps: int = 200
    batch_size: int = 16
    group_size: int = 8
    lr: float = 0.5
    alpha: float = 0.1
    trsft_scale: float = 1.0
    micro: MicroGroupSpec = field(default_factory=MicroGroupSpec.default)
    sft_fraction: float = 0.5
    context_order: int = 2
    align_prompt: bool = True
    warmstart_steps: int = 800
    warmstart_ops: tuple = ("+",)
    warmstart_lr: float = 2.0
    warmstart_batch: int = 16
    warmstart_tasks: int = 200
    max_len: int = 32
    temperature: float = 1.0
    eval_temperature: float = 0.6
    seed: int = 0
    metrics_every: int = 1
    eval_every: int = 0
    eval_rollouts: int = 4
    checkpoint_every: int = 0
    workers: int = 1

    def validate(self) -> "TrainRunConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not self.tasks:
            raise ConfigError("task set is empty")
        for name in ("steps", "batch_size", "group_size", "max_len", "metrics_every", "eval_rollouts", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("warmstart_steps", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("trsft.alpha must lie in [0, 1]")
        if not 0.0 <= self.sft_fraction <= 1.0:
            raise ConfigError("sft_fraction must lie in [0, 1]")
        if self.temperature <= 0 or self.eval_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if self.regime in MICRO_REGIMES:
            self.micro.validate()
            if self.micro.group_size != self.group_size:
                raise ConfigError(f"micro.n sums to {self.micro.group_size} but group size is {self.group_size}")
        return self


@dataclass
class MetricsRecord:
    step: int
    phase: str
    reward: float | None
    length: float | None
    n_unguided: int
    entropy: float | None
    guided_fraction: float
    trsft_norm: float
    rl_norm: float
    eval_reward: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in METRIC_FIELDS})

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        return cls(**{k: d.get(k) for k in METRIC_FIELDS})


@dataclass
class TrainResult:
    policy: ContextSoftmaxPolicy
    metrics: list
    initial_policy: ContextSoftmaxPolicy
    final_reward: float


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


# -- initial policy --------------------------------------------------------

def initial_policy(cfg: TrainRunConfig) -> ContextSoftmaxPolicy:
    """Warm-started policy: plain SFT on short tasks that only use
    ``warmstart_ops``.  Contexts involving the other operations stay at
    zero logits (uniform), which is what makes those tasks unreachable."""
    vocab = cfg.family.vocab()
    policy = ContextSoftmaxPolicy(vocab, cfg.context_order, cfg.align_prompt)
    if cfg.warmstart_steps == 0:
        return policy
    fam = FamilyParams(cfg.family.modulus, tuple(cfg.warmstart_ops), cfg.family.min_len,
                       cfg.family.max_len, 0.0, cfg.family.hard_min_len, cfg.family.hard_max_len)
    pool = generate_tasks(fam, cfg.warmstart_tasks, seed=cfg.seed)
    rng = _rng(cfg.seed, _WARM)
    for _ in range(cfg.warmstart_steps):
        idx = rng.integers(len(pool), size=cfg.warmstart_batch)
        batch = [_expert_sequence(pool[i], int(rng.integers(2))) for i in idx]
        policy.update(trsft_gradient(policy, batch, 0.0), cfg.warmstart_lr)
    return policy


def _expert_sequence(task: Task, which: int) -> MaskedSequence:
    y = task.expert_trajectories[which]
    return MaskedSequence(task.prompt, y, np.ones(len(y)))


# -- one step ---------------------------------------------------------------

def _rollouts(policy, cfg: TrainRunConfig, batch: Sequence[Task], step: int, micro: bool, pool):
    def one(slot):
        rng = _rng(cfg.seed, _ROLLOUT, step, slot)
        task = batch[slot]
        if micro:
            return run_prompt(policy, task, cfg.micro, rng, max_len=cfg.max_len, temperature=cfg.temperature)
        return sample_group(policy, task, cfg.group_size, rng, max_len=cfg.max_len, temperature=cfg.temperature)

    slots = range(len(batch))
    return list(pool.map(one, slots)) if pool is not None else [one(s) for s in slots]


def _rollout_metrics(policy, groups) -> dict:
    trajs = [t for g in groups for t in g.trajectories]
    unguided = [t for t in trajs if not t.guided]
    generated = [t for t in trajs if t.generated_len > 0]
    return {
        "reward": float(np.mean([t.reward for t in unguided])) if unguided else None,
        "length": float(np.mean([t.generated_len for t in unguided])) if unguided else None,
        "n_unguided": len(unguided),
        "entropy": policy.mean_entropy(generated) if generated else None,
        "guided_fraction": (len(trajs) - len(unguided)) / len(trajs),
    }


def rl_batch_gradient(policy, groups) -> Gradient:
    """Ascent direction summed over groups and divided by the batch size."""
    total = Gradient()
    for g in groups:
        total.add(rl_gradient(policy, g))
    return total.scaled(1.0 / len(groups))


def guided_trsft_gradient(policy, groups, alpha: float) -> Gradient:
    """Trust-region SFT loss gradient on guided prefix tokens only."""
    batch = [MaskedSequence(t.prompt, t.tokens, t.prefix_mask())
             for g in groups for t in g.trajectories if t.guided]
    if not batch:
        return Gradient()
    return trsft_gradient(policy, batch, alpha)


def phase_of(cfg: TrainRunConfig, step: int) -> str:
    if cfg.regime == "sft_only":
        return "sft"
    if cfg.regime == "sft_then_rl":
        return "sft" if step < int(round(cfg.sft_fraction * cfg.steps)) else "rl"
    if cfg.regime == "grpo_only":
        return "rl"
    return "micro"


def train(cfg: TrainRunConfig, metrics_sink: Callable[[MetricsRecord], None] | None = None,
          group_sink: Callable[[int, list], None] | None = None,
          checkpoint_sink: Callable[[int, ContextSoftmaxPolicy], None] | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps and a final unguided evaluation.

    Sinks receive each metrics record, each step's rollout groups and the
    policy every ``checkpoint_every`` steps (counted after the update).
    """
    cfg.validate()
    tasks = list(cfg.tasks)
    policy = initial_policy(cfg)
    start = policy.copy()
    order_rng = _rng(cfg.seed, _ORDER)
    perm, cursor = order_rng.permutation(len(tasks)), 0
    metrics = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for step in range(cfg.steps):
            idx = []
            while len(idx) < cfg.batch_size:
                if cursor == len(perm):
                    perm, cursor = order_rng.permutation(len(tasks)), 0
                idx.append(int(perm[cursor]))
                cursor += 1
            batch = [tasks[i] for i in idx]
            phase = phase_of(cfg, step)

            trsft, rl = Gradient(), Gradient()
            if phase == "sft":
                seqs = [_expert_sequence(t, j) for t in batch for j in range(len(t.expert_trajectories))]
                trsft = trsft_gradient(policy, seqs, 0.0)
                m = {"reward": None, "length": None, "n_unguided": 0,
                     "entropy": policy.mean_entropy([_as_traj(s) for s in seqs]), "guided_fraction": 0.0}
            else:
                groups = _rollouts(policy, cfg, batch, step, phase == "micro", pool)
                m = _rollout_metrics(policy, groups)
                rl = rl_batch_gradient(policy, groups)
                if cfg.regime == "trapo":
                    trsft = guided_trsft_gradient(policy, groups, cfg.alpha).scaled(cfg.trsft_scale)
                elif cfg.regime == "microgroup_plus_sft":
                    trsft = guided_trsft_gradient(policy, groups, 0.0).scaled(cfg.trsft_scale)
                if group_sink is not None:
                    group_sink(step, groups)

            trsft_norm, rl_norm = trsft.norm(), rl.norm()
            # descent on the loss: TrSFT loss gradient minus the RL ascent direction
            grad = Gradient().add(trsft).add(rl, -1.0)
            policy.update(grad, cfg.lr)
            if not policy.all_finite():
                raise DivergenceDetected(f"non-finite logits after step {step}", step)

            if checkpoint_sink is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint_sink(step + 1, policy)
            eval_reward = None
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                eval_reward = evaluate(policy, tasks, cfg, tag=step + 1)
            if step % cfg.metrics_every == 0 or step == cfg.steps - 1:
                rec = MetricsRecord(step, phase, trsft_norm=trsft_norm, rl_norm=rl_norm,
                                    eval_reward=eval_reward, **m)
                metrics.append(rec)
                if metrics_sink is not None:
                    metrics_sink(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    final = evaluate(policy, tasks, cfg, tag=cfg.steps)
    return TrainResult(policy, metrics, start, final)


def _as_traj(seq: MaskedSequence) -> Trajectory:
    return Trajectory(seq.prompt, seq.tokens)


# -- evaluation --------------------------------------------------------------

def evaluate(policy, tasks: Sequence[Task], cfg: TrainRunConfig, tag: int = 0, rollouts: int | None = None) -> float:
    """Mean reward of unguided rollouts over the whole task set, sampled at
    the evaluation temperature."""
    n = cfg.eval_rollouts if rollouts is None else rollouts
    total = 0.0
    for i, task in enumerate(tasks):
        rng = _rng(cfg.seed, _EVAL, tag, i)
        for _ in range(n):
            traj = policy.sample(task.prompt, (), max_len=cfg.max_len, temperature=cfg.eval_temperature, rng=rng)
            total += verify(traj, task)
    return total / (n * len(tasks))


def pass_at_k_estimate(n: int, c: int, k: int) -> Fraction:
    """Unbiased ``1 - C(n-c, k) / C(n, k)`` as an exact fraction."""
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= c <= n:
        raise DomainError(f"need 0 <= c <= n, got c={c}, n={n}")
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(policy, tasks: Sequence[Task], k: int, n: int, temperature: float = 0.6,
              seed: int = 0, max_len: int = 32) -> float:
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    total = Fraction(0)
    for i, task in enumerate(tasks):
        rng = _rng(seed, _EVAL, i)
        c = sum(verify(policy.sample(task.prompt, (), max_len=max_len, temperature=temperature, rng=rng), task)
                for _ in range(n))
        total += pass_at_k_estimate(n, c, k)
    return float(total / len(tasks))
