"""Micro-group sampling with pass-rate-gated expert prefixes.

Micro-groups for one prompt run strictly in order, because each gate reads
the pass rate of every sample collected so far for that prompt.  Different
prompts are independent and may be processed concurrently as long as each
gets its own random stream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

from trapolab.env import Task, prefix_at_ratio, verify
from trapolab.errors import SpecInvalid
from trapolab.grpo import RolloutGroup
from trapolab.policy import Trajectory


class SpecWarning(UserWarning):
    """A micro-group spec breaks a design heuristic but is still runnable."""


@dataclass(frozen=True)
class MicroGroupSpec:
    n: tuple
    L: tuple
    t: tuple

    @classmethod
    def default(cls) -> "MicroGroupSpec":
        return cls((4, 2, 1, 1), (0.0, 0.2, 0.5, 1.0), (-1.0, 0.5, 0.7, 0.9))

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(x) for x in self.n))
        object.__setattr__(self, "L", tuple(float(x) for x in self.L))
        object.__setattr__(self, "t", tuple(float(x) for x in self.t))

    @property
    def group_size(self) -> int:
        return sum(self.n)

    def __len__(self):
        return len(self.n)

    def validate(self) -> "MicroGroupSpec":
        n, L, t = self.n, self.L, self.t
        if not (len(n) == len(L) == len(t)) or not n:
            raise SpecInvalid("micro.n, micro.L and micro.t must be non-empty and aligned")
        if any(x < 1 for x in n):
            raise SpecInvalid(f"every sampling budget must be >= 1: {n}")
        if any(not 0.0 <= x <= 1.0 for x in L):
            raise SpecInvalid(f"prefix ratios must lie in [0, 1]: {L}")
        if any(not -1.0 <= x <= 1.0 for x in t):
            raise SpecInvalid(f"thresholds must lie in [-1, 1]: {t}")
        if L[0] != 0.0 or L[-1] != 1.0:
            raise SpecInvalid(f"prefix ratios must start at 0 and end at 1: {L}")
        if any(b <= a for a, b in zip(L, L[1:])):
            raise SpecInvalid(f"prefix ratios must be strictly increasing: {L}")
        if any(b < a for a, b in zip(t, t[1:])):
            warnings.warn(f"thresholds {t} are not non-decreasing; longer prefixes "
                          "usually earn higher reward, so later gates should be laxer", SpecWarning)
        if n[0] * 4 < self.group_size:
            warnings.warn(f"first micro-group ({n[0]} of {self.group_size}) is small; "
                          "unguided exploration gets starved", SpecWarning)
        if not any(0.0 < x < 1.0 for x in L):
            warnings.warn("no micro-group gives partial guidance between none and the full "
                          "expert trajectory", SpecWarning)
        return self


@dataclass(frozen=True)
class GuidanceDecision:
    group: int
    pass_rate: float
    threshold: float
    guided: bool
    ratio: float
    expert_index: int | None
    prefix_len: int


def pass_rate(samples: Sequence[Trajectory], task: Task, verifier: Callable = verify) -> float:
    return sum(verifier(s, task) for s in samples) / max(1, len(samples))


def run_prompt(
    policy,
    task: Task,
    spec: MicroGroupSpec,
    rng,
    *,
    max_len: int = 32,
    temperature: float = 1.0,
    verifier: Callable = verify,
) -> RolloutGroup:
    """Roll out every micro-group for one prompt and return the pooled group.

    Before group ``i`` the pass rate over all earlier samples is compared
    with ``t_i``; ``pass_rate <= t_i`` injects a prefix of ratio ``L_i`` from
    an expert trajectory drawn uniformly at random (independently per group).
    """
    spec.validate()
    if not task.expert_trajectories:
        raise SpecInvalid("task has no expert trajectory to draw prefixes from")
    delim = policy.vocab.step_id
    samples: list = []
    decisions = []
    for i, (n_i, L_i, t_i) in enumerate(zip(spec.n, spec.L, spec.t)):
        pr = pass_rate(samples, task, verifier)
        guided = pr <= t_i
        prefix, expert_idx = (), None
        if guided:
            expert_idx = int(rng.integers(len(task.expert_trajectories)))
            prefix = prefix_at_ratio(task.expert_trajectories[expert_idx], L_i, delim)
        decisions.append(GuidanceDecision(i, pr, t_i, guided, L_i if guided else 0.0,
                                          expert_idx, len(prefix)))
        for _ in range(n_i):
            traj = policy.sample(task.prompt, prefix, max_len=max(max_len, len(prefix)),
                                 temperature=temperature, rng=rng)
            traj.expert_index = expert_idx
            traj.meta["micro_group"] = i
            traj.reward = float(verifier(traj, task))
            samples.append(traj)
    group = RolloutGroup(task, samples, decisions=decisions)
    group.compute_advantages()
    return group


def sample_group(policy, task: Task, size: int, rng, *, max_len: int = 32,
                 temperature: float = 1.0, verifier: Callable = verify) -> RolloutGroup:
    """``size`` unguided rollouts for one prompt (plain GRPO group)."""
    samples = []
    for _ in range(size):
        traj = policy.sample(task.prompt, (), max_len=max_len, temperature=temperature, rng=rng)
        traj.reward = float(verifier(traj, task))
        samples.append(traj)
    group = RolloutGroup(task, samples)
    group.compute_advantages()
    return group
