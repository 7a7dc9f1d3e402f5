"""Group-relative advantages (Dr.GRPO flavour) and the on-policy RL gradient.

Advantages are rewards minus the group mean: no division by the group
standard deviation, no length normalisation.  With one update per rollout
batch the sampling and updated policies coincide, so there is no ratio
clipping and no KL penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from trapolab.errors import MissingAdvantages
from trapolab.policy import Gradient, Trajectory


def advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("need at least one reward")
    return r - r.mean()


@dataclass
class RolloutGroup:
    task: object
    trajectories: list
    advantages: np.ndarray | None = None
    decisions: list = field(default_factory=list)

    def __post_init__(self):
        if self.advantages is not None and len(self.advantages) != len(self.trajectories):
            raise ValueError("advantages must align with trajectories")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=float)

    def compute_advantages(self) -> np.ndarray:
        self.advantages = advantages(self.rewards)
        return self.advantages

    def __len__(self):
        return len(self.trajectories)


def rl_gradient(policy, group: RolloutGroup) -> Gradient:
    """Policy-gradient (ascent) direction ``sum_i A_i grad log pi(generated_i)``.

    Expert-prefix tokens are masked out.  The loss gradient used by a
    descent step is the negation of this.
    """
    if group.advantages is None:
        raise MissingAdvantages("compute advantages before the RL gradient")
    total = Gradient()
    for traj, adv in zip(group.trajectories, group.advantages):
        if adv == 0.0 or traj.generated_len == 0:
            continue
        total.add(policy.logprob_gradient(traj.prompt, traj.tokens, traj.generated_mask()), float(adv))
    return total


def rl_surrogate(policy, group: RolloutGroup) -> float:
    """``sum_i A_i * logprob(generated_i)`` with advantages held fixed."""
    if group.advantages is None:
        raise MissingAdvantages("compute advantages before the RL surrogate")
    return float(sum(
        adv * policy.sequence_logprob(t.prompt, t.tokens, start=t.guided_prefix_len)
        for t, adv in zip(group.trajectories, group.advantages)
    ))


def make_group(task, trajectories: Sequence[Trajectory]) -> RolloutGroup:
    g = RolloutGroup(task, list(trajectories))
    g.compute_advantages()
    return g
