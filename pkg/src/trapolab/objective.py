"""Token-level SFT and trust-region SFT gradients.

Both are written as a per-token weight times the gradient of the token
probability: ``1/p`` for SFT and ``1/max(p, alpha)`` for the trust-region
variant.  The same gradient is the exact gradient of the surrogate loss
``ell_alpha(p)`` summed over masked tokens, which is what the
finite-difference tests exercise.  The normaliser is the number of
sequences in the batch; token counts never divide the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from trapolab.dist import ell_alpha
from trapolab.errors import DomainError, EmptyBatch
from trapolab.policy import Gradient


class MaskedSequence(NamedTuple):
    prompt: tuple
    tokens: tuple
    mask: np.ndarray


def sft_token_weight(p: float) -> float:
    if not 0.0 < p <= 1.0:
        raise DomainError(f"token probability must lie in (0, 1], got {p}")
    return 1.0 / p


def trsft_token_weight(p: float, alpha: float) -> float:
    if not 0.0 <= p <= 1.0 or not 0.0 <= alpha <= 1.0:
        raise DomainError(f"need p, alpha in [0, 1], got p={p}, alpha={alpha}")
    if p == 0.0 and alpha == 0.0:
        raise DomainError("weight is unbounded when p = alpha = 0")
    return 1.0 / max(p, alpha)


@dataclass(frozen=True)
class TokenLossTerm:
    token_prob: float
    weight: float
    surrogate_loss: float


def token_term(p: float, alpha: float) -> TokenLossTerm:
    loss = ell_alpha(p, alpha) if alpha > 0 else -math.log(p)
    return TokenLossTerm(p, trsft_token_weight(p, alpha), loss)


def _check_batch(batch: Sequence[MaskedSequence]) -> None:
    if not batch or not any(np.any(np.asarray(s.mask) != 0) for s in batch):
        raise EmptyBatch("no masked token in the batch")


def trsft_gradient(policy, batch: Sequence[MaskedSequence], alpha: float) -> Gradient:
    """Loss gradient ``-(1/N) sum mask * grad p / max(p, alpha)``.

    ``alpha = 0`` runs the identical code path with weight ``1/p``, so the
    result is bit-for-bit the SFT gradient.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    _check_batch(batch)
    total = Gradient()
    scale = -1.0 / len(batch)
    for seq in batch:
        mask = np.asarray(seq.mask, dtype=float)
        p = policy.token_probs(seq.prompt, seq.tokens)
        weights = mask / np.maximum(p, alpha)
        total.add(policy.prob_gradient(seq.prompt, seq.tokens, weights), scale)
    return total


def sft_gradient(policy, batch: Sequence[MaskedSequence]) -> Gradient:
    return trsft_gradient(policy, batch, 0.0)


def surrogate_loss(policy, batch: Sequence[MaskedSequence], alpha: float) -> float:
    """``(1/N) sum mask * ell_alpha(p)``; plain NLL when ``alpha == 0``."""
    _check_batch(batch)
    total = 0.0
    for seq in batch:
        p = policy.token_probs(seq.prompt, seq.tokens)
        for pn, mn in zip(p, np.asarray(seq.mask, dtype=float)):
            if mn:
                total += mn * (ell_alpha(float(pn), alpha) if alpha > 0 else -math.log(pn))
    return total / len(batch)


# -- SFT versus token-level forward KL -----------------------------------------
#
# Two independent routes to the gradient of the expected expert NLL on a
# policy small enough to enumerate every trajectory.

def enumerate_trajectories(policy, prompt=(), max_len: int = 3):
    """All responses up to ``max_len`` tokens with their probabilities.

    A response ends at the end token or after ``max_len`` tokens.
    """
    eos = policy.vocab.eos_id
    out = []

    def rec(tokens, prob):
        if (tokens and tokens[-1] == eos) or len(tokens) == max_len:
            out.append((tuple(tokens), prob))
            return
        key = policy.context_keys(prompt, tokens)[-1]
        probs = policy.probs(key)
        for t in range(policy.vocab.size):
            if probs[t] > 0:
                rec(tokens + [t], prob * probs[t])

    rec([], 1.0)
    return out


def expected_nll_gradient(expert, target, prompt=(), max_len: int = 3) -> Gradient:
    """Exact ``E_{y ~ expert}[grad -log target(y)]``."""
    total = Gradient()
    for tokens, prob in enumerate_trajectories(expert, prompt, max_len):
        total.add(target.logprob_gradient(prompt, tokens, np.ones(len(tokens))), -prob)
    return total


def expected_forward_kl_gradient(expert, target, prompt=(), max_len: int = 3) -> Gradient:
    """Exact gradient of ``E_y[sum_n KL(expert(.|y<n) || target(.|y<n))]``.

    Per visited context the KL gradient with respect to the target logits
    row is ``target_probs - expert_probs``; it is weighted by the
    probability that the expert reaches that context.
    """
    total = Gradient()
    for tokens, prob in enumerate_trajectories(expert, prompt, max_len):
        e_keys = expert.context_keys(prompt, tokens)
        t_keys = target.context_keys(prompt, tokens)
        for n in range(len(tokens)):
            total.accumulate(t_keys[n], target.probs(t_keys[n]) - expert.probs(e_keys[n]), prob)
    return total
