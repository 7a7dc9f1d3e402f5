"""Categorical distributions on a finite alphabet and the divergences used to
compare an expert distribution with a target one.

Probabilities are kept in linear space.  Zero entries are legal and handled
explicitly, which matters for the pruned optima produced by
:mod:`trapolab.fixed_point`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from trapolab.errors import AlphabetMismatch, DomainError, SupportMismatch

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Categorical:
    """Probability vector over symbols ``0 .. size-1``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).reshape(-1)
        if p.size < 1:
            raise DomainError("alphabet must contain at least one symbol")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise DomainError(f"probabilities must be finite and non-negative: {p}")
        if abs(p.sum() - 1.0) > SIMPLEX_TOL:
            raise DomainError(f"probabilities sum to {p.sum():.12g}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_weights(cls, weights, renormalize: bool = True) -> "Categorical":
        w = np.asarray(weights, dtype=float)
        if renormalize:
            total = w.sum()
            if not total > 0:
                raise DomainError("weights must have positive total mass")
            w = w / total
        return cls(w)

    @classmethod
    def uniform(cls, size: int) -> "Categorical":
        return cls(np.full(size, 1.0 / size))

    @property
    def size(self) -> int:
        return self.probs.size

    @property
    def support(self) -> frozenset:
        return frozenset(int(i) for i in np.flatnonzero(self.probs > 0))

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, Categorical) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __repr__(self):
        return f"Categorical({np.array2string(self.probs, precision=6)})"


DistLike = Union[Categorical, Iterable[float], np.ndarray]


def as_categorical(p: DistLike) -> Categorical:
    return p if isinstance(p, Categorical) else Categorical(np.asarray(p, dtype=float))


def _pair(p: DistLike, q: DistLike):
    p, q = as_categorical(p), as_categorical(q)
    if p.size != q.size:
        raise AlphabetMismatch(f"alphabet sizes differ: {p.size} vs {q.size}")
    return p.probs, q.probs


def forward_kl(p: DistLike, q: DistLike) -> float:
    """KL(p || q), the mode-covering direction when p is the expert."""
    pp, qq = _pair(p, q)
    on = pp > 0
    if np.any(qq[on] == 0):
        bad = np.flatnonzero(on & (qq == 0)).tolist()
        raise SupportMismatch(f"p has mass on symbols {bad} where q is zero")
    return float(np.sum(pp[on] * (np.log(pp[on]) - np.log(qq[on]))))


def reverse_kl(p: DistLike, q: DistLike) -> float:
    """KL(q || p): the mode-seeking direction when p is the expert."""
    return forward_kl(q, p)


def cross_entropy(p: DistLike, q: DistLike) -> float:
    pp, qq = _pair(p, q)
    on = pp > 0
    if np.any(qq[on] == 0):
        raise SupportMismatch("cross-entropy is infinite: q vanishes on the support of p")
    return float(-np.sum(pp[on] * np.log(qq[on])))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")


def ell_alpha(p: float, alpha: float) -> float:
    """Trust-region token loss: linear below ``alpha``, negative log above.

    The two branches meet with equal value and slope at ``p == alpha``.
    ``p == 0`` takes the linear branch and is finite.
    """
    _check_alpha(alpha)
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    if p < alpha:
        return -p / alpha + 1.0 - math.log(alpha)
    return -math.log(p)


def ell_alpha_grad(p: float, alpha: float) -> float:
    """d ell_alpha / dp; the one-sided derivative at 0 is -1/alpha."""
    _check_alpha(alpha)
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    return -1.0 / alpha if p < alpha else -1.0 / p


def ell_alpha_array(p: np.ndarray, alpha: float) -> np.ndarray:
    _check_alpha(alpha)
    p = np.asarray(p, dtype=float)
    below = p < alpha
    out = np.empty_like(p)
    out[below] = -p[below] / alpha + 1.0 - math.log(alpha)
    out[~below] = -np.log(p[~below])
    return out


def ell_alpha_grad_array(p: np.ndarray, alpha: float) -> np.ndarray:
    _check_alpha(alpha)
    p = np.asarray(p, dtype=float)
    return -1.0 / np.maximum(p, alpha)


def trsft_divergence(p_expert: DistLike, q: DistLike, alpha: float) -> float:
    """Sum over symbols of expert mass times ``ell_alpha(q(c))``.

    Finite for every q on the simplex, including q with holes in the
    expert's support.
    """
    pp, qq = _pair(p_expert, q)
    return float(np.dot(pp, ell_alpha_array(qq, alpha)))


def total_variation(p: DistLike, q: DistLike) -> float:
    pp, qq = _pair(p, q)
    return 0.5 * float(np.abs(pp - qq).sum())


# Plain-text array format used by the CLI: numbers separated by commas
# and/or whitespace, '#' starts a comment.

def parse_probs(text: str, renormalize: bool = False) -> Categorical:
    body = "\n".join(line.split("#", 1)[0] for line in text.splitlines())
    fields = [f for f in re.split(r"[\s,;]+", body.strip()) if f]
    if not fields:
        raise DomainError("no numbers found in distribution text")
    try:
        values = [float(f) for f in fields]
    except ValueError as exc:
        raise DomainError(f"bad number in distribution text: {exc}") from None
    if renormalize:
        return Categorical.from_weights(values)
    return Categorical(values)


def format_probs(p: DistLike) -> str:
    return " ".join(repr(float(x)) for x in as_categorical(p).probs) + "\n"
