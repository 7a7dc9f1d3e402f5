"""Tabular autoregressive softmax policy with closed-form gradients.

The next-token distribution is a softmax over one logits row per context.
A context is the last ``context_order`` response tokens, optionally joined
with the prompt segment aligned to the current reasoning step: the prompt is
split on the step delimiter, and after ``j`` delimiters in the response the
policy reads segment ``j`` (plus a flag telling whether it is the final one).
This lets a small table learn a step rule shared across tasks instead of
memorising each prompt.

Rows are materialised lazily; an unseen context reads as all-zero logits,
i.e. the uniform distribution.

Parameters are shared read-only while rollouts run and owned exclusively by
the caller of :meth:`ContextSoftmaxPolicy.update`.  The probability cache is
cleared on every update.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from trapolab.errors import EmptySet, UnknownToken

PAD = -1
CHECKPOINT_FORMAT = "trapolab-policy"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Token alphabet.  Special tokens are looked up by name."""

    tokens: tuple
    bos: str | None = "<bos>"
    step: str | None = "<step>"
    ans: str | None = "<ans>"
    eos: str = "<eos>"

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        for name in (self.bos, self.step, self.ans, self.eos):
            if name is not None and name not in self._index:
                raise UnknownToken(name)

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def ids(self, tokens: Iterable[str]) -> tuple:
        return tuple(self.id(t) for t in tokens)

    def names(self, ids: Iterable[int]) -> list:
        return [self.tokens[i] for i in ids]

    def _opt_id(self, name):
        return None if name is None else self._index[name]

    @property
    def bos_id(self):
        return self._opt_id(self.bos)

    @property
    def step_id(self):
        return self._opt_id(self.step)

    @property
    def ans_id(self):
        return self._opt_id(self.ans)

    @property
    def eos_id(self) -> int:
        return self._index[self.eos]

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "bos": self.bos, "step": self.step,
                "ans": self.ans, "eos": self.eos}

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(tuple(d["tokens"]), d.get("bos"), d.get("step"), d.get("ans"), d["eos"])


@dataclass
class Trajectory:
    """A prompt and a response; the first ``guided_prefix_len`` response
    tokens came from an expert, the rest were sampled."""

    prompt: tuple
    tokens: tuple
    guided_prefix_len: int = 0
    reward: float = 0.0
    logprob: float = 0.0
    delimiter_positions: tuple = ()
    expert_index: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prompt = tuple(self.prompt)
        self.tokens = tuple(self.tokens)
        if not 0 <= self.guided_prefix_len <= len(self.tokens):
            raise ValueError("guided_prefix_len out of range")
        dp = tuple(self.delimiter_positions)
        if any(b <= a for a, b in zip(dp, dp[1:])) or any(not 0 <= d < len(self.tokens) for d in dp):
            raise ValueError("delimiter positions must be strictly increasing and in range")
        self.delimiter_positions = dp

    @property
    def guided(self) -> bool:
        return self.guided_prefix_len > 0

    @property
    def generated_len(self) -> int:
        return len(self.tokens) - self.guided_prefix_len

    def generated_mask(self) -> np.ndarray:
        m = np.zeros(len(self.tokens))
        m[self.guided_prefix_len:] = 1.0
        return m

    def prefix_mask(self) -> np.ndarray:
        m = np.zeros(len(self.tokens))
        m[: self.guided_prefix_len] = 1.0
        return m


class Gradient(dict):
    """Sparse parameter gradient: context key -> logits-row gradient."""

    def accumulate(self, key, vec: np.ndarray, scale: float = 1.0) -> None:
        row = self.get(key)
        if row is None:
            self[key] = scale * vec
        else:
            row += scale * vec

    def add(self, other: "Gradient", scale: float = 1.0) -> "Gradient":
        for key, vec in other.items():
            self.accumulate(key, vec, scale)
        return self

    def scaled(self, scale: float) -> "Gradient":
        return Gradient((k, scale * v) for k, v in self.items())

    def norm(self) -> float:
        return math.sqrt(sum(float(v @ v) for v in self.values()))

    def dot(self, other: "Gradient") -> float:
        return sum(float(v @ other[k]) for k, v in self.items() if k in other)

    def allclose(self, other: "Gradient", rtol=0.0, atol=0.0) -> bool:
        keys = set(self) | set(other)
        for k in keys:
            a = self.get(k)
            b = other.get(k)
            a = np.zeros_like(b) if a is None else a
            b = np.zeros_like(a) if b is None else b
            if not np.allclose(a, b, rtol=rtol, atol=atol):
                return False
        return True

    def equal(self, other: "Gradient") -> bool:
        return self.keys() == other.keys() and all(np.array_equal(v, other[k]) for k, v in self.items())


@lru_cache(maxsize=65536)
def _segments(prompt: tuple, delim: int, bos: int | None) -> tuple:
    segs, cur = [], []
    for t in prompt:
        if t == bos:
            continue
        if t == delim:
            segs.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    segs.append(tuple(cur))
    return tuple(segs)


def _softmax(row: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = row / temperature if temperature != 1.0 else row
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


class ContextSoftmaxPolicy:
    """Context-order-k tabular softmax policy."""

    def __init__(self, vocab: Vocab, context_order: int = 2, align_prompt: bool = True, logits=None):
        if context_order < 0:
            raise ValueError("context_order must be non-negative")
        if align_prompt and vocab.step_id is None:
            raise ValueError("prompt alignment needs a step delimiter token")
        self.vocab = vocab
        self.k = context_order
        self.align_prompt = align_prompt
        self.logits: dict = {} if logits is None else dict(logits)
        self._uniform = np.full(vocab.size, 1.0 / vocab.size)
        self._cache: dict = {}
        self._eye = np.eye(vocab.size)

    # -- contexts ---------------------------------------------------------

    def _reader(self, prompt):
        if not self.align_prompt:
            return None
        return _segments(tuple(prompt), self.vocab.step_id, self.vocab.bos_id)

    def _key(self, segs, cursor: int, window: tuple):
        if segs is None:
            return window
        if cursor < len(segs):
            return (segs[cursor], cursor == len(segs) - 1, window)
        return ((), False, window)

    def context_keys(self, prompt: Sequence[int], tokens: Sequence[int]) -> list:
        """Keys used to predict ``tokens[n]`` for every n, plus the key after
        the last token (length ``len(tokens) + 1``)."""
        segs = self._reader(prompt)
        delim = self.vocab.step_id
        window = (PAD,) * self.k
        cursor = 0
        keys = [self._key(segs, cursor, window)]
        for t in tokens:
            if self.k:
                window = window[1:] + (t,)
            if t == delim:
                cursor += 1
            keys.append(self._key(segs, cursor, window))
        return keys

    # -- probabilities ----------------------------------------------------

    def invalidate(self) -> None:
        self._cache.clear()

    def _entry(self, key, temperature: float = 1.0):
        ck = (key, temperature)
        hit = self._cache.get(ck)
        if hit is None:
            row = self.logits.get(key)
            probs = self._uniform if row is None else _softmax(row, temperature)
            hit = (probs, np.cumsum(probs))
            self._cache[ck] = hit
        return hit

    def probs(self, key, temperature: float = 1.0) -> np.ndarray:
        return self._entry(key, temperature)[0]

    def token_prob(self, key, token: int) -> float:
        if not 0 <= token < self.vocab.size:
            raise UnknownToken(token)
        return float(self.probs(key)[token])

    def token_probs(self, prompt, tokens) -> np.ndarray:
        keys = self.context_keys(prompt, tokens)
        return np.array([self.probs(keys[n])[t] for n, t in enumerate(tokens)])

    def sequence_logprob(self, prompt, tokens, start: int = 0, temperature: float = 1.0) -> float:
        keys = self.context_keys(prompt, tokens)
        return float(sum(math.log(self.probs(keys[n], temperature)[tokens[n]])
                         for n in range(start, len(tokens))))

    # -- sampling -----------------------------------------------------------

    def sample(self, prompt, prefix=(), max_len: int = 32, temperature: float = 1.0, rng=None) -> Trajectory:
        """Continue ``prefix`` until the end token or ``max_len`` total tokens.

        Only sampled tokens contribute to the recorded log-probability, taken
        under the tempered sampling distribution.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if rng is None:
            rng = np.random.default_rng()
        prompt = tuple(prompt)
        tokens = list(prefix)
        eos, delim = self.vocab.eos_id, self.vocab.step_id
        segs = self._reader(prompt)
        window = (PAD,) * self.k
        cursor = 0
        for t in tokens:
            if self.k:
                window = window[1:] + (t,)
            if t == delim:
                cursor += 1
        logprob = 0.0
        done = bool(tokens) and tokens[-1] == eos
        size = self.vocab.size
        while not done and len(tokens) < max_len:
            probs, cdf = self._entry(self._key(segs, cursor, window), temperature)
            t = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            if t >= size:
                t = size - 1
            logprob += math.log(probs[t])
            tokens.append(t)
            if self.k:
                window = window[1:] + (t,)
            if t == delim:
                cursor += 1
            done = t == eos
        return Trajectory(
            prompt=prompt,
            tokens=tuple(tokens),
            guided_prefix_len=len(prefix),
            logprob=logprob,
            delimiter_positions=tuple(i for i, t in enumerate(tokens) if t == delim),
        )

    # -- gradients ----------------------------------------------------------

    def logprob_gradient(self, prompt, tokens, weights) -> Gradient:
        """Sum over positions of ``weights[n] * grad log pi(tokens[n])``."""
        keys = self.context_keys(prompt, tokens)
        grad = Gradient()
        for n, t in enumerate(tokens):
            w = weights[n]
            if w:
                grad.accumulate(keys[n], self._eye[t] - self.probs(keys[n]), w)
        return grad

    def prob_gradient(self, prompt, tokens, weights) -> Gradient:
        """Sum over positions of ``weights[n] * grad pi(tokens[n])``."""
        keys = self.context_keys(prompt, tokens)
        grad = Gradient()
        for n, t in enumerate(tokens):
            w = weights[n]
            if w:
                probs = self.probs(keys[n])
                grad.accumulate(keys[n], probs[t] * (self._eye[t] - probs), w)
        return grad

    def grad_logprob(self, trajectory: Trajectory, token_mask=None) -> Gradient:
        if token_mask is None:
            token_mask = np.ones(len(trajectory.tokens))
        return self.logprob_gradient(trajectory.prompt, trajectory.tokens, token_mask)

    def update(self, grad: Gradient, lr: float) -> None:
        """Gradient-descent step ``theta -= lr * grad``."""
        for key, g in grad.items():
            row = self.logits.get(key)
            if row is None:
                self.logits[key] = -lr * g
            else:
                row -= lr * g
        self._cache.clear()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(r)) for r in self.logits.values())

    # -- diagnostics --------------------------------------------------------

    def entropy(self, key) -> float:
        p = self.probs(key)
        nz = p[p > 0]
        return float(-(nz * np.log(nz)).sum())

    def mean_entropy(self, trajectories: Sequence[Trajectory]) -> float:
        """Average next-token entropy over sampled (non-prefix) positions."""
        if not trajectories:
            raise EmptySet("no trajectories")
        total, count = 0.0, 0
        for tr in trajectories:
            keys = self.context_keys(tr.prompt, tr.tokens)
            for n in range(tr.guided_prefix_len, len(tr.tokens)):
                total += self.entropy(keys[n])
                count += 1
        if count == 0:
            raise EmptySet("no generated positions")
        return total / count

    def copy(self) -> "ContextSoftmaxPolicy":
        return ContextSoftmaxPolicy(self.vocab, self.k, self.align_prompt,
                                    {k: v.copy() for k, v in self.logits.items()})

    # -- checkpoints --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "vocab": self.vocab.to_json(),
            "context_order": self.k,
            "align_prompt": self.align_prompt,
            "rows": [[_key_to_json(k), [float(x) for x in v]] for k, v in self.logits.items()],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ContextSoftmaxPolicy":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a trapolab policy checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        logits = {_key_from_json(k): np.array(v, dtype=float) for k, v in d["rows"]}
        return cls(Vocab.from_json(d["vocab"]), d["context_order"], d["align_prompt"], logits)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "ContextSoftmaxPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))


def _key_to_json(key):
    if isinstance(key, tuple):
        return [_key_to_json(k) for k in key]
    return key


def _key_from_json(obj):
    if isinstance(obj, list):
        return tuple(_key_from_json(o) for o in obj)
    return obj
