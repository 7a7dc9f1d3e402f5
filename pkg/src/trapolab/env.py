"""Synthetic multi-step reasoning tasks: modular arithmetic chains.

A task starts from a value ``s`` and applies a list of operations
``(op, operand)`` modulo ``m``.  The prompt lists the start value and the
operations, separated by the step delimiter::

    <bos> s <step> * 3 <step> + 5 <step> * 2

Each task ships two expert derivations that reach the same answer:

* ``direct``: ``s <step> v1 <step> ... vd <ans> vd <eos>``
* ``checked``: the same chain followed by one extra step that restates the
  final value before answering, ``... vd <step> vd <ans> vd <eos>``.

The verifier only looks at the token right after the first answer marker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from trapolab.policy import Trajectory, Vocab

OPS = {"+": lambda v, a, m: (v + a) % m, "*": lambda v, a, m: (v * a) % m}
STYLES = ("direct", "checked")


def build_vocab(modulus: int, ops: Sequence[str] = ("+", "*")) -> Vocab:
    if not 2 <= modulus <= 10:
        raise ValueError("modulus must be in [2, 10] so every value is one digit token")
    specials = ("<bos>", "<step>", "<ans>", "<eos>")
    return Vocab(specials + tuple(ops) + tuple(str(d) for d in range(modulus)))


@dataclass(frozen=True)
class FamilyParams:
    """Task family.  ``hard_fraction`` of the tasks draw their chain length
    from ``[hard_min_len, hard_max_len]``; the rest from ``[min_len, max_len]``."""

    modulus: int = 7
    ops: tuple = ("+", "*")
    min_len: int = 1
    max_len: int = 3
    hard_fraction: float = 0.0
    hard_min_len: int = 6
    hard_max_len: int = 8

    def __post_init__(self):
        if not 2 <= self.modulus <= 10:
            raise ValueError("modulus must lie in 2..10")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 1 <= self.hard_min_len <= self.hard_max_len:
            raise ValueError("need 1 <= hard_min_len <= hard_max_len")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")
        unknown = set(self.ops) - set(OPS)
        if unknown or not self.ops:
            raise ValueError(f"unsupported ops {sorted(unknown)}")

    def vocab(self) -> Vocab:
        return build_vocab(self.modulus, ("+", "*"))


@dataclass(frozen=True)
class Task:
    task_id: int
    prompt: tuple
    answer: int
    difficulty: int
    expert_trajectories: tuple
    hard: bool = False
    marker: int = 2
    meta: dict = field(default_factory=dict, compare=False)


def make_task(task_id: int, start: int, steps: Sequence[tuple], vocab: Vocab, modulus: int, hard=False) -> Task:
    V = vocab.id
    bos, step, ans, eos = V("<bos>"), V("<step>"), V("<ans>"), V("<eos>")
    prompt = [bos, V(str(start))]
    values = [start]
    for op, a in steps:
        prompt += [step, V(op), V(str(a))]
        values.append(OPS[op](values[-1], a, modulus))
    digits = [V(str(v)) for v in values]
    chain = [digits[0]]
    for d in digits[1:]:
        chain += [step, d]
    final = digits[-1]
    direct = tuple(chain + [ans, final, eos])
    checked = tuple(chain + [step, final, ans, final, eos])
    return Task(task_id, tuple(prompt), final, len(steps), (direct, checked), hard, ans,
                {"start": start, "steps": [list(s) for s in steps], "values": values})


def generate_tasks(params: FamilyParams, count: int, seed: int) -> list:
    """Deterministic per ``(params, count, seed)``."""
    rng = np.random.default_rng(seed)
    vocab = params.vocab()
    m = params.modulus
    n_hard = int(round(params.hard_fraction * count))
    hard_flags = np.zeros(count, dtype=bool)
    hard_flags[rng.permutation(count)[:n_hard]] = True
    tasks = []
    for i in range(count):
        hard = bool(hard_flags[i])
        lo, hi = (params.hard_min_len, params.hard_max_len) if hard else (params.min_len, params.max_len)
        d = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, m))
        steps = []
        for _ in range(d):
            op = params.ops[int(rng.integers(len(params.ops)))]
            # operand 0 would be a no-op for + and collapse the chain for *
            a = int(rng.integers(1, m))
            steps.append((op, a))
        tasks.append(make_task(i, start, steps, vocab, m, hard))
    return tasks


def verify(traj, task: Task) -> int:
    """1 iff an answer marker appears and the next token is the answer."""
    tokens = traj.tokens if isinstance(traj, Trajectory) else tuple(traj)
    try:
        i = tokens.index(task.marker)
    except ValueError:
        return 0
    return int(i + 1 < len(tokens) and tokens[i + 1] == task.answer)


def delimiter_positions(tokens: Sequence[int], delim: int) -> tuple:
    return tuple(i for i, t in enumerate(tokens) if t == delim)


def prefix_at_ratio(expert_traj: Sequence[int], L: float, delim: int) -> tuple:
    """First ``floor(L * |y|)`` tokens, extended through the next delimiter.

    A cut that already ends on a delimiter is kept; with no delimiter after
    the cut the whole trajectory is returned.
    """
    if not 0.0 <= L <= 1.0:
        raise ValueError(f"L must lie in [0, 1], got {L}")
    y = tuple(expert_traj)
    pos = int(np.floor(L * len(y)))
    if pos == 0:
        return ()
    if pos >= len(y) or y[pos - 1] == delim:
        return y[:pos]
    for i in range(pos, len(y)):
        if y[i] == delim:
            return y[: i + 1]
    return y


# -- serialization (one JSON record per line) --------------------------------

def task_to_record(task: Task) -> dict:
    return {
        "id": task.task_id,
        "prompt": list(task.prompt),
        "answer": task.answer,
        "difficulty": task.difficulty,
        "hard": task.hard,
        "marker": task.marker,
        "experts": [list(t) for t in task.expert_trajectories],
    }


def task_from_record(rec: dict) -> Task:
    return Task(rec["id"], tuple(rec["prompt"]), rec["answer"], rec["difficulty"],
                tuple(tuple(t) for t in rec["experts"]), rec.get("hard", False), rec["marker"])


def save_tasks(tasks: Sequence[Task], path, params: FamilyParams | None = None) -> None:
    with open(path, "w") as fh:
        if params is not None:
            fh.write(json.dumps({"family": {**params.__dict__, "ops": list(params.ops)}}) + "\n")
        for t in tasks:
            fh.write(json.dumps(task_to_record(t)) + "\n")


def load_tasks(path) -> tuple:
    """Returns ``(tasks, family_params_or_None)``."""
    tasks, params = [], None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "family" in rec:
            fam = dict(rec["family"])
            fam["ops"] = tuple(fam["ops"])
            params = FamilyParams(**fam)
        else:
            tasks.append(task_from_record(rec))
    return tasks, params
