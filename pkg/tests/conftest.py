import numpy as np
import pytest
from hypothesis import settings

from trapolab.env import FamilyParams, generate_tasks
from trapolab.policy import ContextSoftmaxPolicy, Vocab

settings.register_profile("trapolab", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("trapolab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_vocab():
    return Vocab(("a", "b", "c", "<eos>"), bos=None, step=None, ans=None)


def random_policy(vocab, k=1, seed=0, scale=1.0, align=False, prompt=(), max_len=4):
    """Tabular policy with random logits on every context reachable from
    ``prompt`` within ``max_len`` tokens."""
    rng = np.random.default_rng(seed)
    pol = ContextSoftmaxPolicy(vocab, context_order=k, align_prompt=align)
    frontier = [()]
    for _ in range(max_len):
        nxt = []
        for toks in frontier:
            key = pol.context_keys(prompt, toks)[-1]
            if key not in pol.logits:
                pol.logits[key] = scale * rng.standard_normal(vocab.size)
            if toks and toks[-1] == vocab.eos_id:
                continue
            nxt.extend(toks + (t,) for t in range(vocab.size))
        frontier = nxt
    pol.invalidate()
    return pol


@pytest.fixture
def arith_tasks():
    return generate_tasks(FamilyParams(), 40, seed=3)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {name}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
