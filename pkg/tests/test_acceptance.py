"""Acceptance criteria.  Each test records a PASS/FAIL line, printed in a
summary section at the end of the run, and asserts the criterion at its
stated tolerance."""

import time
import warnings
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest

from trapolab.cli import main
from trapolab.dist import Categorical, ell_alpha, ell_alpha_grad, total_variation, trsft_divergence
from trapolab.env import FamilyParams, generate_tasks, prefix_at_ratio
from trapolab.fixed_point import brute_force_endpoint, solve_lambda
from trapolab.gmm import Gmm1D, canonical_expert, canonical_target, sample_loss, sample_loss_grad, train_mimic
from trapolab.grpo import RolloutGroup, advantages, rl_gradient, rl_surrogate
from trapolab.microgroup import MicroGroupSpec, SpecWarning, run_prompt
from trapolab.objective import (
    MaskedSequence,
    expected_forward_kl_gradient,
    expected_nll_gradient,
    sft_gradient,
    surrogate_loss,
    trsft_gradient,
)
from trapolab.policy import ContextSoftmaxPolicy, Gradient, Trajectory, Vocab
from trapolab.trainer import REGIMES, TrainRunConfig, evaluate, initial_policy, pass_at_k_estimate, train

VOCAB4 = Vocab(("a", "b", "c", "<eos>"), bos=None, step=None, ans=None)


def policy4(rng, scale=1.0, k=1):
    pol = ContextSoftmaxPolicy(VOCAB4, context_order=k, align_prompt=False)
    for key in [(-1,)] + [(t,) for t in range(4)]:
        pol.logits[(key,)] = scale * rng.standard_normal(4)
    pol.invalidate()
    return pol


def materialise(pol, seqs):
    """Give every context a sequence visits an explicit logits row."""
    for s in seqs:
        for key in pol.context_keys(s.prompt, s.tokens):
            pol.logits.setdefault(key, np.zeros(pol.vocab.size))
    pol.invalidate()


def random_seqs(rng, n, vocab_size=4, max_len=5):
    out = []
    for _ in range(n):
        toks = tuple(int(t) for t in rng.integers(vocab_size, size=int(rng.integers(1, max_len + 1))))
        mask = (rng.random(len(toks)) < 0.7).astype(float)
        mask[0] = 1.0
        out.append(MaskedSequence((), toks, mask))
    return out


def fd_gradient(pol, fn, h=1e-6) -> Gradient:
    g = Gradient()
    for key, row in pol.logits.items():
        vec = np.zeros(row.size)
        for i in range(row.size):
            old = row[i]
            row[i] = old + h
            pol.invalidate()
            up = fn()
            row[i] = old - h
            pol.invalidate()
            down = fn()
            row[i] = old
            pol.invalidate()
            vec[i] = (up - down) / (2 * h)
        g[key] = vec
    return g


def rel_error(analytic: Gradient, numeric: Gradient) -> float:
    keys = analytic.keys() | numeric.keys()
    zero = np.zeros(VOCAB4.size)
    a = np.concatenate([analytic.get(k, zero) for k in sorted(keys, key=repr)])
    b = np.concatenate([numeric.get(k, zero) for k in sorted(keys, key=repr)])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# 1 ----------------------------------------------------------------------------

def tie_instance(rng):
    """A distribution with one symbol exactly at ``alpha * lambda``, kept
    symbols above it and dropped symbols below it."""
    while True:
        size = int(rng.integers(3, 11))
        m = int(rng.integers(1, size - 1))
        alpha, lam = float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.4, 0.9))
        b, rest = alpha * lam, 1.0 - lam - alpha * lam
        kept = lam * rng.dirichlet(np.ones(m))
        dropped = rest * rng.dirichlet(np.ones(size - 1 - m))
        if rest > 0 and kept.min() > b and dropped.max() < b:
            p = np.concatenate([kept, [b], dropped])
            return Categorical(p[rng.permutation(size)]), alpha


def test_c01_fixed_point_oracle(acceptance):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst_tv, worst_gap, bad = 0.0, 0.0, 0
    regular, ties = 500, 50
    for i in range(regular + ties):
        if i < regular:
            size = int(rng.integers(2, 11))
            p = rng.dirichlet(np.full(size, rng.uniform(0.2, 2.0)))
            p, alpha = Categorical(p / p.sum()), float(rng.uniform(0.05, 1.0))
        else:
            p, alpha = tie_instance(rng)
        sol = solve_lambda(p, alpha)
        q = brute_force_endpoint(p, alpha)
        tv = total_variation(sol.optimal, q)
        gap = trsft_divergence(p, sol.optimal, alpha) - trsft_divergence(p, q, alpha)
        if i < regular:
            worst_tv = max(worst_tv, tv)
            bad += tv > 1e-3
        else:
            worst_gap = max(worst_gap, gap)
            bad += gap > 1e-6
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed <= 60.0
    acceptance(1, "fixed point vs projected gradient", ok,
               f"{regular} random instances (worst TV {worst_tv:.2e}), {ties} boundary-tie instances "
               f"(worst objective gap {worst_gap:.1e}), {elapsed:.1f}s")
    assert ok


# 2 ----------------------------------------------------------------------------

def test_c02_ell_alpha_smooth(acceptance):
    worst = 0.0
    for alpha in (0.05, 0.1, 0.2, 0.5, 1.0):
        below, above = np.nextafter(alpha, 0.0), np.nextafter(alpha, 2.0)
        values = [ell_alpha(below, alpha), ell_alpha(alpha, alpha)]
        slopes = [ell_alpha_grad(below, alpha), ell_alpha_grad(alpha, alpha)]
        if alpha < 1.0:
            values.append(ell_alpha(above, alpha))
            slopes.append(ell_alpha_grad(above, alpha))
        # the limit values of both branches at p = alpha
        values += [-alpha / alpha + 1 - np.log(alpha), -np.log(alpha)]
        slopes += [-1 / alpha, -1 / alpha]
        worst = max(worst, np.ptp(values), np.ptp(slopes))
    ok = worst <= 1e-12
    acceptance(2, "ell_alpha continuity", ok, f"worst jump {worst:.1e} over 5 alphas")
    assert ok


# 3 ----------------------------------------------------------------------------

def test_c03_alpha_zero_is_sft(acceptance):
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(200):
        pol = policy4(rng, scale=float(rng.uniform(0.5, 3.0)))
        batch = random_seqs(rng, int(rng.integers(1, 8)))
        ref = Gradient()
        for s in batch:
            # plain SFT written out: -(1/N) sum mask * grad p / p
            p = pol.token_probs(s.prompt, s.tokens)
            ref.add(pol.prob_gradient(s.prompt, s.tokens, s.mask / p), -1.0 / len(batch))
        got = trsft_gradient(pol, batch, 0.0)
        mismatches += not (got.equal(ref) and got.equal(sft_gradient(pol, batch)))
    ok = mismatches == 0
    acceptance(3, "alpha = 0 reduces to SFT", ok, f"200 random batches, {mismatches} not bit-identical")
    assert ok


# 4 ----------------------------------------------------------------------------

def test_c04_gradients(acceptance):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    points = 100

    trsft_worst = 0.0
    done = 0
    while done < points:
        pol = policy4(rng, scale=float(rng.uniform(0.5, 2.0)))
        batch = random_seqs(rng, int(rng.integers(1, 5)))
        alpha = float(rng.uniform(0.05, 0.6))
        probs = np.concatenate([pol.token_probs(s.prompt, s.tokens) for s in batch])
        if np.min(np.abs(probs - alpha)) < 1e-4:
            continue  # too close to the kink for central differences
        materialise(pol, batch)
        ana = trsft_gradient(pol, batch, alpha)
        num = fd_gradient(pol, lambda: surrogate_loss(pol, batch, alpha))
        trsft_worst = max(trsft_worst, rel_error(ana, num))
        done += 1

    rl_worst = 0.0
    for _ in range(points):
        pol = policy4(rng, scale=float(rng.uniform(0.5, 2.0)))
        trajs = []
        for s in random_seqs(rng, 6):
            cut = int(rng.integers(0, len(s.tokens)))
            trajs.append(Trajectory((), s.tokens, guided_prefix_len=cut, reward=float(rng.integers(2))))
        group = RolloutGroup(None, trajs)
        group.compute_advantages()
        materialise(pol, [MaskedSequence((), t.tokens, None) for t in trajs])
        ana = rl_gradient(pol, group)
        num = fd_gradient(pol, lambda: rl_surrogate(pol, group))
        if np.all(group.advantages == 0):
            rl_worst = max(rl_worst, max(float(np.abs(v).max()) for v in num.values()))
        else:
            rl_worst = max(rl_worst, rel_error(ana, num))

    gmm_worst = {"sft": 0.0, "trsft": 0.0}
    base = canonical_target().theta()
    for objective in ("sft", "trsft"):
        done = 0
        while done < points:
            theta = base + 0.3 * rng.standard_normal(base.size)
            y = canonical_expert().sample(16, rng)
            alpha = 0.066 if objective == "trsft" else None
            if alpha is not None:
                if np.min(np.abs(Gmm1D.from_theta(theta).density(y) - alpha)) < 1e-4:
                    continue
            ana = sample_loss_grad(theta, y, objective, alpha).mean(axis=0)
            num = np.empty_like(theta)
            for j in range(theta.size):
                e = np.zeros_like(theta)
                e[j] = 1e-6
                num[j] = (sample_loss(theta + e, y, objective, alpha).mean()
                          - sample_loss(theta - e, y, objective, alpha).mean()) / 2e-6
            err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
            gmm_worst[objective] = max(gmm_worst[objective], float(err))
            done += 1
    elapsed = time.perf_counter() - t0
    worst = max(trsft_worst, rl_worst, *gmm_worst.values())
    ok = worst <= 1e-5 and elapsed <= 120.0
    acceptance(4, "analytic vs finite-difference gradients", ok,
               f"{points} points each; worst relative error TrSFT {trsft_worst:.1e}, RL {rl_worst:.1e}, "
               f"GMM-SFT {gmm_worst['sft']:.1e}, GMM-TrSFT {gmm_worst['trsft']:.1e}; {elapsed:.1f}s")
    assert ok


# 5 ----------------------------------------------------------------------------

def test_c05_sft_is_forward_kl(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        expert, target = policy4(rng, 2.0), policy4(rng, 1.0)
        a = expected_nll_gradient(expert, target, max_len=3)
        b = expected_forward_kl_gradient(expert, target, max_len=3)
        keys = a.keys() | b.keys()
        zero = np.zeros(4)
        worst = max(worst, max(float(np.abs(a.get(k, zero) - b.get(k, zero)).max()) for k in keys))
    ok = worst <= 1e-8
    acceptance(5, "expected NLL gradient = forward-KL gradient", ok,
               f"20 expert/target pairs, order 1, |V| = 4, length <= 3, max abs diff {worst:.1e}")
    assert ok


# 6 ----------------------------------------------------------------------------

class _Scripted:
    def __init__(self, outcomes):
        self.outcomes, self.seen = list(outcomes), {}

    def __call__(self, traj, task):
        if id(traj) not in self.seen:
            self.seen[id(traj)] = (traj, self.outcomes[len(self.seen)])
        return self.seen[id(traj)][1]


def test_c06_micro_group_traces(acceptance):
    fam = FamilyParams(min_len=3, max_len=3)
    task = generate_tasks(fam, 1, seed=2)[0]
    step = fam.vocab().step_id
    pol = ContextSoftmaxPolicy(fam.vocab(), 2)
    spec = MicroGroupSpec.default()

    def run(outcomes, s=spec):
        return run_prompt(pol, task, s, np.random.default_rng(0), verifier=_Scripted(outcomes))

    checks = {}
    g = run([0] * 8)
    checks["all-fail"] = [(d.guided, d.ratio) for d in g.decisions] == [
        (False, 0.0), (True, 0.2), (True, 0.5), (True, 1.0)]
    g = run([1] * 8)
    checks["all-pass"] = all(not d.guided for d in g.decisions)
    g = run([1, 1, 1, 0, 1, 0, 1, 1])
    d = g.decisions
    checks["mixed"] = (d[1].pass_rate == 0.75 and not d[1].guided and abs(d[2].pass_rate - 4 / 6) < 1e-12
                       and d[2].guided and d[2].ratio == 0.5 and d[3].guided and d[3].ratio == 1.0)
    g = run([0] * 8)
    ext = True
    for t, dec in zip(g.trajectories[4:], [g.decisions[1]] * 2 + list(g.decisions[2:])):
        expert = task.expert_trajectories[dec.expert_index]
        prefix = prefix_at_ratio(expert, dec.ratio, step)
        ext &= t.tokens[:t.guided_prefix_len] == prefix and (prefix[-1] == step or prefix == expert)
        ext &= len(prefix) >= int(np.floor(dec.ratio * len(expert)))
    checks["delimiter extension"] = ext
    never = MicroGroupSpec((4, 2, 1, 1), (0.0, 0.2, 0.5, 1.0), (-1.0, -1.0, -1.0, -1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SpecWarning)
        checks["t = -1 never guides"] = all(not dd.guided for dd in run([0] * 8, never).decisions)
    ok = all(checks.values())
    acceptance(6, "micro-group guidance traces", ok,
               ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# 7 ----------------------------------------------------------------------------

def test_c07_gmm_blending(acceptance):
    t0 = time.perf_counter()
    expert, init = canonical_expert(), canonical_target()
    kl_down = transient = trsft_lower = 0
    peaks = []
    for seed in range(10):
        sft = train_mimic(expert, init, "sft", seed=seed)
        tr = train_mimic(expert, init, "trsft", seed=seed)
        kl_down += sft.kl[-1] < sft.kl[0]
        vm = sft.void_mass
        transient += vm.max() > vm[0] and vm.max() > vm[-1]
        trsft_lower += tr.peak_void_mass < sft.peak_void_mass
        peaks.append((sft.peak_void_mass, tr.peak_void_mass))
    elapsed = time.perf_counter() - t0
    ok = kl_down == 10 and transient == 10 and trsft_lower >= 8 and elapsed <= 180.0
    s, t = np.mean(peaks, axis=0)
    acceptance(7, "GMM distribution blending", ok,
               f"SFT KL decreases {kl_down}/10, SFT void-mass transient {transient}/10, "
               f"TrSFT peak < SFT peak {trsft_lower}/10 (mean peaks {s:.3g} vs {t:.2g}); {elapsed:.1f}s")
    assert ok


# 8 ----------------------------------------------------------------------------

def test_c08_advantages(acceptance):
    rng = np.random.default_rng(8)
    checks = {"mean subtraction": True, "zero sum": True, "no std division": True,
              "translation invariance": True, "no length normalisation": True}
    for _ in range(500):
        r = rng.integers(0, 2, size=int(rng.integers(1, 17))).astype(float)
        if rng.random() < 0.5:
            r = rng.normal(size=r.size)
        a = advantages(r)
        checks["mean subtraction"] &= bool(np.array_equal(a, r - r.mean()))
        checks["zero sum"] &= abs(a.sum()) <= 1e-12 * max(1.0, np.abs(r).sum())
        checks["no std division"] &= bool(np.allclose(advantages(3.0 * r), 3.0 * a, atol=1e-12))
        checks["translation invariance"] &= bool(np.allclose(advantages(r + 5.0), a, atol=1e-12))
    # the gradient of a trajectory scales with its length, not its average
    pol = policy4(rng)
    short = Trajectory((), (0,), reward=1.0)
    long = Trajectory((), (0, 0, 0, 0), reward=1.0)
    zero = Trajectory((), (1,), reward=0.0)
    for traj in (short, long):
        g = RolloutGroup(None, [traj, zero])
        g.compute_advantages()
        grad = rl_gradient(pol, g)
        direct = pol.logprob_gradient((), traj.tokens, np.ones(len(traj.tokens))).scaled(0.5)
        direct.add(pol.logprob_gradient((), zero.tokens, np.ones(1)), -0.5)
        checks["no length normalisation"] &= grad.allclose(direct, atol=1e-14)
    ok = all(checks.values())
    acceptance(8, "Dr.GRPO advantage contract", ok,
               ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()) + " (500 random groups)")
    assert ok


# 9 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_c09_desk_scale_training(acceptance):
    t0 = time.perf_counter()
    fam = FamilyParams(hard_fraction=0.3)
    wins, strict, rows, hard_rates = 0, 0, [], []
    for seed in range(10):
        tasks = generate_tasks(fam, 500, seed)
        base = TrainRunConfig(tasks=tasks, family=fam, steps=200, batch_size=16, group_size=8, seed=seed)
        hard = [t for t in tasks if t.hard]
        hard_rates.append(evaluate(initial_policy(base), hard, base))
        r = {}
        for regime in ("trapo", "grpo_only"):
            cfg = TrainRunConfig(**{**base.__dict__, "regime": regime})
            r[regime] = train(cfg).final_reward
        wins += r["trapo"] >= r["grpo_only"]
        strict += r["trapo"] > r["grpo_only"]
        rows.append(f"{r['trapo']:.3f}/{r['grpo_only']:.3f}")
    elapsed = time.perf_counter() - t0
    guess = 1.0 / fam.modulus
    unsolved = max(hard_rates) <= guess
    ok = wins >= 7 and unsolved and elapsed <= 900.0
    acceptance(9, "trapo >= grpo_only at equal rollout budget", ok,
               f"{wins}/10 seeds, {strict}/10 strictly (trapo/grpo final reward: {' '.join(rows)}); initial hard-tail solve rate "
               f"<= {max(hard_rates):.3f} (guessing {guess:.3f}); {elapsed:.0f}s")
    assert ok


# 10 ---------------------------------------------------------------------------

def test_c10_pass_at_k(acceptance):
    cases = mismatches = 0
    monotone = True
    for n in range(1, 9):
        for c in range(n + 1):
            outcomes = [1] * c + [0] * (n - c)
            values = []
            for k in range(1, n + 1):
                subsets = list(combinations(range(n), k))
                brute = Fraction(sum(any(outcomes[i] for i in s) for s in subsets), len(subsets))
                est = pass_at_k_estimate(n, c, k)
                mismatches += est != brute
                values.append(est)
                cases += 1
            monotone &= values == sorted(values)
    ok = mismatches == 0 and monotone
    acceptance(10, "pass@k estimator", ok,
               f"{cases} (n, c, k) cases, {mismatches} mismatches, monotone in k: {monotone}")
    assert ok


# 11 ---------------------------------------------------------------------------

def test_c11_reproducibility(acceptance, tmp_path, capsys):
    fast = ["--set", "tasks.count=40", "--set", "train.steps=6", "--set", "train.batch_size=4",
            "--set", "policy.warmstart_steps=50", "--set", "eval.rollouts=1", "--set", "train.workers=2"]
    identical = {}
    for regime in REGIMES:
        files = []
        for rep in ("a", "b"):
            root = tmp_path / regime / rep
            assert main(["train", "--regime", regime, "--seed", "7", "--runs-dir", str(root), *fast]) == 0
            (run,) = list(root.iterdir())
            files.append((run / "metrics.jsonl").read_bytes() + (run / "policy.json").read_bytes())
        identical[regime] = files[0] == files[1]
    for objective in ("sft", "trsft"):
        files = []
        for rep in ("a", "b"):
            root = tmp_path / objective / rep
            assert main(["gmm", "--objective", objective, "--runs-dir", str(root), "--set", "gmm.steps=100"]) == 0
            (run,) = list(root.iterdir())
            files.append(b"".join((run / n).read_bytes() for n in ("metrics.tsv", "snapshots.json", "density.svg")))
        identical[f"gmm-{objective}"] = files[0] == files[1]
    capsys.readouterr()
    ok = all(identical.values())
    acceptance(11, "byte-identical reruns", ok,
               ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in identical.items()))
    assert ok
