"""One-dimensional Gaussian mixtures: a two-mode target fitted to a
three-mode expert by SFT (maximum likelihood) or trust-region SFT.

The target is parameterised as a flat vector ``theta = [logits, means,
log_stds]`` so every gradient step keeps the weights on the simplex and the
standard deviations positive.  Both objectives are written as a per-sample
coefficient times the gradient of the density ``q(y)``:

* SFT: ``-1/q(y)``
* TrSFT: ``-1/max(q(y), alpha_c)``, the gradient of the continuous
  trust-region loss ``-q/alpha_c + 1 - log alpha_c`` below ``alpha_c`` and
  ``-log q`` above it.

A density is not a probability, so ``alpha_c`` is tied to a density scale:
``alpha_c_ratio`` times the peak density of the initial target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trapolab.errors import DivergenceDetected, DomainError

OBJECTIVES = ("sft", "trsft")
SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Gmm1D:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        s = np.asarray(self.stds, dtype=float)
        if w.ndim != 1 or w.size == 0 or w.shape != m.shape or w.shape != s.shape:
            raise DomainError("weights, means and stds must be aligned non-empty vectors")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DomainError(f"weights must lie on the simplex, got {w}")
        if np.any(s <= 0) or not np.all(np.isfinite(np.concatenate([m, s]))):
            raise DomainError("stds must be positive and all parameters finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def k(self) -> int:
        return self.weights.size

    def components(self, x) -> np.ndarray:
        """Unweighted component densities, shape ``(len(x), k)``."""
        z = (np.atleast_1d(np.asarray(x, dtype=float))[:, None] - self.means) / self.stds
        return np.exp(-0.5 * z * z) / (self.stds * SQRT_2PI)

    def density(self, x) -> np.ndarray:
        return self.components(x) @ self.weights

    def sample(self, n: int, rng) -> np.ndarray:
        idx = rng.choice(self.k, size=n, p=self.weights)
        return self.means[idx] + self.stds[idx] * rng.standard_normal(n)

    def theta(self) -> np.ndarray:
        return np.concatenate([np.log(self.weights), self.means, np.log(self.stds)])

    @classmethod
    def from_theta(cls, theta) -> "Gmm1D":
        theta = np.asarray(theta, dtype=float)
        k = theta.size // 3
        logits, means, log_stds = theta[:k], theta[k:2 * k], theta[2 * k:]
        w = np.exp(logits - logits.max())
        return cls(w / w.sum(), means.copy(), np.exp(log_stds))

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist()}


def gmm_density(model: Gmm1D, x):
    """Mixture density; a scalar for scalar ``x``."""
    d = model.density(x)
    return float(d[0]) if np.ndim(x) == 0 else d


def canonical_expert(sigma: float = 0.6) -> Gmm1D:
    return Gmm1D(np.full(3, 1 / 3), np.array([-4.0, 0.0, 4.0]), np.full(3, sigma))


def canonical_target(sigma: float = 0.6) -> Gmm1D:
    return Gmm1D(np.full(2, 0.5), np.array([-4.0, 0.0]), np.full(2, sigma))


# -- void region --------------------------------------------------------------

def quadrature_grid(*models: Gmm1D, n: int = 4096) -> np.ndarray:
    lo = min(m.means.min() for m in models)
    hi = max(m.means.max() for m in models)
    s = max(m.stds.max() for m in models)
    return np.linspace(lo - 6 * s, hi + 6 * s, n)


def void_region(expert: Gmm1D, initial_target: Gmm1D, eps: float, grid: np.ndarray) -> np.ndarray:
    """Boolean mask of grid points where neither model has density ``>= eps``."""
    if eps <= 0:
        raise DomainError("eps must be positive")
    return (expert.density(grid) < eps) & (initial_target.density(grid) < eps)


def void_mass(target: Gmm1D, expert: Gmm1D, initial_target: Gmm1D, eps: float = 2e-3, n: int = 4096) -> float:
    grid = quadrature_grid(expert, initial_target, n=n)
    mask = void_region(expert, initial_target, eps, grid)
    return float(np.trapezoid(target.density(grid) * mask, grid))


# -- per-sample loss and gradient ----------------------------------------------

def _threshold(objective: str, alpha_c: float | None) -> float:
    if objective not in OBJECTIVES:
        raise DomainError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if objective == "sft":
        return 0.0
    if alpha_c is None or alpha_c <= 0:
        raise DomainError("trsft needs a positive alpha_c")
    return alpha_c


def sample_loss(theta, y, objective: str = "sft", alpha_c: float | None = None) -> np.ndarray:
    """Per-sample loss at samples ``y``."""
    a = _threshold(objective, alpha_c)
    q = Gmm1D.from_theta(theta).density(y)
    if a == 0.0:
        return -np.log(q)
    return np.where(q < a, -q / a + 1.0 - np.log(a), -np.log(np.maximum(q, a)))


def sample_loss_grad(theta, y, objective: str = "sft", alpha_c: float | None = None) -> np.ndarray:
    """Per-sample gradients with respect to ``theta``, shape ``(len(y), 3k)``."""
    a = _threshold(objective, alpha_c)
    model = Gmm1D.from_theta(theta)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    comp = model.components(y)
    w, m, s = model.weights, model.means, model.stds
    q = comp @ w
    wc = comp * w
    u = (y[:, None] - m) / s
    dq = np.concatenate([
        w * (comp - q[:, None]),       # logits
        wc * u / s,                    # means
        wc * (u * u - 1.0),            # log stds
    ], axis=1)
    coef = -1.0 / np.maximum(q, a) if a > 0 else -1.0 / q
    return coef[:, None] * dq


# -- training -------------------------------------------------------------------

@dataclass
class MimicTrace:
    objective: str
    seed: int
    alpha_c: float | None
    eps: float
    steps: np.ndarray
    kl: np.ndarray
    void_mass: np.ndarray
    snapshots: dict = field(default_factory=dict)

    def records(self):
        for t, k, v in zip(self.steps, self.kl, self.void_mass):
            yield int(t), float(k), float(v)

    @property
    def peak_void_mass(self) -> float:
        return float(self.void_mass.max())


def train_mimic(
    expert: Gmm1D,
    target_init: Gmm1D,
    objective: str = "sft",
    steps: int = 1000,
    lr: float = 0.2,
    batch: int = 256,
    seed: int = 0,
    alpha_c_ratio: float = 0.1,
    alpha_c: float | None = None,
    eps: float = 2e-3,
    kl_samples: int = 4096,
    snapshot_steps=(0, 50, 100, 1000),
) -> MimicTrace:
    """Stochastic gradient descent on the per-sample loss with expert samples.

    The KL estimate uses one fixed set of ``kl_samples`` expert draws for
    the whole run.  Sample streams do not depend on the objective, so SFT
    and TrSFT runs with the same seed see the same data.
    """
    if objective not in OBJECTIVES:
        raise DomainError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if steps < 0 or batch < 1 or lr <= 0:
        raise DomainError("need steps >= 0, batch >= 1 and lr > 0")
    grid = quadrature_grid(expert, target_init)
    if objective == "trsft" and alpha_c is None:
        alpha_c = alpha_c_ratio * float(target_init.density(grid).max())
    a = alpha_c if objective == "trsft" else None
    mask = void_region(expert, target_init, eps, grid)

    rng = np.random.default_rng(seed)
    ev = expert.sample(kl_samples, rng)
    log_pe = np.log(expert.density(ev))

    theta = target_init.theta()
    kl, vm, snaps = np.empty(steps + 1), np.empty(steps + 1), {}
    for t in range(steps + 1):
        model = Gmm1D.from_theta(theta)
        kl[t] = np.mean(log_pe - np.log(model.density(ev)))
        vm[t] = np.trapezoid(model.density(grid) * mask, grid)
        if t in snapshot_steps:
            snaps[t] = model
        if t == steps:
            break
        y = expert.sample(batch, rng)
        theta = theta - lr * sample_loss_grad(theta, y, objective, a).mean(axis=0)
        if not np.all(np.isfinite(theta)):
            raise DivergenceDetected(f"non-finite GMM parameters after step {t}", t)
    return MimicTrace(objective, seed, a, eps, np.arange(steps + 1), kl, vm, snaps)
