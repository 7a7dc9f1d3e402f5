"""Closed-form minimizer of the trust-region divergence over the simplex.

For an expert distribution ``p`` and threshold ``alpha`` the minimizer keeps
every symbol with ``p(c) > alpha * lam`` (rescaled by ``1/lam``) and zeroes
the rest, where ``lam`` solves ``lam = kept_mass(p, alpha, lam)``.  Because
``kept_mass`` is a step function of ``lam`` the fixed point is found by an
exact scan over its breakpoints ``p(c)/alpha``.  When the diagonal is only
crossed at a jump, the symbols sitting exactly on the threshold absorb the
leftover mass; any split in ``[0, alpha]`` is optimal and we split evenly.

``brute_force_endpoint`` solves the same problem numerically and shares no
code with the scan, so the two can check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trapolab.dist import Categorical, DistLike, as_categorical, ell_alpha_grad_array, trsft_divergence
from trapolab.errors import DomainError, NonConvergence

_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class FixedPointSolution:
    lam: float
    kept: tuple
    optimal: Categorical
    boundary: tuple
    residual_mass: float
    is_fixed_point: bool

    @property
    def in_open_interval(self) -> bool:
        """Whether ``lam`` is a genuine fixed point strictly inside (0, 1)."""
        return self.is_fixed_point and 0.0 < self.lam < 1.0


def _check(alpha: float, lam: float | None = None) -> None:
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    if lam is not None and not 0.0 < lam <= 1.0:
        raise DomainError(f"lambda must lie in (0, 1], got {lam}")


def kept_mass(p: DistLike, alpha: float, lam: float) -> float:
    """Total expert mass on symbols with ``p(c) > alpha * lam``."""
    _check(alpha, lam)
    probs = as_categorical(p).probs
    return float(probs[probs > alpha * lam].sum())


def _group_breakpoints(values: np.ndarray) -> list:
    """Sorted distinct breakpoints; near-equal floats are merged."""
    groups: list = []
    for v in np.sort(values):
        if groups and abs(v - groups[-1]) <= _TIE_RTOL * max(1.0, v):
            continue
        groups.append(float(v))
    return groups


def solve_lambda(p: DistLike, alpha: float) -> FixedPointSolution:
    _check(alpha)
    dist = as_categorical(p)
    probs = dist.probs
    positive = np.flatnonzero(probs > 0)
    bp = probs / alpha  # symbol c is kept iff lam < bp[c]

    def kept_at(lam):
        # symbols whose breakpoint lies strictly beyond lam (ties excluded)
        tol = _TIE_RTOL * max(1.0, lam)
        return [int(c) for c in positive if bp[c] > lam + tol]

    def on_threshold(lam):
        tol = _TIE_RTOL * max(1.0, lam)
        return [int(c) for c in positive if abs(bp[c] - lam) <= tol]

    # On [edges[j], edges[j+1]) the kept set is constant.  kept_mass - lam
    # decreases along the scan, so the first interval holding its own kept
    # mass, or the first jump across the diagonal, is the unique solution.
    lam = None
    is_fixed = False
    edges = [0.0] + _group_breakpoints(bp[positive])
    for j, lo in enumerate(edges):
        hi = edges[j + 1] if j + 1 < len(edges) else np.inf
        mass = float(probs[kept_at(lo)].sum())
        if mass > 0 and lo <= mass < hi:
            lam, is_fixed = mass, True
            break
        if hi <= 1.0 and mass >= hi and float(probs[kept_at(hi)].sum()) < hi:
            lam = hi
            break
    if lam is None:  # pragma: no cover - the scan always finds a crossing
        raise RuntimeError("breakpoint scan failed to bracket the fixed point")

    kept = kept_at(lam)
    boundary = on_threshold(lam)
    optimal = np.zeros_like(probs)
    optimal[kept] = probs[kept] / lam
    residual = max(0.0, 1.0 - float(optimal.sum()))
    if boundary and residual > 0:
        optimal[boundary] = residual / len(boundary)
    elif residual > 1e-12:  # pragma: no cover
        raise RuntimeError(f"residual mass {residual} with no boundary symbols")
    optimal /= optimal.sum()
    return FixedPointSolution(
        lam=float(lam),
        kept=tuple(kept),
        optimal=Categorical(optimal),
        boundary=tuple(boundary),
        residual_mass=float(residual),
        is_fixed_point=is_fixed,
    )


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def brute_force_endpoint(
    p: DistLike,
    alpha: float,
    iters: int = 200_000,
    step: float | None = None,
    tol: float = 1e-8,
) -> Categorical:
    """Minimize the trust-region divergence over the simplex by projected
    gradient descent with backtracking.

    ``step`` is the smallest step ever taken (default ``alpha**2``, the
    inverse of the global curvature bound, so it always descends).  Each
    iteration first tries twice the last accepted step and halves toward
    that floor until the sufficient-decrease condition holds on the
    projection arc.  Stops when the unit-step gradient mapping
    ``||q - P(q - grad)||`` falls below ``tol``.
    """
    _check(alpha)
    pp = as_categorical(p).probs
    q = np.full(pp.size, 1.0 / pp.size)
    t_min = alpha**2 if step is None else step
    t = t_min

    def f(x):
        return trsft_divergence(pp, x, alpha)

    def grad(x):
        return pp * ell_alpha_grad_array(np.clip(x, 0.0, 1.0), alpha)

    fq = f(q)
    res = np.inf
    for _ in range(iters):
        g = grad(q)
        res = float(np.linalg.norm(q - project_simplex(q - g)))
        if res <= tol:
            return Categorical(q / q.sum())
        t = min(2.0 * t, 1e6)
        while True:
            cand = project_simplex(q - t * g)
            fc = f(cand)
            if t <= t_min or fc <= fq + g @ (cand - q) + 0.5 / t * np.sum((cand - q) ** 2):
                break
            t = max(0.5 * t, t_min)
        q, fq = cand, fc
    raise NonConvergence(
        f"projected gradient stopped after {iters} iterations, mapping norm {res:.3e}",
        iterate=Categorical(q / q.sum()),
        residual=res,
    )
