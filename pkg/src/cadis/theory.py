"""Desk-scale numerical checks of the coverage-time and convergence claims.

Two independent questions are answered here, away from the simulator:

* how many communication rounds are expected until every client has
  participated at least once, for uniform k-of-n sampling — via an exact
  absorbing-chain recursion, a closed-form upper bound, and a Monte Carlo
  oracle;
* where cluster-balanced vs. plain averaging converge on quadratic client
  losses, and how the two limits compare under the cluster-balanced global
  objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb, sqrt
from statistics import NormalDist

import numpy as np

_Z99 = NormalDist().inv_cdf(0.995)  # two-sided 99%


def _check_nk(n: int, k: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")


def expected_rounds_bound(n: int, k: int) -> float:
    """Upper bound 1 + sum_{i=k}^{n-1} C(n,k) / (C(n,k) - C(i,k)), exactly evaluated."""
    _check_nk(n, k)
    total_subsets = comb(n, k)
    acc = Fraction(1)
    for i in range(k, n):
        acc += Fraction(total_subsets, total_subsets - comb(i, k))
    return float(acc)


def expected_rounds_exact(n: int, k: int) -> float:
    """Expected rounds to full coverage, solved from the Markov recursion.

    State i = "i clients seen so far". A round moves i to k + j with
    probability C(n-i, k+j-i) C(i, i-j) / C(n,k); the self-loop term is
    isolated analytically and the chain solved backward from the absorbing
    state. Arithmetic is exact rational; only the result is a float.
    """
    _check_nk(n, k)
    total = comb(n, k)
    expect: dict[int, Fraction] = {n: Fraction(0)}
    for i in range(n - 1, k - 1, -1):
        acc = Fraction(1)
        for j in range(max(i - k, 0) + 1, i + 1):
            new = k + j - i
            if new > n - i:
                continue
            a_ij = Fraction(comb(n - i, new) * comb(i, i - j), total)
            acc += a_ij * expect[k + j]
        self_loop = Fraction(comb(i, k), total)
        expect[i] = acc / (1 - self_loop)
    return float(1 + expect[k])


def expected_rounds_mc(
    n: int, k: int, trials: int, seed: int
) -> tuple[float, float]:
    """Monte Carlo mean rounds to full coverage and 99% CI half-width."""
    _check_nk(n, k)
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(seed)
    rounds = np.zeros(trials, dtype=np.int64)
    covered = np.zeros((trials, n), dtype=bool)
    active = np.arange(trials)
    r = 0
    while active.size:
        r += 1
        # k smallest of n uniforms per row = a uniform k-subset per trial
        picks = np.argpartition(rng.random((active.size, n)), k - 1, axis=1)[:, :k]
        covered[active[:, None], picks] = True
        done = covered[active].all(axis=1)
        rounds[active[done]] = r
        active = active[~done]
    mean = float(rounds.mean())
    if trials == 1:
        return mean, float("inf")
    half = _Z99 * float(rounds.std(ddof=1)) / sqrt(trials)
    return mean, half


@dataclass(frozen=True)
class QuadraticClient:
    """Client loss f(z) = a z^2 + b z with a cluster tag."""

    a: float
    b: float
    cluster: int = 0

    def __post_init__(self) -> None:
        if self.a <= 0:
            raise ValueError("quadratic coefficient a must be > 0")

    def loss(self, z: float) -> float:
        return self.a * z * z + self.b * z


def _contraction(clients: list[QuadraticClient], lr: float, steps: int) -> np.ndarray:
    factors = np.array([(1.0 - 2.0 * c.a * lr) for c in clients])
    if np.any(np.abs(factors) >= 1.0):
        raise ValueError(
            "learning rate violates the contraction condition |1 - 2 a lr| < 1"
        )
    return factors**steps


def scheme_weights(clients: list[QuadraticClient], scheme: str) -> np.ndarray:
    """Per-client aggregation weights: uniform, or cluster-balanced."""
    m = len(clients)
    if scheme == "fedavg":
        return np.full(m, 1.0 / m)
    if scheme == "cadis":
        tags = [c.cluster for c in clients]
        size = {t: tags.count(t) for t in set(tags)}
        w = np.array([1.0 / size[t] for t in tags])
        return w / w.sum()
    raise ValueError(f"unknown scheme {scheme!r}")


def quadratic_trajectory(
    clients: list[QuadraticClient],
    lr: float,
    steps: int,
    rounds: int,
    scheme: str,
    z0: float = 0.0,
) -> np.ndarray:
    """Global iterate sequence Z^0..Z^rounds under exact local gradient steps.

    Each round, every client runs `steps` exact gradient steps on its own
    quadratic from the global point, contracting by phi = (1 - 2 a lr)^steps
    toward its own minimum; the results are aggregated with the scheme's
    weights.
    """
    phi = _contraction(clients, lr, steps)
    offset = np.array([c.b / (2.0 * c.a) for c in clients]) * (1.0 - phi)
    w = scheme_weights(clients, scheme)
    traj = np.empty(rounds + 1)
    traj[0] = z0
    z = z0
    for t in range(rounds):
        z = float(w @ (phi * z - offset))
        traj[t + 1] = z
    return traj


def fixed_point(
    clients: list[QuadraticClient], lr: float, steps: int, scheme: str
) -> float:
    """Closed-form limit of the round map (unique since |sum w phi| < 1)."""
    phi = _contraction(clients, lr, steps)
    offset = np.array([c.b / (2.0 * c.a) for c in clients]) * (1.0 - phi)
    w = scheme_weights(clients, scheme)
    return float(-(w @ offset) / (1.0 - w @ phi))


def global_objective(z: float, clients: list[QuadraticClient]) -> float:
    """Cluster-balanced objective: clusters weighted equally, split inside."""
    tags = [c.cluster for c in clients]
    clusters = sorted(set(tags))
    total = 0.0
    for t in clusters:
        members = [c for c in clients if c.cluster == t]
        total += sum(c.loss(z) for c in members) / (len(members) * len(clusters))
    return total
