"""Distillation regularizer over pairwise representation geometry.

Teacher and student representations of the same batch are each turned into a
b x b conditional-probability matrix: entry [i, j] is the probability of
sample i given sample j under a Gaussian kernel density over the batch,
normalized over the column excluding the diagonal. The regularizer is the
KL divergence KL(teacher || student) summed over those conditionals; its
gradient w.r.t. the student representations is available in closed form.

Conditional matrices are plain float64 arrays with zero diagonal and columns
summing to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KdConfig:
    """Regularizer settings: weight (lambda), bandwidth policy, log floor.

    ``bandwidth=None`` selects the adaptive policy: the median pairwise
    distance of the teacher representations of each batch, resolved by the
    caller via :func:`adaptive_bandwidth`.
    """

    weight: float = 1.0
    bandwidth: float | None = None
    floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError("regularizer weight must be >= 0")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be > 0")
        if self.floor <= 0:
            raise ValueError("probability floor must be > 0")


def _sq_dists(reps: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", reps, reps)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (reps @ reps.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def adaptive_bandwidth(reps: np.ndarray) -> float:
    """Median pairwise Euclidean distance; 1.0 when the batch is degenerate."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.shape[0] < 2:
        return 1.0
    d2 = _sq_dists(reps)
    iu = np.triu_indices(reps.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def resolve_bandwidth(reps: np.ndarray, config: KdConfig) -> float:
    """Bandwidth for a batch: the fixed value, or adaptive from these reps."""
    if config.bandwidth is not None:
        return config.bandwidth
    return adaptive_bandwidth(reps)


def pairwise_conditional(
    representations: np.ndarray,
    config: KdConfig | None = None,
    *,
    bandwidth: float | None = None,
) -> np.ndarray:
    """Conditional matrix of a batch: [i, j] = K_h(x_i, x_j) / sum_{k != j} K_h(x_k, x_j).

    The kernel is exp(-||a - b||^2 / (2 h^2)). An explicit ``bandwidth``
    overrides the config policy; this is how the teacher's bandwidth is
    reused for the student matrix of the same batch.
    """
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2:
        raise ValueError("representations must be a 2-D batch matrix")
    b = reps.shape[0]
    if b < 2:
        raise ValueError("conditional matrix needs a batch of at least 2 samples")
    if bandwidth is None:
        bandwidth = resolve_bandwidth(reps, config or KdConfig())
    log_k = -_sq_dists(reps) / (2.0 * bandwidth * bandwidth)
    # Shift each column by its off-diagonal max so a column never underflows
    # to all zeros; the shift cancels in the normalization.
    np.fill_diagonal(log_k, -np.inf)
    k = np.exp(log_k - log_k.max(axis=0, keepdims=True))
    return k / k.sum(axis=0, keepdims=True)


def kd_loss(teacher: np.ndarray, student: np.ndarray, floor: float = 1e-12) -> float:
    """KL(teacher || student) summed over off-diagonal conditionals.

    Terms with zero teacher mass contribute nothing; the floor is applied
    inside the logarithms only.
    """
    q = np.asarray(teacher, dtype=np.float64)
    p = np.asarray(student, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError("teacher and student must be equal square matrices")
    mask = q > 0
    np.fill_diagonal(mask, False)
    qm = q[mask]
    pm = np.maximum(p[mask], floor)
    return float(np.sum(qm * (np.log(np.maximum(qm, floor)) - np.log(pm))))


def kd_grad(
    teacher: np.ndarray,
    student_reps: np.ndarray,
    config: KdConfig | None = None,
    *,
    bandwidth: float | None = None,
) -> np.ndarray:
    """Gradient of the KL regularizer w.r.t. the student representations.

    ``bandwidth`` must be the same value used to build the student's
    conditional matrix; with the adaptive policy the caller resolves it from
    the teacher representations first (the bandwidth is a constant of the
    batch, not a function of the student).

    This is the exact gradient of the unfloored divergence. It matches the
    floored loss as long as no student conditional with teacher mass sits at
    the floor, which holds whenever the two geometries are commensurate (in
    training the student starts each round at the teacher).
    """
    reps = np.asarray(student_reps, dtype=np.float64)
    q = np.asarray(teacher, dtype=np.float64)
    if reps.ndim != 2 or q.shape != (reps.shape[0], reps.shape[0]):
        raise ValueError("teacher matrix must be b x b for the b given representations")
    if reps.shape[0] < 3:
        return np.zeros_like(reps)
    config = config or KdConfig()
    if bandwidth is None:
        if config.bandwidth is None:
            raise ValueError(
                "adaptive bandwidth must be resolved by the caller and passed in"
            )
        bandwidth = config.bandwidth
    p = pairwise_conditional(reps, bandwidth=bandwidth)
    c = (q + q.T) - (p + p.T)
    np.fill_diagonal(c, 0.0)
    return (c.sum(axis=1)[:, None] * reps - c @ reps) / (bandwidth * bandwidth)
