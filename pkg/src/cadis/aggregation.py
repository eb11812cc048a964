"""Aggregation weights and weighted model averaging.

The cluster-balanced weight of a participant is its sample count divided by
the size of its cluster, then normalized across the round's participants.
Dividing additionally by the total sample count, as the raw formula does,
cancels in the normalization and is therefore skipped; this also makes the
all-singleton case agree bit for bit with the plain sample-proportional
weights.
"""

from __future__ import annotations

from .nn import ModelParams
from .similarity import ClusterAssignment


def _normalize(participants: list[int], raw: list[float]) -> dict[int, float]:
    total = 0.0
    for a in raw:
        total += a
    return {p: a / total for p, a in zip(participants, raw)}


def fedavg_weights(sample_counts: dict[int, int]) -> dict[int, float]:
    """Weights proportional to sample counts, in the mapping's iteration order."""
    participants = list(sample_counts)
    if not participants:
        raise ValueError("no participants to weight")
    if any(sample_counts[p] < 1 for p in participants):
        raise ValueError("sample counts must be >= 1")
    return _normalize(participants, [float(sample_counts[p]) for p in participants])


def cadis_weights(
    assignment: ClusterAssignment,
    sample_counts: dict[int, int],
    count_all_members: bool = False,
) -> dict[int, float]:
    """Cluster-balanced weights: n_i / M_i, normalized over the participants.

    M_i is the number of round participants sharing i's cluster; with
    ``count_all_members`` it is instead the cluster's full cardinality over
    all clients.
    """
    participants = list(sample_counts)
    if not participants:
        raise ValueError("no participants to weight")
    if any(sample_counts[p] < 1 for p in participants):
        raise ValueError("sample counts must be >= 1")
    if count_all_members:
        sizes = assignment.member_counts()
    else:
        sizes = assignment.participant_counts(participants)
    raw = [
        float(sample_counts[p]) / sizes[assignment.cluster_of(p)] for p in participants
    ]
    return _normalize(participants, raw)


def aggregate(models: list[ModelParams], weights: list[float]) -> ModelParams:
    """Convex combination of parameter vectors, in list order."""
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(weights):
        raise ValueError("one weight per model required")
    shape = models[0].shape
    for m in models[1:]:
        if m.shape != shape:
            raise ValueError("all models must share one shape")
    acc = weights[0] * models[0].vector
    for w, m in zip(weights[1:], models[1:]):
        acc += w * m.vector
    return ModelParams(shape, acc)
