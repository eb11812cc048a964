"""Server-side client similarity tracking and threshold clustering.

The server keeps a cumulative cosine-similarity matrix S over clients, built
from the improvements of their classifier (penultimate) matrices relative to
the round-start global model. Pairs that co-occur in a round contribute a
direct observation; pairs that do not can be estimated transitively through
shared pivots. A min-max rescaled copy (the Q-matrix) is thresholded to form
clusters as connected components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

_NORM_EPS = 1e-12


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two flattened arrays; 0.0 when either norm is ~0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _NORM_EPS or nb < _NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def instance_similarity(w_i: np.ndarray, w_j: np.ndarray, w_g: np.ndarray) -> float:
    """Cosine similarity of two clients' classifier improvements over the global."""
    w_i, w_j, w_g = (np.asarray(m, dtype=np.float64) for m in (w_i, w_j, w_g))
    if w_i.shape != w_g.shape or w_j.shape != w_g.shape:
        raise ValueError("classifier matrices must share one shape")
    return cosine(w_i - w_g, w_j - w_g)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Clustering threshold ramped linearly from start to max over `ramp` rounds."""

    start: float = 0.5
    maximum: float = 0.975
    ramp: int = 50

    def __post_init__(self) -> None:
        if self.ramp < 1:
            raise ValueError("ramp length must be >= 1")

    def value(self, t: int) -> float:
        if t < 0:
            raise ValueError("round index must be >= 0")
        return min(self.maximum, self.start + t * (self.maximum - self.start) / self.ramp)


@dataclass(frozen=True)
class TransitiveConfig:
    enabled: bool = True
    gamma: float = 0.2


@dataclass
class SimilarityState:
    """Cumulative similarity S, co-occurrence counts F, rescaled Q, round counter."""

    n: int
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    transitive: TransitiveConfig = field(default_factory=TransitiveConfig)
    similarity: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    q: np.ndarray = field(init=False)
    t: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("need at least one client")
        self.similarity = np.eye(self.n)
        self.counts = np.zeros((self.n, self.n), dtype=np.int64)
        self.q = np.zeros((self.n, self.n))

    def _record(self, i: int, j: int, value: float) -> None:
        f = self.counts[i, j]
        s = (f / (f + 1)) * self.similarity[i, j] + value / (f + 1)
        self.similarity[i, j] = self.similarity[j, i] = s
        self.counts[i, j] = self.counts[j, i] = f + 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.t,
                "similarity": self.similarity.tolist(),
                "counts": self.counts.tolist(),
                "q": self.q.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(
        cls,
        blob: str,
        schedule: ThresholdSchedule | None = None,
        transitive: TransitiveConfig | None = None,
    ) -> "SimilarityState":
        doc = json.loads(blob)
        sim = np.asarray(doc["similarity"], dtype=np.float64)
        state = cls(
            n=sim.shape[0],
            schedule=schedule or ThresholdSchedule(),
            transitive=transitive or TransitiveConfig(),
        )
        state.similarity = sim
        state.counts = np.asarray(doc["counts"], dtype=np.int64)
        state.q = np.asarray(doc["q"], dtype=np.float64)
        state.t = int(doc["round"])
        return state


def update_similarity(
    state: SimilarityState,
    participants: list[int],
    classifiers: list[np.ndarray],
    global_classifier: np.ndarray,
) -> SimilarityState:
    """Fold this round's pairwise instance similarities into the cumulative matrix.

    Each co-occurring pair gets s <- (f/(f+1)) s + (1/(f+1)) s_t with f the
    pre-update co-occurrence count, then f is incremented.
    """
    if len(participants) < 2:
        raise ValueError("similarity update needs at least two participants")
    if len(classifiers) != len(participants):
        raise ValueError("one classifier matrix per participant required")
    diffs = [np.asarray(w, dtype=np.float64).ravel() - np.asarray(global_classifier).ravel()
             for w in classifiers]
    norms = [np.linalg.norm(d) for d in diffs]
    for (a, i), (b, j) in combinations(enumerate(participants), 2):
        if norms[a] < _NORM_EPS or norms[b] < _NORM_EPS:
            s_t = 0.0
        else:
            s_t = float(np.clip(diffs[a] @ diffs[b] / (norms[a] * norms[b]), -1.0, 1.0))
        state._record(i, j, s_t)
    return state


def transitive_fill(
    state: SimilarityState,
    participants: list[int],
    rng: np.random.Generator,
) -> SimilarityState:
    """Estimate similarities of pairs that did not co-occur this round.

    For a pair (i, j), every pivot p observed against both sides implies a
    Gaussian estimate with mean s_ip * s_jp and deviation
    sqrt((1 - s_ip^2)(1 - s_jp^2)) / 3; pivots whose deviation is below gamma
    qualify. One draw per qualifying pivot is clamped to [-1, 1] and the
    average is recorded through the same cumulative rule as a real
    observation. Pairs without qualifying pivots are left untouched.
    """
    if not state.transitive.enabled:
        return state
    gamma = state.transitive.gamma
    in_round = np.zeros(state.n, dtype=bool)
    in_round[list(participants)] = True
    # Snapshot so that estimates made within this round feed neither each
    # other's pivots nor their deviations.
    observed = state.counts > 0
    s = state.similarity.copy()
    dev_sq = np.maximum(1.0 - s * s, 0.0)  # per-entry (1 - s^2), >= 0

    for i in range(state.n):
        for j in range(i + 1, state.n):
            if in_round[i] and in_round[j]:
                continue
            usable = observed[i] & observed[j]
            usable[i] = usable[j] = False
            if not usable.any():
                continue
            sigma = np.sqrt(dev_sq[i, usable] * dev_sq[j, usable]) / 3.0
            ok = sigma < gamma
            if not ok.any():
                continue
            means = s[i, usable][ok] * s[j, usable][ok]
            draws = rng.normal(means, sigma[ok])
            estimate = float(np.mean(np.clip(draws, -1.0, 1.0)))
            state._record(i, j, estimate)
    return state


def rescale_q(state: SimilarityState) -> SimilarityState:
    """Min-max rescale the observed similarities into the Q-matrix.

    Unobserved pairs get q = 0; if all observed similarities are equal they
    all map to 1. No-op (all-zero Q) while nothing has been observed yet.
    """
    observed = state.counts > 0
    np.fill_diagonal(observed, False)
    q = np.zeros_like(state.q)
    np.fill_diagonal(q, 1.0)
    if observed.any():
        vals = state.similarity[observed]
        lo, hi = vals.min(), vals.max()
        if hi > lo:
            q[observed] = (state.similarity[observed] - lo) / (hi - lo)
        else:
            q[observed] = 1.0
    state.q = q
    return state


def epsilon(state: SimilarityState, t: int) -> float:
    """Clustering threshold for round t."""
    return state.schedule.value(t)


@dataclass
class ClusterAssignment:
    """Partition of all clients into clusters for one round."""

    round: int
    labels: np.ndarray  # labels[client] = cluster id, ids dense from 0

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.labels.size

    def cluster_of(self, client: int) -> int:
        return int(self.labels[client])

    def member_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(k) for c, k in zip(ids, counts)}

    def participant_counts(self, participants: list[int]) -> dict[int, int]:
        """Members per cluster counting only this round's participants."""
        counts: dict[int, int] = {}
        for p in participants:
            c = int(self.labels[p])
            counts[c] = counts.get(c, 0) + 1
        return counts


def cluster(state: SimilarityState, t: int) -> ClusterAssignment:
    """Connected components of the graph {q_ij >= epsilon_t}."""
    eps = epsilon(state, t)
    adj = state.q >= eps
    np.fill_diagonal(adj, False)
    labels = np.full(state.n, -1, dtype=np.int64)
    next_id = 0
    for start in range(state.n):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = next_id
        while stack:
            u = stack.pop()
            for w in np.flatnonzero(adj[u]):
                if labels[w] < 0:
                    labels[w] = next_id
                    stack.append(int(w))
        next_id += 1
    return ClusterAssignment(round=t, labels=labels)


def pairwise_agreement(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of client pairs whose same/different-cluster relation matches."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValueError("need two equal-length label vectors")
    n = predicted.size
    if n < 2:
        return 1.0
    same_pred = predicted[:, None] == predicted[None, :]
    same_true = truth[:, None] == truth[None, :]
    iu = np.triu_indices(n, k=1)
    return float(np.mean(same_pred[iu] == same_true[iu]))


def ideal_q(truth: np.ndarray) -> np.ndarray:
    """The Q-matrix a perfect similarity estimator would produce: 1 within, 0 across."""
    truth = np.asarray(truth)
    q = (truth[:, None] == truth[None, :]).astype(np.float64)
    return q


def q_matrix_mse(q: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared off-diagonal distance between Q and the ideal matrix."""
    q = np.asarray(q, dtype=np.float64)
    ideal = ideal_q(truth)
    iu = np.triu_indices(q.shape[0], k=1)
    return float(np.mean((q[iu] - ideal[iu]) ** 2))
