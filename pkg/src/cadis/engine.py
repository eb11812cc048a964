"""Communication-round orchestration.

A round samples k of the n clients, trains each locally from the round-start
global model (cross-entropy plus the optional distillation regularizer toward
that same frozen model), updates the server's similarity state from the
classifier improvements, clusters, aggregates with the scheme's weights, and
evaluates on the held-out test set.

All randomness is drawn from streams derived from the master seed with
counter-style spawn keys (domain, round, client), so results do not depend on
the order in which local trainings execute.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .aggregation import aggregate, cadis_weights, fedavg_weights
from .data import (
    ClientShard,
    Dataset,
    PartitionSpec,
    load_idx,
    partition,
    synth_blobs,
    truth_labels,
)
from .kd import KdConfig, kd_grad, kd_loss, pairwise_conditional, resolve_bandwidth
from .nn import ModelParams, NetworkShape, cross_entropy, init_params, penultimate
from .similarity import (
    ClusterAssignment,
    SimilarityState,
    ThresholdSchedule,
    TransitiveConfig,
    cluster,
    pairwise_agreement,
    q_matrix_mse,
    rescale_q,
    transitive_fill,
    update_similarity,
)

ALGORITHMS = ("cadis", "fedavg", "cadis-no-kd", "fedavg-kd")

# Spawn-key domains for deterministic stream derivation.
_DOM_INIT = 0
_DOM_SAMPLE = 1
_DOM_LOCAL = 2
_DOM_TRANSITIVE = 3


def derived_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Stream keyed by (domain, ...) counters; independent of call order."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


@dataclass(frozen=True)
class SyntheticData:
    """Gaussian-blob stand-in dataset, generated on the fly."""

    classes: int = 10
    dims: int = 20
    per_class: int = 300
    test_per_class: int = 50
    spread: float = 0.05
    seed: int = 2023


@dataclass(frozen=True)
class IdxData:
    """IDX image/label file quadruple (e.g. the standard MNIST files)."""

    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticData | IdxData
    partition: PartitionSpec
    shape: NetworkShape
    rounds: int
    participants: int
    local_epochs: int = 5
    batch_size: int = 8
    learning_rate: float = 0.001
    kd: KdConfig = field(default_factory=KdConfig)
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    transitive: TransitiveConfig = field(default_factory=TransitiveConfig)
    count_all_members: bool = False
    algorithm: str = "cadis"
    seed: int = 0
    target_accuracy: float | None = None
    snapshot_every: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 1 <= self.participants <= self.partition.clients:
            raise ValueError("participants per round must be in 1..clients")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local epochs and batch size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.rounds < 0:
            raise ValueError("round count must be >= 0")

    @property
    def clients(self) -> int:
        return self.partition.clients

    @property
    def uses_clustering(self) -> bool:
        return self.algorithm in ("cadis", "cadis-no-kd")

    @property
    def effective_lambda(self) -> float:
        if self.algorithm in ("fedavg", "cadis-no-kd"):
            return 0.0
        return self.kd.weight


@dataclass
class RoundMetrics:
    round: int
    top1: float
    recalls: np.ndarray
    weights: dict[int, float]
    cluster_recovery: float
    q_mse: float
    mean_local_loss: float


@dataclass
class RunState:
    config: ExperimentConfig
    train: Dataset
    test: Dataset
    shards: list[ClientShard]
    truth: np.ndarray
    global_params: ModelParams
    sim_state: SimilarityState | None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    initial_top1: float
    final_params: ModelParams
    sim_state: SimilarityState | None
    truth: np.ndarray
    final_assignment: ClusterAssignment | None


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) pair for the configured source."""
    d = config.data
    if isinstance(d, SyntheticData):
        train = synth_blobs(d.classes, d.dims, d.per_class, d.spread, d.seed)
        test = synth_blobs(d.classes, d.dims, d.test_per_class, d.spread, d.seed + 1)
        return train, test
    train = load_idx(d.train_images, d.train_labels)
    test = load_idx(d.test_images, d.test_labels)
    return train, test


def build_state(config: ExperimentConfig) -> RunState:
    train, test = load_data(config)
    if train.dim != config.shape.input_dim or train.classes != config.shape.classes:
        raise ValueError(
            f"network shape ({config.shape.input_dim} in / {config.shape.classes} "
            f"classes) does not match dataset ({train.dim} / {train.classes})"
        )
    shards = partition(train, config.partition)
    params = init_params(config.shape, derived_rng(config.seed, _DOM_INIT))
    sim = None
    if config.uses_clustering:
        sim = SimilarityState(
            n=config.clients, schedule=config.schedule, transitive=config.transitive
        )
    return RunState(
        config=config,
        train=train,
        test=test,
        shards=shards,
        truth=truth_labels(shards),
        global_params=params,
        sim_state=sim,
    )


def sample_clients(n: int, k: int, rng: np.random.Generator) -> list[int]:
    """Uniform k-subset without replacement, returned sorted."""
    if k > n:
        raise ValueError("cannot sample more participants than clients")
    return sorted(int(c) for c in rng.choice(n, size=k, replace=False))


def local_train(
    global_params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> tuple[ModelParams, int, float]:
    """Local epochs of SGD on CE + lambda * KD from the frozen global teacher.

    Returns the trained parameters, the shard's sample count, and the mean
    per-batch training loss across all steps.
    """
    n_i = x.shape[0]
    if n_i < 1:
        raise ValueError("shard is empty")
    lam = config.effective_lambda
    vec = global_params.vector.copy()
    params = ModelParams(global_params.shape, vec)
    lr = config.learning_rate
    b = config.batch_size
    loss_sum = 0.0
    steps = 0
    for _epoch in range(config.local_epochs):
        order = rng.permutation(n_i)
        for start in range(0, n_i, b):
            chunk = order[start : start + b]
            bx = x[chunk]
            by = y[chunk]
            cache = nn._forward(params, bx)
            loss = cross_entropy(cache.probs, by)
            rep_extra = None
            if lam > 0 and chunk.size >= 2:
                teacher_reps = nn._forward(global_params, bx).reps
                h = resolve_bandwidth(teacher_reps, config.kd)
                teacher_cond = pairwise_conditional(teacher_reps, bandwidth=h)
                student_cond = pairwise_conditional(cache.reps, bandwidth=h)
                loss += lam * kd_loss(teacher_cond, student_cond, config.kd.floor)
                if chunk.size >= 3:
                    rep_extra = lam * kd_grad(teacher_cond, cache.reps, bandwidth=h)
            grad = nn._backward(params, cache, by, rep_extra)
            vec -= lr * grad
            loss_sum += loss
            steps += 1
    return params, n_i, loss_sum / steps


def evaluate(
    params: ModelParams, test: Dataset, chunk: int = 4096
) -> tuple[float, np.ndarray]:
    """Top-1 accuracy (percent) and the column-normalized confusion matrix.

    Entry [i, j] is the rate at which true-class-j samples are predicted as
    class i, so each column with test samples sums to 1 and the diagonal
    holds the per-class recalls.
    """
    if len(test) < 1:
        raise ValueError("test set is empty")
    v = params.shape.classes
    preds = np.empty(len(test), dtype=np.int64)
    for start in range(0, len(test), chunk):
        logits = nn._forward(params, test.x[start : start + chunk]).logits
        preds[start : start + logits.shape[0]] = logits.argmax(axis=1)
    top1 = 100.0 * float(np.mean(preds == test.y))
    confusion = np.zeros((v, v))
    np.add.at(confusion, (preds, test.y), 1.0)
    totals = confusion.sum(axis=0)
    nonzero = totals > 0
    confusion[:, nonzero] /= totals[nonzero]
    return top1, confusion


def run_round(state: RunState, t: int) -> RoundMetrics:
    cfg = state.config
    participants = sample_clients(
        cfg.clients, cfg.participants, derived_rng(cfg.seed, _DOM_SAMPLE, t)
    )
    models: list[ModelParams] = []
    counts: dict[int, int] = {}
    loss_acc = 0.0
    for p in participants:
        shard = state.shards[p]
        trained, n_i, loss = local_train(
            state.global_params,
            state.train.x[shard.indices],
            state.train.y[shard.indices],
            cfg,
            derived_rng(cfg.seed, _DOM_LOCAL, t, p),
        )
        models.append(trained)
        counts[p] = n_i
        loss_acc += loss

    assignment = None
    recovery = math.nan
    q_mse = math.nan
    if cfg.uses_clustering:
        sim = state.sim_state
        if len(participants) >= 2:
            update_similarity(
                sim,
                participants,
                [penultimate(m) for m in models],
                penultimate(state.global_params),
            )
        if cfg.transitive.enabled:
            transitive_fill(sim, participants, derived_rng(cfg.seed, _DOM_TRANSITIVE, t))
        rescale_q(sim)
        sim.t = t
        assignment = cluster(sim, t)
        weights = cadis_weights(assignment, counts, cfg.count_all_members)
        recovery = pairwise_agreement(assignment.labels, state.truth)
        q_mse = q_matrix_mse(sim.q, state.truth)
    else:
        weights = fedavg_weights(counts)

    state.global_params = aggregate(models, [weights[p] for p in participants])
    top1, confusion = evaluate(state.global_params, state.test)
    return RoundMetrics(
        round=t,
        top1=top1,
        recalls=np.diag(confusion).copy(),
        weights=weights,
        cluster_recovery=recovery,
        q_mse=q_mse,
        mean_local_loss=loss_acc / len(participants),
    )


def run_experiment(
    config: ExperimentConfig,
    snapshot_sink: Callable[[int, str], None] | None = None,
) -> ExperimentResult:
    """Run all rounds; fully reproducible from the config and master seed."""
    state = build_state(config)
    initial_top1, _ = evaluate(state.global_params, state.test)
    metrics: list[RoundMetrics] = []
    assignment = None
    for t in range(config.rounds):
        m = run_round(state, t)
        metrics.append(m)
        if (
            snapshot_sink is not None
            and state.sim_state is not None
            and config.snapshot_every > 0
            and (t + 1) % config.snapshot_every == 0
        ):
            snapshot_sink(t, state.sim_state.to_json())
    if state.sim_state is not None and config.rounds > 0:
        assignment = cluster(state.sim_state, config.rounds - 1)
    return ExperimentResult(
        config=config,
        metrics=metrics,
        initial_top1=initial_top1,
        final_params=state.global_params,
        sim_state=state.sim_state,
        truth=state.truth,
        final_assignment=assignment,
    )


def metrics_header(classes: int) -> list[str]:
    return (
        ["round", "top1"]
        + [f"r{c}" for c in range(classes)]
        + ["cluster_recovery", "qmatrix_mse", "mean_local_loss"]
    )


def metrics_to_csv(metrics: list[RoundMetrics], classes: int) -> str:
    """Stable delimited rendering using shortest round-trip float formatting."""
    lines = [",".join(metrics_header(classes))]
    for m in metrics:
        row = [str(m.round), repr(float(m.top1))]
        row += [repr(float(r)) for r in m.recalls]
        row += [
            repr(float(m.cluster_recovery)),
            repr(float(m.q_mse)),
            repr(float(m.mean_local_loss)),
        ]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def tail_stats(metrics: list[RoundMetrics], window: int = 10) -> tuple[float, float]:
    """(mean, population variance) of top-1 over the trailing window."""
    tail = np.array([m.top1 for m in metrics[-window:]], dtype=np.float64)
    if tail.size == 0:
        return math.nan, math.nan
    return float(tail.mean()), float(tail.var())


def summary_json(result: ExperimentResult) -> str:
    cfg = result.config
    tops = [m.top1 for m in result.metrics]
    best_idx = int(np.argmax(tops)) if tops else -1
    tail_mean, tail_var = tail_stats(result.metrics)
    rounds_to_target = None
    if cfg.target_accuracy is not None:
        hits = [m.round for m in result.metrics if m.top1 >= cfg.target_accuracy]
        rounds_to_target = (hits[0] + 1) if hits else None
    doc = {
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "initial_top1": result.initial_top1,
        "best_top1": tops[best_idx] if tops else result.initial_top1,
        "best_round": result.metrics[best_idx].round if tops else None,
        "final_top1": tops[-1] if tops else result.initial_top1,
        "tail10_mean_top1": None if math.isnan(tail_mean) else tail_mean,
        "tail10_var_top1": None if math.isnan(tail_var) else tail_var,
        "target_accuracy": cfg.target_accuracy,
        "rounds_to_target": rounds_to_target,
        "final_clusters": (
            result.final_assignment.labels.tolist()
            if result.final_assignment is not None
            else None
        ),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
