"""Deterministic federated-learning simulator with cluster-balanced
aggregation, penultimate-layer client clustering, and knowledge-distilled
regularization, plus a numerical theory lab for its coverage and convergence
claims."""

__version__ = "0.1.0"

from .aggregation import aggregate, cadis_weights, fedavg_weights
from .data import (
    ClientShard,
    Dataset,
    PartitionSpec,
    load_idx,
    partition,
    synth_blobs,
)
from .engine import (
    ExperimentConfig,
    ExperimentResult,
    IdxData,
    RoundMetrics,
    SyntheticData,
    evaluate,
    local_train,
    run_experiment,
    run_round,
    sample_clients,
)
from .kd import KdConfig, adaptive_bandwidth, kd_grad, kd_loss, pairwise_conditional
from .nn import (
    Batch,
    ModelParams,
    NetworkShape,
    backward,
    cross_entropy,
    forward,
    init_params,
    load_params,
    penultimate,
    save_params,
    sgd_step,
)
from .similarity import (
    ClusterAssignment,
    SimilarityState,
    ThresholdSchedule,
    TransitiveConfig,
    cluster,
    epsilon,
    instance_similarity,
    pairwise_agreement,
    q_matrix_mse,
    rescale_q,
    transitive_fill,
    update_similarity,
)
from .theory import (
    QuadraticClient,
    expected_rounds_bound,
    expected_rounds_exact,
    expected_rounds_mc,
    fixed_point,
    global_objective,
    quadratic_trajectory,
)
