"""Finite-difference validation of every analytic gradient in the package.

Checks compare against central differences with a configurable step. The
reported error is the largest componentwise deviation divided by the largest
gradient magnitude, so a check passes only when the whole gradient field
agrees, not just its big entries. Random trial networks are resampled until
no ReLU pre-activation sits within the step of its kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .kd import KdConfig, kd_grad, kd_loss, pairwise_conditional, resolve_bandwidth
from .nn import Batch, ModelParams, NetworkShape, cross_entropy, init_params

DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4

_ADAPTIVE = KdConfig()


def finite_difference(fn, x0: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.empty_like(x0)
    for i in range(x0.size):
        x = x0.copy()
        x[i] += step
        hi = fn(x)
        x[i] = x0[i] - step
        lo = fn(x)
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute gap over the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _random_shape(rng: np.random.Generator) -> NetworkShape:
    depth = int(rng.integers(0, 3))
    return NetworkShape(
        input_dim=int(rng.integers(2, 7)),
        hidden=tuple(int(rng.integers(2, 7)) for _ in range(depth)),
        rep_dim=int(rng.integers(2, 6)),
        classes=int(rng.integers(2, 6)),
    )


def _clear_of_kinks(params: ModelParams, x: np.ndarray, margin: float) -> bool:
    cache = nn._forward(params, x)
    return all(np.abs(z).min(initial=np.inf) > margin for z in cache.pre)


def sample_case(
    rng: np.random.Generator, batch_max: int = 8, margin: float = 1e-3
) -> tuple[ModelParams, Batch]:
    """Random net and batch with all pre-activations clear of the ReLU kink."""
    while True:
        shape = _random_shape(rng)
        params = init_params(shape, rng)
        b = int(rng.integers(1, batch_max + 1))
        x = rng.uniform(0.0, 1.0, size=(b, shape.input_dim))
        y = rng.integers(0, shape.classes, size=b)
        if _clear_of_kinks(params, x, margin):
            return params, Batch(x, y)


def perturbed_teacher(
    params: ModelParams, rng: np.random.Generator, scale: float = 0.05
) -> ModelParams:
    """A teacher a short step away from the student, as in an actual round.

    Keeps the two representation geometries commensurate so no conditional
    with teacher mass lands on the loss floor (where the floored loss is flat
    but the analytic gradient is not).
    """
    noise = rng.normal(0.0, scale, size=params.vector.shape)
    return ModelParams(params.shape, params.vector + noise)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def check_cross_entropy_grad(
    params: ModelParams, batch: Batch, step: float = DEFAULT_STEP
) -> float:
    def loss(vec: np.ndarray) -> float:
        p = ModelParams(params.shape, vec)
        _, _, probs = nn.forward(p, batch)
        return cross_entropy(probs, batch.y)

    analytic = nn.backward(params, batch)
    return relative_error(analytic, finite_difference(loss, params.vector, step))


def check_kd_grad(
    reps: np.ndarray,
    teacher_cond: np.ndarray,
    bandwidth: float,
    step: float = DEFAULT_STEP,
) -> float:
    reps = np.asarray(reps, dtype=np.float64)

    def loss(flat: np.ndarray) -> float:
        student = pairwise_conditional(flat.reshape(reps.shape), bandwidth=bandwidth)
        return kd_loss(teacher_cond, student)

    analytic = kd_grad(teacher_cond, reps, bandwidth=bandwidth)
    numeric = finite_difference(loss, reps.ravel(), step).reshape(reps.shape)
    return relative_error(analytic, numeric)


def check_total_grad(
    params: ModelParams,
    batch: Batch,
    teacher: ModelParams,
    lam: float,
    step: float = DEFAULT_STEP,
    fault: bool = False,
) -> float:
    """End-to-end check of the regularized objective CE + lam * KD."""
    teacher_reps = nn._forward(teacher, batch.x).reps
    b = len(batch)
    use_kd = lam > 0 and b >= 2
    if use_kd:
        h = resolve_bandwidth(teacher_reps,_ADAPTIVE)
        teacher_cond = pairwise_conditional(teacher_reps, bandwidth=h)

    def loss(vec: np.ndarray) -> float:
        p = ModelParams(params.shape, vec)
        cache = nn._forward(p, batch.x)
        total = cross_entropy(cache.probs, batch.y)
        if use_kd:
            student = pairwise_conditional(cache.reps, bandwidth=h)
            total += lam * kd_loss(teacher_cond, student)
        return total

    rep_extra = None
    if use_kd and b >= 3:
        reps = nn._forward(params, batch.x).reps
        rep_extra = lam * kd_grad(teacher_cond, reps, bandwidth=h)
    analytic = nn.backward(params, batch, rep_extra)
    if fault:
        analytic = analytic.copy()
        analytic[0] = -analytic[0] - 1.0
    return relative_error(analytic, finite_difference(loss, params.vector, step))


def run_suite(
    seed: int, trials: int, lam: float = 1.0, fault: bool = False
) -> list[CheckResult]:
    """Random gradient checks: CE-only, KD-only, and the combined objective."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    for trial in range(trials):
        params, batch = sample_case(rng)
        results.append(
            CheckResult(f"ce[{trial}]", check_cross_entropy_grad(params, batch))
        )
        b = int(rng.integers(3, 7))
        u = int(rng.integers(2, 5))
        reps = rng.normal(size=(b, u))
        teacher_reps = rng.normal(size=(b, u))
        h = resolve_bandwidth(teacher_reps, _ADAPTIVE)
        teacher_cond = pairwise_conditional(teacher_reps, bandwidth=h)
        results.append(CheckResult(f"kd[{trial}]", check_kd_grad(reps, teacher_cond, h)))
        if lam > 0:
            teacher = perturbed_teacher(params, rng)
            results.append(
                CheckResult(
                    f"total[{trial}]",
                    check_total_grad(params, batch, teacher, lam, fault=fault),
                )
            )
    return results
