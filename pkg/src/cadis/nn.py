"""Dense classification network with hand-derived gradients.

The model is a stack of ReLU affine layers (the feature extractor) followed by
a bias-free linear classifier and a softmax. The classifier matrix maps the
representation vector to class logits; its per-round change is what the
server-side similarity machinery inspects, so it is exposed directly via
:func:`penultimate`.

All parameters live in one flat float64 vector so that models can be averaged,
serialized, and finite-difference checked without bookkeeping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PARAM_MAGIC = b"CADP"
PARAM_VERSION = 1

# Probability floor applied inside logarithms only.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class NetworkShape:
    """Layer sizes: input -> hidden... -> representation -> classes."""

    input_dim: int
    hidden: tuple[int, ...]
    rep_dim: int
    classes: int

    def __post_init__(self) -> None:
        dims = (self.input_dim, *self.hidden, self.rep_dim)
        if any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"layer sizes must be positive integers, got {dims}")
        if self.rep_dim < 1:
            raise ValueError("representation dim must be >= 1")
        if self.classes < 2:
            raise ValueError("class count must be >= 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def feature_dims(self) -> tuple[int, ...]:
        """Affine-chain dims of the ReLU feature extractor, ending at rep_dim."""
        return (self.input_dim, *self.hidden, self.rep_dim)

    @property
    def classifier_size(self) -> int:
        return self.classes * self.rep_dim

    @property
    def param_count(self) -> int:
        dims = self.feature_dims
        feats = sum((dims[i] + 1) * dims[i + 1] for i in range(len(dims) - 1))
        return feats + self.classifier_size

    def layer_sizes(self) -> tuple[int, ...]:
        """All layer widths including input and classes, for serialization."""
        return (self.input_dim, *self.hidden, self.rep_dim, self.classes)


@lru_cache(maxsize=None)
def _layout(shape: NetworkShape) -> tuple[tuple[tuple[slice, slice, int, int], ...], slice]:
    """Slices of the flat vector: ((W, b, out, in) per feature layer, classifier)."""
    dims = shape.feature_dims
    layers = []
    off = 0
    for i in range(len(dims) - 1):
        n_in, n_out = dims[i], dims[i + 1]
        w = slice(off, off + n_out * n_in)
        off += n_out * n_in
        b = slice(off, off + n_out)
        off += n_out
        layers.append((w, b, n_out, n_in))
    clf = slice(off, off + shape.classifier_size)
    return tuple(layers), clf


@dataclass
class ModelParams:
    """Flat parameter vector plus the shape needed to interpret it."""

    shape: NetworkShape
    vector: np.ndarray

    def __post_init__(self) -> None:
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or self.vector.size != self.shape.param_count:
            raise ValueError(
                f"parameter vector has {self.vector.size} entries, "
                f"shape requires {self.shape.param_count}"
            )

    def copy(self) -> "ModelParams":
        return ModelParams(self.shape, self.vector.copy())

    def feature_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight matrix, bias) views for each ReLU layer. Views, not copies."""
        layers, _ = _layout(self.shape)
        return [
            (self.vector[w].reshape(n_out, n_in), self.vector[b])
            for w, b, n_out, n_in in layers
        ]

    def classifier(self) -> np.ndarray:
        """View of the classifier matrix (classes x rep_dim)."""
        _, clf = _layout(self.shape)
        return self.vector[clf].reshape(self.shape.classes, self.shape.rep_dim)


@dataclass
class Batch:
    """A training batch: features x (b x d) and integer labels y (b,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("batch features must be a non-empty 2-D matrix")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("label vector length must match batch size")

    def __len__(self) -> int:
        return self.x.shape[0]


def init_params(shape: NetworkShape, rng: np.random.Generator) -> ModelParams:
    """Uniform(-sqrt(6/(fan_in+fan_out)), +...) weights, zero biases."""
    vec = np.zeros(shape.param_count)
    params = ModelParams(shape, vec)
    layers, clf = _layout(shape)
    for w, _b, n_out, n_in in layers:
        bound = np.sqrt(6.0 / (n_in + n_out))
        vec[w] = rng.uniform(-bound, bound, size=n_out * n_in)
    bound = np.sqrt(6.0 / (shape.rep_dim + shape.classes))
    vec[clf] = rng.uniform(-bound, bound, size=shape.classifier_size)
    return params


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(params: ModelParams, batch: Batch) -> None:
    if batch.x.shape[1] != params.shape.input_dim:
        raise ValueError(
            f"batch feature dim {batch.x.shape[1]} != input dim {params.shape.input_dim}"
        )
    if batch.y.min() < 0 or batch.y.max() >= params.shape.classes:
        raise ValueError("labels out of range for class count")


class _ForwardCache:
    __slots__ = ("pre", "acts", "reps", "logits", "probs")

    def __init__(self, pre, acts, reps, logits, probs):
        self.pre = pre
        self.acts = acts
        self.reps = reps
        self.logits = logits
        self.probs = probs


def _forward(params: ModelParams, x: np.ndarray) -> _ForwardCache:
    a = x
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [x]
    for w, b in params.feature_layers():
        z = a @ w.T + b
        a = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(a)
    reps = a
    logits = reps @ params.classifier().T
    return _ForwardCache(pre, acts, reps, logits, _softmax(logits))


def forward(
    params: ModelParams, batch: Batch
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run the net; returns (representations b x u, logits b x v, probabilities b x v)."""
    _check_batch(params, batch)
    c = _forward(params, batch.x)
    return c.reps, c.logits, c.probs


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -ln p_label, with the probability floored at 1e-12."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.ndim != 2 or labels.shape != (probabilities.shape[0],):
        raise ValueError("probabilities must be b x v with one label per row")
    picked = probabilities[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def _backward(
    params: ModelParams,
    cache: _ForwardCache,
    labels: np.ndarray,
    rep_grad: np.ndarray | None,
) -> np.ndarray:
    b = labels.size
    shape = params.shape
    layers, clf = _layout(shape)
    grad = np.empty_like(params.vector)

    # d(mean CE)/d logits = (p - onehot)/b; this makes the classifier block the
    # batch average of -(1-p_j) R for the label row and +p_r R for the others.
    delta = cache.probs.copy()
    delta[np.arange(b), labels] -= 1.0
    delta /= b

    wc = params.classifier()
    grad[clf] = (delta.T @ cache.reps).ravel()

    d = delta @ wc
    if rep_grad is not None:
        d = d + rep_grad

    weights = params.feature_layers()
    for i in range(len(weights) - 1, -1, -1):
        w_sl, b_sl, _, _ = layers[i]
        d = d * (cache.pre[i] > 0.0)
        grad[w_sl] = (d.T @ cache.acts[i]).ravel()
        grad[b_sl] = d.sum(axis=0)
        if i > 0:
            d = d @ weights[i][0]
    return grad


def backward(
    params: ModelParams,
    batch: Batch,
    rep_grad: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the batch loss w.r.t. the flat parameter vector.

    The batch loss is mean cross-entropy; `rep_grad`, when given, is an extra
    gradient contribution on the representations (b x u) that is chained
    through the feature extractor. Passing the scaled distillation gradient
    here yields the gradient of the full regularized objective.
    """
    _check_batch(params, batch)
    if rep_grad is not None:
        rep_grad = np.asarray(rep_grad, dtype=np.float64)
        if rep_grad.shape != (len(batch), params.shape.rep_dim):
            raise ValueError("rep_grad must be batch x rep_dim")
    cache = _forward(params, batch.x)
    return _backward(params, cache, batch.y, rep_grad)


def sgd_step(params: ModelParams, gradient: np.ndarray, lr: float) -> ModelParams:
    """One plain SGD step; returns a new parameter vector."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.vector.shape:
        raise ValueError("gradient length must match parameter vector")
    return ModelParams(params.shape, params.vector - lr * gradient)


def penultimate(params: ModelParams) -> np.ndarray:
    """Copy of the classifier matrix (classes x rep_dim)."""
    return params.classifier().copy()


def save_params(params: ModelParams, path) -> None:
    """Write magic 'CADP', version, layer sizes, then the little-endian f64 vector."""
    sizes = params.shape.layer_sizes()
    header = PARAM_MAGIC + struct.pack("<II", PARAM_VERSION, len(sizes))
    header += struct.pack(f"<{len(sizes)}I", *sizes)
    with open(path, "wb") as f:
        f.write(header)
        f.write(params.vector.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PARAM_MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    version, n_sizes = struct.unpack_from("<II", blob, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, 12)
    if n_sizes < 3:
        raise ValueError("parameter file header lists fewer than 3 layers")
    shape = NetworkShape(
        input_dim=sizes[0], hidden=tuple(sizes[1:-2]), rep_dim=sizes[-2], classes=sizes[-1]
    )
    body = blob[12 + 4 * n_sizes :]
    vec = np.frombuffer(body, dtype="<f8")
    if vec.size != shape.param_count:
        raise ValueError("parameter file body does not match its header")
    return ModelParams(shape, vec.astype(np.float64))
