"""Datasets and non-IID client partitioning.

Four partition schemes produce client shards with ground-truth cluster ids:

* ``mc`` — multi-cluster: clients grouped into clusters by a ratio list, all
  clients of a cluster drawing from the same small label subset, sample
  counts skewed log-normally.
* ``pa`` — Pareto: each class's samples spread over all clients by a power
  law; no cluster structure (every client is its own singleton cluster).
* ``bc`` — balanced single cluster: one cluster holding a fixed share of the
  clients sharing one label subset, everyone else a singleton; equal sample
  counts.
* ``uc`` — unbalanced single cluster: ``bc`` with log-normal sample counts.

Shard index lists are pairwise disjoint; their union may be a strict subset
of the dataset when label pools or balance constraints bind.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

_LOGNORMAL_SIGMA = 0.5


@dataclass
class Dataset:
    """Feature matrix in [0, 1], integer labels, class count, provenance tag."""

    x: np.ndarray
    y: np.ndarray
    classes: int
    source: str = "unknown"

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("feature matrix must be non-empty and 2-D")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("one label per sample required")
        if self.y.min() < 0 or self.y.max() >= self.classes:
            raise ValueError("labels out of range for class count")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    """Scheme parameters; see the module docstring for the four schemes."""

    scheme: str
    clients: int
    cluster_ratios: tuple[float, ...] = (3, 3, 2, 1, 1)
    label_fraction: float = 0.2
    bc_share: float = 0.6
    pareto_shape: float = 3.0
    balanced: bool | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scheme not in ("mc", "pa", "bc", "uc"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.clients < 1:
            raise ValueError("need at least one client")
        if any(r <= 0 for r in self.cluster_ratios):
            raise ValueError("cluster ratios must be positive")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label fraction must be in (0, 1]")
        if self.scheme == "mc" and self.clients < len(self.cluster_ratios):
            raise ValueError("need at least one client per cluster")


@dataclass
class ClientShard:
    client: int
    indices: np.ndarray
    cluster: int

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size < 1:
            raise ValueError(f"client {self.client} received no samples")

    @property
    def samples(self) -> int:
        return int(self.indices.size)


def _read_idx(path, expected_magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated IDX file")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    n_dims = magic & 0xFF
    if len(blob) < 4 + 4 * n_dims:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{n_dims}I", blob, 4)
    body = np.frombuffer(blob, dtype=np.uint8, offset=4 + 4 * n_dims)
    if body.size != math.prod(dims):
        raise ValueError(f"{path}: body size does not match header dims {dims}")
    return body, dims


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files into a dataset scaled by 1/255."""
    pixels, img_dims = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels, lab_dims = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise ValueError(
            f"image count {img_dims[0]} does not match label count {lab_dims[0]}"
        )
    count = img_dims[0]
    x = pixels.reshape(count, -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    classes = int(y.max()) + 1
    return Dataset(x=x, y=y, classes=classes, source="idx")


def save_idx(dataset_x: np.ndarray, dataset_y: np.ndarray, images_path, labels_path) -> None:
    """Write arrays back out as IDX files (mainly for fixtures and round-trips)."""
    x = np.asarray(dataset_x)
    y = np.asarray(dataset_y)
    n, d = x.shape
    side = int(round(math.sqrt(d)))
    if side * side != d:
        side = 1  # fall back to n x d x 1 layout
    rows, cols = (side, d // side) if side > 1 else (d, 1)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(y.astype(np.uint8).tobytes())


def _blob_centers(classes: int, dims: int) -> np.ndarray:
    if dims >= classes:
        centers = np.full((classes, dims), 0.15)
        centers[np.arange(classes), np.arange(classes)] = 0.85
    elif dims >= 2:
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers = np.full((classes, dims), 0.5)
        centers[:, 0] += 0.35 * np.cos(angles)
        centers[:, 1] += 0.35 * np.sin(angles)
    else:
        centers = np.linspace(0.1, 0.9, classes)[:, None]
    return centers


def synth_blobs(
    classes: int, dims: int, per_class: int, spread: float, seed: int
) -> Dataset:
    """Isotropic Gaussian blobs, one fixed center per class; deterministic by seed."""
    if classes < 2 or dims < 1 or per_class < 1:
        raise ValueError("classes, dims and per_class must be positive (classes >= 2)")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = _blob_centers(classes, dims)
    x = np.repeat(centers, per_class, axis=0)
    if spread > 0:
        x = x + spread * rng.standard_normal(x.shape)
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(x=x, y=y, classes=classes, source="synthetic")


def _largest_remainder(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Integer counts summing to `total`, proportional to weights, each >= minimum."""
    k = weights.size
    if total < k * minimum:
        raise ValueError(f"cannot give {k} parts at least {minimum} from {total}")
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    remainder = total - counts.sum()
    order = np.argsort(-(quotas - counts), kind="stable")
    counts[order[:remainder]] += 1
    # Pull any part below the minimum up from the currently largest part.
    while counts.min() < minimum:
        counts[np.argmin(counts)] += 1
        counts[np.argmax(counts)] -= 1
    return counts


def cluster_sizes(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Cluster cardinalities proportional to the ratio list, each >= 1."""
    return _largest_remainder(n, np.asarray(ratios, dtype=np.float64), 1).tolist()


def _label_subsets(
    classes: int, n_subsets: int, labels_per: int, rng: np.random.Generator
) -> list[list[int]]:
    """Contiguous blocks of a shuffled class list, wrapping when they run out."""
    if labels_per > classes:
        raise ValueError(
            f"{labels_per} labels per cluster infeasible with {classes} classes"
        )
    perm = rng.permutation(classes)
    return [
        [int(perm[(s * labels_per + j) % classes]) for j in range(labels_per)]
        for s in range(n_subsets)
    ]


def _split_pools(
    dataset: Dataset,
    groups: list[list[int]],
    subsets: list[list[int]],
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """One index pool per group: each label's samples split among the groups
    that own it, proportionally to group size."""
    by_label = {c: np.flatnonzero(dataset.y == c) for c in range(dataset.classes)}
    pools: list[list[np.ndarray]] = [[] for _ in groups]
    for label in range(dataset.classes):
        owners = [g for g, subset in enumerate(subsets) if label in subset]
        if not owners:
            continue
        idx = rng.permutation(by_label[label])
        if idx.size == 0:
            raise ValueError(f"no samples available for label {label}")
        sizes = np.array([len(groups[g]) for g in owners], dtype=np.float64)
        counts = _largest_remainder(idx.size, sizes, 1)
        start = 0
        for g, c in zip(owners, counts):
            pools[g].append(idx[start : start + c])
            start += c
    return [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in pools]


def _shards_from_pools(
    groups: list[list[int]],
    pools: list[np.ndarray],
    balanced: bool,
    rng: np.random.Generator,
) -> list[ClientShard]:
    shards: list[ClientShard] = []
    if balanced:
        per_client = min(
            pool.size // len(members) for pool, members in zip(pools, groups)
        )
        if per_client < 1:
            raise ValueError("not enough samples for one per client in every group")
    for gid, (members, pool) in enumerate(zip(groups, pools)):
        pool = rng.permutation(pool)
        if balanced:
            counts = np.full(len(members), per_client, dtype=np.int64)
        else:
            mult = rng.lognormal(0.0, _LOGNORMAL_SIGMA, size=len(members))
            counts = _largest_remainder(pool.size, mult, 1)
        start = 0
        for client, c in zip(members, counts):
            shards.append(
                ClientShard(client=client, indices=np.sort(pool[start : start + c]), cluster=gid)
            )
            start += c
    shards.sort(key=lambda s: s.client)
    return shards


def _partition_clustered(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    rng = np.random.default_rng(spec.seed)
    n = spec.clients
    if spec.scheme == "mc":
        sizes = cluster_sizes(n, spec.cluster_ratios)
        groups, nxt = [], 0
        for s in sizes:
            groups.append(list(range(nxt, nxt + s)))
            nxt += s
        balanced = bool(spec.balanced) if spec.balanced is not None else False
    else:  # bc / uc
        big = math.ceil(spec.bc_share * n)
        groups = [list(range(big))] + [[i] for i in range(big, n)]
        if spec.balanced is not None:
            balanced = bool(spec.balanced)
        else:
            balanced = spec.scheme == "bc"
    labels_per = max(1, math.ceil(spec.label_fraction * dataset.classes))
    subsets = _label_subsets(dataset.classes, len(groups), labels_per, rng)
    pools = _split_pools(dataset, groups, subsets, rng)
    return _shards_from_pools(groups, pools, balanced, rng)


def _partition_pareto(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    rng = np.random.default_rng(spec.seed)
    n = spec.clients
    weights = np.arange(1, n + 1, dtype=np.float64) ** (-spec.pareto_shape)
    per_client: list[list[np.ndarray]] = [[] for _ in range(n)]
    for label in range(dataset.classes):
        idx = rng.permutation(np.flatnonzero(dataset.y == label))
        counts = _largest_remainder(idx.size, weights, 0)
        start = 0
        for c_id, c in enumerate(counts):
            if c > 0:
                per_client[c_id].append(idx[start : start + c])
            start += c
    lists = [
        np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        for parts in per_client
    ]
    # The power law can starve tail clients entirely; move single samples over
    # from the richest clients so every shard is non-empty.
    for c_id in range(n):
        if lists[c_id].size == 0:
            donor = int(np.argmax([l.size for l in lists]))
            lists[c_id] = lists[donor][-1:]
            lists[donor] = lists[donor][:-1]
    return [
        ClientShard(client=c, indices=np.sort(lists[c]), cluster=c) for c in range(n)
    ]


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split a dataset into client shards with ground-truth cluster ids."""
    if spec.scheme == "pa":
        return _partition_pareto(dataset, spec)
    return _partition_clustered(dataset, spec)


def truth_labels(shards: list[ClientShard]) -> np.ndarray:
    """Ground-truth cluster id per client, indexed by client id."""
    labels = np.zeros(len(shards), dtype=np.int64)
    for s in shards:
        labels[s.client] = s.cluster
    return labels


def shards_to_manifest(shards: list[ClientShard]) -> str:
    return json.dumps(
        {
            "clients": [
                {
                    "id": s.client,
                    "cluster": s.cluster,
                    "indices": s.indices.tolist(),
                }
                for s in shards
            ]
        },
        sort_keys=True,
    )


def shards_from_manifest(blob: str) -> list[ClientShard]:
    doc = json.loads(blob)
    return [
        ClientShard(
            client=int(c["id"]),
            indices=np.asarray(c["indices"], dtype=np.int64),
            cluster=int(c["cluster"]),
        )
        for c in doc["clients"]
    ]
