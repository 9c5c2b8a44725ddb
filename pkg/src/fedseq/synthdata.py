"""Synthetic Gaussian-blob classification data with per-client skew.

Stands in for image benchmarks at desk scale: classes are isotropic
Gaussian blobs, label skew comes from a Dirichlet allocation of each
class across clients, and feature skew (when enabled) applies a fixed
random rotation per client.

Dataset container format (binary, little-endian), covered by a
round-trip test:

    magic   8 bytes  b"FSDATA01"
    header  int64 x 4: num_classes, input_dim, num_clients, samples_per_class
    per client, in id order:
        int64 x 2: n_train, n_test
        float64 row-major [n_train, input_dim] train features
        int64   [n_train]                      train labels
        float64 row-major [n_test, input_dim]  test features
        int64   [n_test]                       test labels
"""

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PartitionError
from .seeding import (
    TAG_CLASS_MEANS,
    TAG_CLASS_SAMPLES,
    TAG_PARTITION,
    TAG_ROTATION,
    TAG_SPLIT,
    stream,
)

_MAGIC = b"FSDATA01"

FEATURE_SKEW_KINDS = ("none", "per_client_rotation")


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a dataset byte-identically."""

    num_classes: int
    input_dim: int
    samples_per_class: int
    class_mean_scale: float = 2.0
    noise_std: float = 1.0
    feature_skew: str = "none"
    rotation_angle_std: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ParameterError("input_dim must be >= 2")
        if self.samples_per_class < 8:
            raise ParameterError("samples_per_class must be >= 8")
        if self.feature_skew not in FEATURE_SKEW_KINDS:
            raise ParameterError(f"feature_skew must be one of {FEATURE_SKEW_KINDS}")


@dataclass
class ClientPartition:
    """Per-client sample ownership within the global per-class pools."""

    client_id: int
    indices_per_class: list[np.ndarray]
    train_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Round weights*total to integers that sum exactly to total."""
    raw = weights * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        remainders = raw - base
        order = np.argsort(-remainders, kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_label_skew(num_classes: int, num_clients: int, alpha: float,
                         counts_per_class: int, seed) -> np.ndarray:
    """Allocate each class's samples over clients with Dir(alpha) weights.

    Returns an int64 matrix [num_classes, num_clients] whose rows sum to
    counts_per_class. Weights are drawn as normalized Gamma(alpha, 1)
    variates and rounded with the largest-remainder rule. If a client
    would end up with zero samples overall, one class's weights are
    redrawn (round-robin over classes, up to 100 redraws); if that still
    fails, one sample per empty client is moved from the fullest cell.
    """
    if alpha <= 0:
        raise ParameterError("dirichlet alpha must be > 0")
    if num_clients == 1:
        return np.full((num_classes, 1), counts_per_class, dtype=np.int64)
    rng = np.random.default_rng(seed)

    def draw_row() -> np.ndarray:
        w = rng.gamma(alpha, 1.0, size=num_clients)
        total = w.sum()
        if total == 0.0:  # all-underflow corner at tiny alpha
            w = np.ones(num_clients)
            total = float(num_clients)
        return _largest_remainder(w / total, counts_per_class)

    alloc = np.stack([draw_row() for _ in range(num_classes)])
    for attempt in range(100):
        if np.all(alloc.sum(axis=0) >= 1):
            break
        alloc[attempt % num_classes] = draw_row()
    else:
        for client in np.flatnonzero(alloc.sum(axis=0) == 0):
            c, donor = np.unravel_index(np.argmax(alloc), alloc.shape)
            alloc[c, donor] -= 1
            alloc[c, client] += 1
    return alloc


def _givens_rotation(dim: int, rng: np.random.Generator, angle_std: float) -> np.ndarray:
    """Composition of seeded Givens rotations over adjacent axis pairs."""
    rot = np.eye(dim)
    for i in range(dim - 1):
        phi = rng.normal(0.0, angle_std)
        g = np.eye(dim)
        c, s = np.cos(phi), np.sin(phi)
        g[i, i] = c
        g[i, i + 1] = -s
        g[i + 1, i] = s
        g[i + 1, i + 1] = c
        rot = g @ rot
    return rot


def client_rotation(spec: DatasetSpec, client_id: int) -> np.ndarray:
    """The fixed orthogonal rotation applied to one client's inputs."""
    if spec.feature_skew != "per_client_rotation":
        return np.eye(spec.input_dim)
    rng = stream(spec.master_seed, TAG_ROTATION, client_id)
    return _givens_rotation(spec.input_dim, rng, spec.rotation_angle_std)


def split_train_test(indices: np.ndarray, ratio_train: float = 0.25, seed=0):
    """Shuffle, then put the first ceil(ratio*n) indices in train."""
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    if n < 4:
        raise PartitionError(f"need at least 4 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    shuffled = indices[rng.permutation(n)]
    n_train = int(np.ceil(ratio_train * n))
    return shuffled[:n_train], shuffled[n_train:]


@dataclass
class ClientDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def train_size(self) -> int:
        return len(self.y_train)


@dataclass
class FederatedDataset:
    spec: DatasetSpec
    num_clients: int
    clients: list[ClientDataset]


def class_means(spec: DatasetSpec) -> np.ndarray:
    rng = stream(spec.master_seed, TAG_CLASS_MEANS)
    return rng.normal(0.0, spec.class_mean_scale, size=(spec.num_classes, spec.input_dim))


def generate_samples(spec: DatasetSpec,
                     partitions: list[ClientPartition]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Materialize per-client (features, labels) from a partition.

    Class c's pool is drawn once as N(mu_c, noise_std^2 I) under the
    master seed, then handed out by the partition's per-class index
    lists; a client's rotation (if any) applies to all of its inputs.
    """
    means = class_means(spec)
    pools = []
    for c in range(spec.num_classes):
        rng = stream(spec.master_seed, TAG_CLASS_SAMPLES, c)
        count = sum(len(p.indices_per_class[c]) for p in partitions)
        pools.append(means[c] + rng.normal(0.0, spec.noise_std, size=(count, spec.input_dim)))
    out = []
    for part in partitions:
        xs, ys = [], []
        for c in range(spec.num_classes):
            idx = part.indices_per_class[c]
            if len(idx):
                xs.append(pools[c][idx])
                ys.append(np.full(len(idx), c, dtype=np.int64))
        x = np.concatenate(xs) if xs else np.empty((0, spec.input_dim))
        y = np.concatenate(ys) if ys else np.empty(0, dtype=np.int64)
        if spec.feature_skew == "per_client_rotation":
            x = x @ client_rotation(spec, part.client_id).T
        out.append((x, y))
    return out


def build_partitions(spec: DatasetSpec, num_clients: int, alpha: float) -> tuple[np.ndarray, list[ClientPartition]]:
    alloc = dirichlet_label_skew(spec.num_classes, num_clients, alpha,
                                 spec.samples_per_class,
                                 [spec.master_seed, TAG_PARTITION])
    partitions = []
    starts = np.zeros(spec.num_classes, dtype=np.int64)
    for i in range(num_clients):
        per_class = []
        for c in range(spec.num_classes):
            n = int(alloc[c, i])
            per_class.append(np.arange(starts[c], starts[c] + n, dtype=np.int64))
            starts[c] += n
        partitions.append(ClientPartition(client_id=i, indices_per_class=per_class))
    return alloc, partitions


def build_federated_dataset(spec: DatasetSpec, num_clients: int, alpha: float,
                            ratio_train: float = 0.25) -> FederatedDataset:
    """Full pipeline: allocate, sample, rotate, and split per client."""
    _, partitions = build_partitions(spec, num_clients, alpha)
    samples = generate_samples(spec, partitions)
    clients = []
    for part, (x, y) in zip(partitions, samples):
        local = np.arange(len(y), dtype=np.int64)
        train_idx, test_idx = split_train_test(
            local, ratio_train, [spec.master_seed, TAG_SPLIT, part.client_id])
        part.train_indices = train_idx
        part.test_indices = test_idx
        clients.append(ClientDataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx]))
    return FederatedDataset(spec=spec, num_clients=num_clients, clients=clients)


# ---------------------------------------------------------------------------
# container serialization
# ---------------------------------------------------------------------------


def save_dataset(ds: FederatedDataset, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def dataset_to_bytes(ds: FederatedDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    spec = ds.spec
    head = np.array([spec.num_classes, spec.input_dim, ds.num_clients,
                     spec.samples_per_class], dtype="<i8")
    buf.write(head.tobytes())
    for client in ds.clients:
        counts = np.array([len(client.y_train), len(client.y_test)], dtype="<i8")
        buf.write(counts.tobytes())
        buf.write(np.ascontiguousarray(client.x_train, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(client.y_train, dtype="<i8").tobytes())
        buf.write(np.ascontiguousarray(client.x_test, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(client.y_test, dtype="<i8").tobytes())
    return buf.getvalue()


def load_dataset(path: str) -> FederatedDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def dataset_from_bytes(raw: bytes) -> FederatedDataset:
    buf = io.BytesIO(raw)
    if buf.read(8) != _MAGIC:
        raise PartitionError("not a dataset container (bad magic)")
    num_classes, input_dim, num_clients, samples_per_class = np.frombuffer(
        buf.read(32), dtype="<i8")
    spec = DatasetSpec(num_classes=int(num_classes), input_dim=int(input_dim),
                       samples_per_class=int(samples_per_class))
    clients = []
    for _ in range(num_clients):
        n_train, n_test = np.frombuffer(buf.read(16), dtype="<i8")
        x_train = np.frombuffer(buf.read(8 * n_train * input_dim), dtype="<f8") \
            .reshape(n_train, input_dim).copy()
        y_train = np.frombuffer(buf.read(8 * n_train), dtype="<i8").copy()
        x_test = np.frombuffer(buf.read(8 * n_test * input_dim), dtype="<f8") \
            .reshape(n_test, input_dim).copy()
        y_test = np.frombuffer(buf.read(8 * n_test), dtype="<i8").copy()
        clients.append(ClientDataset(x_train, y_train, x_test, y_test))
    return FederatedDataset(spec=spec, num_clients=int(num_clients), clients=clients)
