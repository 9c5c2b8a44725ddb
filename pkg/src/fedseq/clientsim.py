"""Simulated federated client: frozen backbone + low-rank adapter + local head.

The backbone is a stack of frozen tanh random-feature layers (one per
adapter block; a single layer by default). An adapter block adds a
rank-r linear correction to its layer's features:

    z_k = tanh(W_k z_{k-1}) + B_k (A_k z_{k-1})        z_0 = x
    logits = W z_K + b

Only the adapter blocks and the head train locally; the head never
leaves the client.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ClientError, DimensionError
from .numerics import (
    OptimizerState,
    Tape,
    Tensor,
    add,
    cross_entropy,
    matmul,
    optimizer_step,
    tanh,
    transpose,
)
from .seeding import TAG_ADAPTER_INIT, TAG_BACKBONE, TAG_SHUFFLE, stream

ADAPTER_INIT_STD = 0.02


@dataclass(frozen=True)
class FrozenBackbone:
    """Shared, never-updated feature extractor; layer k maps to width d."""

    layers: tuple  # tuple of np.ndarray, first [d, p], rest [d, d]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].shape[0]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for w in self.layers:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


def init_backbone(master_seed: int, input_dim: int, feature_dim: int,
                  num_blocks: int = 1) -> FrozenBackbone:
    """Random tanh features, entries N(0, 1/fan_in); identical for all clients."""
    layers = []
    in_dim = input_dim
    for k in range(num_blocks):
        rng = stream(master_seed, TAG_BACKBONE, k)
        layers.append(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(feature_dim, in_dim)))
        in_dim = feature_dim
    return FrozenBackbone(layers=tuple(layers))


@dataclass
class AdapterBlock:
    """Low-rank block: the effective map is b @ a, rank <= r."""

    block_name: str
    a: np.ndarray  # [r, in_dim]
    b: np.ndarray  # [d, r]

    @property
    def flat_length(self) -> int:
        return self.a.size + self.b.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b.ravel()])

    def with_flat(self, flat: np.ndarray) -> "AdapterBlock":
        if flat.shape != (self.flat_length,):
            raise DimensionError(
                f"flat vector length {flat.shape} != {self.flat_length} for {self.block_name}")
        a = flat[: self.a.size].reshape(self.a.shape).copy()
        b = flat[self.a.size:].reshape(self.b.shape).copy()
        return AdapterBlock(self.block_name, a, b)


def init_adapter_blocks(master_seed: int, input_dim: int, feature_dim: int,
                        rank: int, num_blocks: int = 1) -> dict[str, AdapterBlock]:
    """A ~ N(0, 0.02^2), B = 0, so the initial adapter is a no-op."""
    blocks = {}
    in_dim = input_dim
    for k in range(num_blocks):
        rng = stream(master_seed, TAG_ADAPTER_INIT, k)
        name = f"block{k}"
        blocks[name] = AdapterBlock(
            block_name=name,
            a=rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, in_dim)),
            b=np.zeros((feature_dim, rank)),
        )
        in_dim = feature_dim
    return blocks


@dataclass
class Head:
    w: np.ndarray  # [C, d]
    b: np.ndarray  # [C]


def init_head(num_classes: int, feature_dim: int) -> Head:
    return Head(w=np.zeros((num_classes, feature_dim)), b=np.zeros(num_classes))


@dataclass
class ClientState:
    """One client's private pieces; owned by a single worker at a time."""

    client_id: int
    data: object  # ClientDataset
    head: Head
    adapter: dict[str, AdapterBlock]


def forward(x, adapter: dict[str, AdapterBlock], head: Head,
            backbone: FrozenBackbone):
    """Logits for a batch; accepts arrays or Tensors for the parameters.

    Tensor parameters participate in an active tape; arrays are wrapped
    as constants.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    names = sorted(adapter)
    if len(names) != len(backbone.layers):
        raise DimensionError("one adapter block per backbone layer required")
    z = x
    for name, w in zip(names, backbone.layers):
        block = adapter[name]
        a = block.a if isinstance(block.a, Tensor) else Tensor(block.a)
        b = block.b if isinstance(block.b, Tensor) else Tensor(block.b)
        feat = tanh(matmul(z, Tensor(w.T)))
        low = matmul(matmul(z, transpose(a, (1, 0))), transpose(b, (1, 0)))
        z = add(feat, low)
    hw = head.w if isinstance(head.w, Tensor) else Tensor(head.w)
    hb = head.b if isinstance(head.b, Tensor) else Tensor(head.b)
    return add(matmul(z, transpose(hw, (1, 0))), hb)


def _loss_on_batch(x, y, adapter, head, backbone):
    return cross_entropy(forward(x, adapter, head, backbone), y)


def local_train(adapter_in: dict[str, AdapterBlock], head_in: Head, data,
                epochs: int, lr: float, batch_size: int,
                rng: np.random.Generator, backbone: FrozenBackbone):
    """SGD over shuffled mini-batches on the local cross-entropy.

    Returns (adapter_out, head_out, deltas) where deltas maps block name
    to the flat update vector and adapter_out is reconstructed as
    flatten(adapter_in) + delta so the additivity identity is exact.
    """
    if epochs < 0 or batch_size < 1:
        raise ClientError("epochs must be >= 0 and batch_size >= 1")
    n = len(data.y_train)
    if n == 0:
        raise ClientError("empty training set")
    names = sorted(adapter_in)
    params: dict[str, np.ndarray] = {}
    for name in names:
        params[f"{name}.a"] = adapter_in[name].a
        params[f"{name}.b"] = adapter_in[name].b
    params["head.w"] = head_in.w
    params["head.b"] = head_in.b
    opt = OptimizerState("sgd", learning_rate=lr)

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            with Tape() as tape:
                leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                blocks = {
                    name: AdapterBlock(name, leaves[f"{name}.a"], leaves[f"{name}.b"])
                    for name in names
                }
                head = Head(leaves["head.w"], leaves["head.b"])
                loss = _loss_on_batch(xb, yb, blocks, head, backbone)
            tape.backward(loss)
            grads = {k: tape.grad(leaf) for k, leaf in leaves.items()}
            grads = {k: (np.zeros_like(params[k]) if g is None else g)
                     for k, g in grads.items()}
            params = optimizer_step(opt, params, grads)

    deltas = {}
    adapter_out = {}
    for name in names:
        flat_in = adapter_in[name].flatten()
        flat_raw = np.concatenate([params[f"{name}.a"].ravel(), params[f"{name}.b"].ravel()])
        delta = flat_raw - flat_in
        deltas[name] = delta
        adapter_out[name] = adapter_in[name].with_flat(flat_in + delta)
    head_out = Head(params["head.w"], params["head.b"])
    return adapter_out, head_out, deltas


def evaluate(adapter: dict[str, AdapterBlock], head: Head, x, y,
             backbone: FrozenBackbone) -> dict[str, float]:
    """Mean cross-entropy and top-1 accuracy; argmax ties go to the lowest class."""
    if len(y) == 0:
        raise ClientError("empty evaluation split")
    logits = forward(x, adapter, head, backbone)
    loss = cross_entropy(logits, y).item()
    predictions = np.argmax(logits.data, axis=1)
    return {"loss": loss, "accuracy": float(np.mean(predictions == y))}


def client_shuffle_rng(master_seed: int, client_id: int, round_index: int) -> np.random.Generator:
    """Mini-batch shuffle stream; independent of other clients and rounds."""
    return stream(master_seed, TAG_SHUFFLE, client_id, round_index)


# ---------------------------------------------------------------------------
# wire messages
# ---------------------------------------------------------------------------

_SERIALIZED_COUNTS = {"client_update": 0, "server_broadcast": 0}


def serialized_message_counts() -> dict[str, int]:
    return dict(_SERIALIZED_COUNTS)


@dataclass
class ClientUpdateMessage:
    """Client -> server: flat update vectors only; heads never leave the client."""

    client_id: int
    round_index: int
    dataset_size: int
    block_deltas: dict[str, np.ndarray]

    def to_json(self) -> str:
        _SERIALIZED_COUNTS["client_update"] += 1
        return json.dumps({
            "client_id": self.client_id,
            "round": self.round_index,
            "dataset_size": self.dataset_size,
            "blocks": {k: v.tolist() for k, v in sorted(self.block_deltas.items())},
        })

    @classmethod
    def from_json(cls, raw: str) -> "ClientUpdateMessage":
        obj = json.loads(raw)
        return cls(client_id=obj["client_id"], round_index=obj["round"],
                   dataset_size=obj["dataset_size"],
                   block_deltas={k: np.asarray(v) for k, v in obj["blocks"].items()})


@dataclass
class ServerBroadcastMessage:
    """Server -> client: flat personalized adapter vectors per block."""

    round_index: int
    block_adapters: dict[str, np.ndarray]

    def to_json(self) -> str:
        _SERIALIZED_COUNTS["server_broadcast"] += 1
        return json.dumps({
            "round": self.round_index,
            "blocks": {k: v.tolist() for k, v in sorted(self.block_adapters.items())},
        })

    @classmethod
    def from_json(cls, raw: str) -> "ServerBroadcastMessage":
        obj = json.loads(raw)
        return cls(round_index=obj["round"],
                   block_adapters={k: np.asarray(v) for k, v in obj["blocks"].items()})
