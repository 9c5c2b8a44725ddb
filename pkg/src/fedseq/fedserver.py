"""Server-side orchestration of the federated round loop.

Round t (1-based):

  1. broadcast the previous round's personalized adapters (the initial
     global adapter before round 1)
  2. every client trains locally and returns a flat update per block
  3. the sequential learner takes one optimizer step against the window
     ending at t-1 (skipped at t=1)
  4. updated adapters are reconstructed and aggregated into the global
     adapter, weighted by dataset size
  5. the stacked update matrix joins the capped sequence buffer
  6. personalized adapters are generated: the global adapter alone
     during warm-up, global + calibration afterwards
  7. clients are evaluated on their local train/test splits

Nothing mutates until the whole round has been computed, so any client
failure leaves the simulation exactly at round t-1.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .clientsim import (
    AdapterBlock,
    ClientState,
    ClientUpdateMessage,
    Head,
    ServerBroadcastMessage,
    client_shuffle_rng,
    evaluate,
    init_adapter_blocks,
    init_backbone,
    init_head,
    local_train,
)
from .errors import ProtocolError, StateError
from .numerics import OptimizerState, Tape, Tensor, mul, neg, optimizer_step, tensor_sum
from .seeding import TAG_LEARNER_INIT, stream
from .seqlearner import (
    LearnerConfig,
    MlpConfig,
    init_mlp_params,
    init_ssm_params,
    mlp_forward,
    seqlearner_forward,
)

UPDATE_SIGNS = ("descent", "flipped")


# ---------------------------------------------------------------------------
# flat-vector server ops
# ---------------------------------------------------------------------------


def reconstruct_updated(theta_prev: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Client's updated adapter from its last personalized adapter + update."""
    if theta_prev.shape != delta.shape:
        raise ProtocolError(
            f"adapter/update length mismatch: {theta_prev.shape} vs {delta.shape}")
    return theta_prev + delta


def aggregate(thetas: list[np.ndarray], sizes: list[int]) -> np.ndarray:
    """Dataset-size-weighted average, exactly rounded per coordinate.

    Summation uses math.fsum so the result is independent of client
    order (bitwise permutation invariance).
    """
    if not thetas:
        raise ProtocolError("aggregate called with no clients")
    if len(thetas) != len(sizes):
        raise ProtocolError("thetas and sizes differ in length")
    if any(s <= 0 for s in sizes):
        raise ProtocolError("dataset sizes must be positive")
    length = thetas[0].shape
    if any(t.shape != length for t in thetas):
        raise ProtocolError("adapter vectors differ in length")
    total = float(sum(sizes))
    products = np.stack([(s / total) * t for s, t in zip(sizes, thetas)])
    return np.array([math.fsum(products[:, j]) for j in range(products.shape[1])])


def aggregation_weights(sizes: list[int]) -> np.ndarray:
    total = float(sum(sizes))
    return np.array([s / total for s in sizes])


class UpdateSequenceBuffer:
    """Ring of the last `capacity` stacked update matrices, per block."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ProtocolError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def rounds(self) -> list[int]:
        return [r for r, _ in self._entries]

    def push(self, round_index: int, stacked: dict[str, np.ndarray]) -> None:
        if self._entries and round_index <= self._entries[-1][0]:
            raise ProtocolError(
                f"round tag {round_index} not after {self._entries[-1][0]}")
        self._entries.append((round_index, {k: v.copy() for k, v in stacked.items()}))

    def window(self, extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Stack entries (oldest first) into [D_block, N, L'] per block.

        `extra` appends one more step without pushing it; the oldest
        entry is dropped if that would exceed capacity.
        """
        entries = [e for _, e in self._entries]
        if extra is not None:
            entries.append(extra)
            if len(entries) > self.capacity:
                entries = entries[len(entries) - self.capacity:]
        if not entries:
            return {}
        names = entries[0].keys()
        return {name: np.stack([e[name] for e in entries], axis=2) for name in names}

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "entries": [
                {"round": r, "blocks": {k: v.tolist() for k, v in blocks.items()}}
                for r, blocks in self._entries
            ],
        }

    @classmethod
    def from_state(cls, blob: dict) -> "UpdateSequenceBuffer":
        buf = cls(blob["capacity"])
        for entry in blob["entries"]:
            buf._entries.append((entry["round"],
                                 {k: np.asarray(v) for k, v in entry["blocks"].items()}))
        return buf


# ---------------------------------------------------------------------------
# learner banks
# ---------------------------------------------------------------------------


def _adam_like(opt: OptimizerState) -> OptimizerState:
    clone = OptimizerState(opt.kind, opt.learning_rate, step=opt.step)
    clone.m = {k: v.copy() for k, v in opt.m.items()}
    clone.v = {k: v.copy() for k, v in opt.v.items()}
    return clone


def _one_step(params: dict, opt: OptimizerState, forward_fn, window: np.ndarray,
              delta_mat: np.ndarray, sign: str) -> tuple[dict, OptimizerState]:
    """One optimizer step on the proxy surrogate s = -(or +) sum(xi * delta)."""
    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        xi = forward_fn(window, leaves)
        inner = tensor_sum(mul(xi, Tensor(delta_mat)))
        s = neg(inner) if sign == "descent" else inner
    tape.backward(s)
    grads = {k: tape.grad(leaf) for k, leaf in leaves.items()}
    grads = {k: (np.zeros_like(params[k]) if g is None else g) for k, g in grads.items()}
    new_opt = _adam_like(opt)
    new_params = optimizer_step(new_opt, params, grads)
    return new_params, new_opt


class SsmLearnerBank:
    """One selective-SSM learner per adapter block, width = num clients."""

    kind = "ssm"

    def __init__(self, block_names: list[str], config: LearnerConfig, lr: float,
                 master_seed: int, scan_mode: str = "sequential",
                 update_sign: str = "descent", _init: bool = True):
        if update_sign not in UPDATE_SIGNS:
            raise ProtocolError(f"unknown update sign {update_sign!r}")
        self.block_names = list(block_names)
        self.config = config
        self.lr = lr
        self.scan_mode = scan_mode
        self.update_sign = update_sign
        self.params: dict[str, dict[str, np.ndarray]] = {}
        self.opt: dict[str, OptimizerState] = {}
        if _init:
            for idx, name in enumerate(self.block_names):
                self.params[name] = init_ssm_params(
                    config, stream(master_seed, TAG_LEARNER_INIT, idx))
                self.opt[name] = OptimizerState("adam", lr)
        self._master_seed = master_seed

    def _forward(self, window, leaves):
        return seqlearner_forward(window, leaves, self.config, self.scan_mode)

    def infer(self, windows: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: self._forward(windows[name], self.params[name]).data
                for name in self.block_names}

    def updated(self, windows: dict[str, np.ndarray],
                latest: dict[str, np.ndarray]) -> "SsmLearnerBank":
        clone = self._clone()
        for name in self.block_names:
            clone.params[name], clone.opt[name] = _one_step(
                self.params[name], self.opt[name], self._forward,
                windows[name], latest[name], self.update_sign)
        return clone

    def _clone(self):
        clone = type(self)(self.block_names, self.config, self.lr, self._master_seed,
                           self.scan_mode, self.update_sign, _init=False)
        clone.params = dict(self.params)
        clone.opt = dict(self.opt)
        return clone

    def state_dict(self) -> dict:
        return {
            "params": {b: {k: v.tolist() for k, v in p.items()}
                       for b, p in self.params.items()},
            "opt": {b: {"step": o.step,
                        "m": {k: v.tolist() for k, v in o.m.items()},
                        "v": {k: v.tolist() for k, v in o.v.items()}}
                    for b, o in self.opt.items()},
        }

    def load_state(self, blob: dict) -> None:
        self.params = {b: {k: np.asarray(v) for k, v in p.items()}
                       for b, p in blob["params"].items()}
        self.opt = {}
        for b, o in blob["opt"].items():
            opt = OptimizerState("adam", self.lr, step=o["step"])
            opt.m = {k: np.asarray(v) for k, v in o["m"].items()}
            opt.v = {k: np.asarray(v) for k, v in o["v"].items()}
            self.opt[b] = opt


class PerClientLearnerBank(SsmLearnerBank):
    """Width-1 learners, one per (block, client): no cross-client mixing."""

    kind = "ssm_per_client"

    def __init__(self, block_names: list[str], num_clients: int, config: LearnerConfig,
                 lr: float, master_seed: int, scan_mode: str = "sequential",
                 update_sign: str = "descent", _init: bool = True):
        solo = LearnerConfig(width=1, expand=config.expand, state_dim=config.state_dim,
                             conv_kernel=config.conv_kernel, num_blocks=config.num_blocks,
                             conv_bias=config.conv_bias, output_scale=config.output_scale)
        super().__init__(block_names, solo, lr, master_seed, scan_mode, update_sign,
                         _init=False)
        self.num_clients = num_clients
        if _init:
            for idx, name in enumerate(self.block_names):
                for i in range(num_clients):
                    key = f"{name}#{i}"
                    self.params[key] = init_ssm_params(
                        solo, stream(master_seed, TAG_LEARNER_INIT, idx, i))
                    self.opt[key] = OptimizerState("adam", lr)

    def infer(self, windows: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name in self.block_names:
            cols = []
            for i in range(self.num_clients):
                col = self._forward(windows[name][:, i : i + 1, :],
                                    self.params[f"{name}#{i}"]).data
                cols.append(col)
            out[name] = np.concatenate(cols, axis=1)
        return out

    def updated(self, windows, latest):
        clone = self._clone()
        for name in self.block_names:
            for i in range(self.num_clients):
                key = f"{name}#{i}"
                clone.params[key], clone.opt[key] = _one_step(
                    self.params[key], self.opt[key], self._forward,
                    windows[name][:, i : i + 1, :], latest[name][:, i : i + 1],
                    self.update_sign)
        return clone

    def _clone(self):
        clone = type(self)(self.block_names, self.num_clients, self.config, self.lr,
                           self._master_seed, self.scan_mode, self.update_sign,
                           _init=False)
        clone.params = dict(self.params)
        clone.opt = dict(self.opt)
        return clone


class MlpLearnerBank(SsmLearnerBank):
    """Fixed-length MLP alternative; windows are zero-padded to max length."""

    kind = "mlp"

    def __init__(self, block_names: list[str], config: MlpConfig, lr: float,
                 master_seed: int, update_sign: str = "descent", _init: bool = True):
        self.block_names = list(block_names)
        self.config = config
        self.lr = lr
        self.scan_mode = "sequential"
        if update_sign not in UPDATE_SIGNS:
            raise ProtocolError(f"unknown update sign {update_sign!r}")
        self.update_sign = update_sign
        self.params = {}
        self.opt = {}
        self._master_seed = master_seed
        if _init:
            for idx, name in enumerate(self.block_names):
                self.params[name] = init_mlp_params(
                    config, stream(master_seed, TAG_LEARNER_INIT, idx))
                self.opt[name] = OptimizerState("adam", lr)

    def _forward(self, window, leaves):
        return mlp_forward(window, leaves, self.config)

    def _clone(self):
        clone = type(self)(self.block_names, self.config, self.lr, self._master_seed,
                           self.update_sign, _init=False)
        clone.params = dict(self.params)
        clone.opt = dict(self.opt)
        return clone


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass
class ServerState:
    round_index: int = 0
    global_adapter: dict[str, np.ndarray] = field(default_factory=dict)
    personalized: list[dict[str, np.ndarray]] = field(default_factory=list)
    calibrations: list[dict[str, np.ndarray]] | None = None
    buffer: UpdateSequenceBuffer | None = None
    learner: object = None


MODES = ("local", "fedavg", "learner")
PERSONALIZATION = ("additive", "replace")


class Simulation:
    """Owns the clients, the server state, and the round loop."""

    def __init__(self, *, dataset, model: dict, local_cfg: dict, mode: str,
                 warmup: int = 0, max_len: int = 1, learner_bank=None,
                 personalization: str = "additive", master_seed: int = 0,
                 parallel_clients: bool = False):
        if mode not in MODES:
            raise ProtocolError(f"unknown mode {mode!r}")
        if personalization not in PERSONALIZATION:
            raise ProtocolError(f"unknown personalization {personalization!r}")
        if mode == "learner" and learner_bank is None:
            raise ProtocolError("learner mode requires a learner bank")
        self.dataset = dataset
        self.mode = mode
        self.warmup = warmup
        self.personalization = personalization
        self.master_seed = master_seed
        self.parallel_clients = parallel_clients
        self.local_cfg = dict(local_cfg)
        self.construction_log: list[str] = []
        self.fault_hook = None  # test seam: fault_hook(client_id, round) may raise

        num_blocks = model.get("num_adapter_blocks", 1)
        self.backbone = init_backbone(master_seed, model["input_dim"],
                                      model["feature_dim"], num_blocks)
        self.backbone_hash = self.backbone.content_hash()
        self.template = init_adapter_blocks(master_seed, model["input_dim"],
                                            model["feature_dim"], model["rank"],
                                            num_blocks)
        self.block_names = sorted(self.template)
        self.num_classes = model["num_classes"]
        self.construction_log.append(f"backbone(blocks={num_blocks})")

        initial = {name: blk.flatten() for name, blk in self.template.items()}
        self.clients = []
        for i in range(dataset.num_clients):
            self.clients.append(ClientState(
                client_id=i,
                data=dataset.clients[i],
                head=init_head(model["num_classes"], model["feature_dim"]),
                adapter={name: self.template[name].with_flat(initial[name].copy())
                         for name in self.block_names},
            ))
        self.construction_log.append(f"clients(n={dataset.num_clients})")

        self.state = ServerState()
        if mode != "local":
            self.state.global_adapter = {k: v.copy() for k, v in initial.items()}
            self.state.personalized = [
                {k: v.copy() for k, v in initial.items()}
                for _ in range(dataset.num_clients)
            ]
            self.construction_log.append("server")
        if mode == "learner":
            self.state.buffer = UpdateSequenceBuffer(max_len)
            self.state.learner = learner_bank
            self.construction_log.append(f"learner({learner_bank.kind})")

    # -- round loop --------------------------------------------------------

    def _train_one(self, client: ClientState, blocks: dict[str, AdapterBlock], t: int):
        if self.fault_hook is not None:
            self.fault_hook(client.client_id, t)
        rng = client_shuffle_rng(self.master_seed, client.client_id, t)
        return local_train(blocks, client.head, client.data,
                           epochs=self.local_cfg["epochs"], lr=self.local_cfg["lr"],
                           batch_size=self.local_cfg["batch_size"], rng=rng,
                           backbone=self.backbone)

    def run_round(self, on_round=None) -> list[dict]:
        """Execute one full round; returns metric rows. Atomic on failure."""
        t = self.state.round_index + 1
        if self.backbone.content_hash() != self.backbone_hash:
            raise ProtocolError("frozen backbone changed between rounds")

        # 1. broadcast through the wire format (identity for local mode)
        if self.mode == "local":
            received = [client.adapter for client in self.clients]
        else:
            received = []
            for client in self.clients:
                msg = ServerBroadcastMessage(
                    round_index=t - 1,
                    block_adapters=self.state.personalized[client.client_id])
                decoded = ServerBroadcastMessage.from_json(msg.to_json())
                received.append({
                    name: self.template[name].with_flat(decoded.block_adapters[name])
                    for name in self.block_names
                })

        # 2. local training (optionally fanned out; applied in id order)
        def train(i):
            return self._train_one(self.clients[i], received[i], t)

        ids = range(len(self.clients))
        if self.parallel_clients:
            with ThreadPoolExecutor(max_workers=min(8, len(self.clients))) as pool:
                results = list(pool.map(train, ids))
        else:
            results = [train(i) for i in ids]

        updates = []
        if self.mode != "local":
            for client, (_, _, deltas) in zip(self.clients, results):
                msg = ClientUpdateMessage(
                    client_id=client.client_id, round_index=t,
                    dataset_size=client.data.train_size, block_deltas=deltas)
                updates.append(ClientUpdateMessage.from_json(msg.to_json()))

        new_learner = self.state.learner
        new_global = self.state.global_adapter
        new_personalized = self.state.personalized
        new_calibrations = self.state.calibrations
        pushed = None
        inspect: dict = {}

        if self.mode != "local":
            stacked = {
                name: np.stack([u.block_deltas[name] for u in updates], axis=1)
                for name in self.block_names
            }

            # 3. learner step against the window ending at t-1
            if self.state.learner is not None and t >= 2:
                if len(self.state.buffer) == 0:
                    raise StateError(f"update buffer empty at round {t}")
                window_prev = self.state.buffer.window()
                new_learner = self.state.learner.updated(window_prev, stacked)

            # 4. reconstruct + aggregate
            thetas = {name: [] for name in self.block_names}
            sizes = [u.dataset_size for u in updates]
            for i, u in enumerate(updates):
                for name in self.block_names:
                    thetas[name].append(reconstruct_updated(
                        self.state.personalized[i][name], u.block_deltas[name]))
            new_global = {name: aggregate(thetas[name], sizes)
                          for name in self.block_names}

            # 5./6. buffer push + personalized generation
            pushed = stacked
            if self.state.learner is not None and t > self.warmup:
                window_now = self.state.buffer.window(extra=stacked)
                xi = new_learner.infer(window_now)
                new_calibrations = [
                    {name: xi[name][:, i].copy() for name in self.block_names}
                    for i in range(len(self.clients))
                ]
                if self.personalization == "additive":
                    new_personalized = [
                        {name: new_global[name] + cal[name] for name in self.block_names}
                        for cal in new_calibrations
                    ]
                else:
                    new_personalized = [
                        {name: cal[name].copy() for name in self.block_names}
                        for cal in new_calibrations
                    ]
                inspect["calibrations"] = new_calibrations
            else:
                new_personalized = [
                    {name: new_global[name].copy() for name in self.block_names}
                    for _ in self.clients
                ]
                new_calibrations = None
            inspect["aggregate_inputs"] = (thetas, sizes)
            inspect["global_adapter"] = new_global
            inspect["personalized"] = new_personalized

        # 7. evaluate with this round's personalized adapters + fresh heads
        rows = []
        for i, client in enumerate(self.clients):
            adapter_out, head_out, _ = results[i]
            if self.mode == "local":
                eval_blocks = adapter_out
            else:
                eval_blocks = {
                    name: self.template[name].with_flat(new_personalized[i][name])
                    for name in self.block_names
                }
            for split in ("train", "test"):
                x = client.data.x_train if split == "train" else client.data.x_test
                y = client.data.y_train if split == "train" else client.data.y_test
                scores = evaluate(eval_blocks, head_out, x, y, self.backbone)
                rows.append({"round": t, "client_id": i, "split": split,
                             "loss": scores["loss"], "accuracy": scores["accuracy"]})

        # commit phase: nothing above mutated shared state
        for i, client in enumerate(self.clients):
            adapter_out, head_out, _ = results[i]
            client.head = head_out
            client.adapter = adapter_out if self.mode == "local" else received[i]
        if self.mode != "local":
            self.state.global_adapter = new_global
            self.state.personalized = new_personalized
            self.state.calibrations = new_calibrations
            self.state.learner = new_learner
            if self.state.buffer is not None and pushed is not None:
                self.state.buffer.push(t, pushed)
        self.state.round_index = t

        if on_round is not None:
            on_round(self, t, inspect)
        return rows

    def run(self, rounds: int, on_round=None) -> list[dict]:
        rows = []
        for _ in range(rounds):
            rows.extend(self.run_round(on_round=on_round))
        return rows

    # -- checkpointing -------------------------------------------------------

    def state_dict(self, fingerprint: dict) -> dict:
        blob = {
            "fingerprint": fingerprint,
            "backbone_hash": self.backbone_hash,
            "round_index": self.state.round_index,
            "clients": [
                {
                    "head_w": c.head.w.tolist(),
                    "head_b": c.head.b.tolist(),
                    "adapter": {k: v.flatten().tolist() for k, v in c.adapter.items()},
                }
                for c in self.clients
            ],
        }
        if self.mode != "local":
            blob["global_adapter"] = {k: v.tolist()
                                      for k, v in self.state.global_adapter.items()}
            blob["personalized"] = [{k: v.tolist() for k, v in p.items()}
                                    for p in self.state.personalized]
            blob["calibrations"] = None if self.state.calibrations is None else [
                {k: v.tolist() for k, v in p.items()} for p in self.state.calibrations]
        if self.state.buffer is not None:
            blob["buffer"] = self.state.buffer.state_dict()
        if self.state.learner is not None:
            blob["learner"] = self.state.learner.state_dict()
        return blob

    def load_state_dict(self, blob: dict, fingerprint: dict) -> None:
        from .errors import CheckpointError

        if blob.get("fingerprint") != fingerprint:
            raise CheckpointError("checkpoint fingerprint does not match this config")
        if blob.get("backbone_hash") != self.backbone_hash:
            raise CheckpointError("checkpoint backbone does not match this config")
        self.state.round_index = blob["round_index"]
        for client, entry in zip(self.clients, blob["clients"]):
            client.head = Head(np.asarray(entry["head_w"]), np.asarray(entry["head_b"]))
            client.adapter = {
                name: self.template[name].with_flat(np.asarray(flat))
                for name, flat in entry["adapter"].items()
            }
        if self.mode != "local":
            self.state.global_adapter = {k: np.asarray(v)
                                         for k, v in blob["global_adapter"].items()}
            self.state.personalized = [{k: np.asarray(v) for k, v in p.items()}
                                       for p in blob["personalized"]]
            cals = blob.get("calibrations")
            self.state.calibrations = None if cals is None else [
                {k: np.asarray(v) for k, v in p.items()} for p in cals]
        if self.state.buffer is not None:
            self.state.buffer = UpdateSequenceBuffer.from_state(blob["buffer"])
        if self.state.learner is not None:
            self.state.learner.load_state(blob["learner"])
