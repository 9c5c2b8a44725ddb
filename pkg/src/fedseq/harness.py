"""Experiment driver: configs, method dispatch, metrics, gradcheck, compare.

Config files are JSON with the schema below (defaults shown). Metrics
files are CSV with the exact header
`round,client_id,split,loss,accuracy,method,seed`, preceded by comment
lines starting with `#` that embed the config verbatim, so a metrics
file is fully reconstructible from its own header.

    {
      "method": "pfedseq",            # pfedseq | fedavg | local | variant_a
                                      # | variant_b | variant_c | mlp_learner
      "rounds": 60, "num_clients": 8, "warmup": 10, "max_seq_len": 10,
      "local":   {"lr": 0.05, "epochs": 1, "batch_size": 32},
      "learner": {"lr": 0.001, "expand": 2, "state_dim": 16, "conv_kernel": 4,
                  "num_blocks": 2, "zero_bias": true, "scan_mode": "sequential",
                  "update_sign": "descent", "mlp_hidden": 64,
                  "output_scale": 0.01},
      "model":   {"input_dim": 32, "feature_dim": 64, "rank": 4,
                  "num_classes": 8, "num_adapter_blocks": 1},
      "data":    {"samples_per_class": 96, "class_mean_scale": 2.0,
                  "noise_std": 1.0, "alpha": 0.1, "feature_skew": "none",
                  "rotation_angle_std": 0.0, "train_fraction": 0.25},
      "master_seed": 1, "output_dir": "runs", "parallel_clients": false
    }
"""

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .clientsim import serialized_message_counts
from .errors import ComparisonError, ConfigError, ProtocolError
from .fedserver import (
    MlpLearnerBank,
    PerClientLearnerBank,
    Simulation,
    SsmLearnerBank,
)
from .numerics import (
    Tensor,
    finite_diff_check,
    mul,
    neg,
    tensor_sum,
)
from .seqlearner import LearnerConfig, MlpConfig, random_ssm_params, seqlearner_forward
from .synthdata import DatasetSpec, build_federated_dataset

METHODS = ("pfedseq", "fedavg", "local", "variant_a", "variant_b", "variant_c",
           "mlp_learner")

CSV_HEADER = "round,client_id,split,loss,accuracy,method,seed"

# Desk-scale defaults, calibrated so that all methods converge within the
# horizon: ~4 local steps per round (batch 8 on ~32-sample train splits),
# 30 rounds, and blob separation giving final accuracies in the 0.7-0.9
# band where the method ordering is visible.
DEFAULTS = {
    "method": "pfedseq",
    "rounds": 30,
    "num_clients": 8,
    "warmup": 10,
    "max_seq_len": 10,
    "local": {"lr": 0.05, "epochs": 1, "batch_size": 8},
    "learner": {"lr": 0.001, "expand": 2, "state_dim": 16, "conv_kernel": 4,
                "num_blocks": 2, "zero_bias": True, "scan_mode": "sequential",
                "update_sign": "descent", "mlp_hidden": 64, "output_scale": 0.01},
    "model": {"input_dim": 32, "feature_dim": 64, "rank": 4, "num_classes": 8,
              "num_adapter_blocks": 1},
    "data": {"samples_per_class": 128, "class_mean_scale": 1.6, "noise_std": 4.0,
             "alpha": 0.1, "feature_skew": "none", "rotation_angle_std": 0.0,
             "train_fraction": 0.25},
    "master_seed": 1,
    "output_dir": "runs",
    "parallel_clients": False,
}


@dataclass
class ExperimentConfig:
    """Validated experiment description; round-trips losslessly to JSON."""

    method: str = "pfedseq"
    rounds: int = 30
    num_clients: int = 8
    warmup: int = 10
    max_seq_len: int = 10
    local: dict = field(default_factory=lambda: dict(DEFAULTS["local"]))
    learner: dict = field(default_factory=lambda: dict(DEFAULTS["learner"]))
    model: dict = field(default_factory=lambda: dict(DEFAULTS["model"]))
    data: dict = field(default_factory=lambda: dict(DEFAULTS["data"]))
    master_seed: int = 1
    output_dir: str = "runs"
    parallel_clients: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(DEFAULTS)
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        merged = copy.deepcopy(DEFAULTS)
        for key, value in raw.items():
            if isinstance(merged.get(key), dict):
                if not isinstance(value, dict):
                    raise ConfigError(key, "expected an object")
                for sub in value:
                    if sub not in merged[key]:
                        raise ConfigError(f"{key}.{sub}", "unknown field")
                merged[key].update(value)
            else:
                merged[key] = value
        config = cls(**merged)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError("<file>", f"not valid JSON: {err}") from err
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "rounds": self.rounds,
            "num_clients": self.num_clients, "warmup": self.warmup,
            "max_seq_len": self.max_seq_len, "local": dict(self.local),
            "learner": dict(self.learner), "model": dict(self.model),
            "data": dict(self.data), "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "parallel_clients": self.parallel_clients,
        }

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        if self.num_clients < 2:
            raise ConfigError("num_clients", "must be >= 2")
        if not (0 <= self.warmup < self.rounds):
            raise ConfigError("warmup", "must satisfy 0 <= warmup < rounds")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len", "must be >= 1")
        if self.method == "variant_b" and self.max_seq_len != 1:
            raise ConfigError("max_seq_len", "variant_b requires max_seq_len == 1")
        if self.local["lr"] < 0:
            raise ConfigError("local.lr", "must be >= 0")
        if self.local["epochs"] < 0:
            raise ConfigError("local.epochs", "must be >= 0")
        if self.local["batch_size"] < 1:
            raise ConfigError("local.batch_size", "must be >= 1")
        if self.learner["scan_mode"] not in ("sequential", "parallel"):
            raise ConfigError("learner.scan_mode", "must be sequential or parallel")
        if self.learner["update_sign"] not in ("descent", "flipped"):
            raise ConfigError("learner.update_sign", "must be descent or flipped")
        for key in ("expand", "state_dim", "conv_kernel", "num_blocks", "mlp_hidden"):
            if self.learner[key] < 1:
                raise ConfigError(f"learner.{key}", "must be >= 1")
        for key in ("input_dim", "feature_dim", "rank", "num_classes"):
            if self.model[key] < 1:
                raise ConfigError(f"model.{key}", "must be >= 1")
        if self.model["num_classes"] < 2:
            raise ConfigError("model.num_classes", "must be >= 2")
        if self.model["num_adapter_blocks"] < 1:
            raise ConfigError("model.num_adapter_blocks", "must be >= 1")
        if self.data["alpha"] <= 0:
            raise ConfigError("data.alpha", "must be > 0")
        if not (0 < self.data["train_fraction"] < 1):
            raise ConfigError("data.train_fraction", "must be in (0, 1)")
        if self.data["samples_per_class"] < 8:
            raise ConfigError("data.samples_per_class", "must be >= 8")

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_classes=self.model["num_classes"],
            input_dim=self.model["input_dim"],
            samples_per_class=self.data["samples_per_class"],
            class_mean_scale=self.data["class_mean_scale"],
            noise_std=self.data["noise_std"],
            feature_skew=self.data["feature_skew"],
            rotation_angle_std=self.data["rotation_angle_std"],
            master_seed=self.master_seed,
        )

    def data_signature(self) -> dict:
        """The fields that determine the dataset, minus the seed."""
        return {
            "num_clients": self.num_clients,
            "num_classes": self.model["num_classes"],
            "input_dim": self.model["input_dim"],
            "data": dict(self.data),
        }

    def run_name(self) -> str:
        return (f"{self.method}_L{self.max_seq_len}_W{self.warmup}"
                f"_seed{self.master_seed}")


def dispatch_variant(config: ExperimentConfig) -> dict:
    """Wire the component graph for the selected method."""
    learner_cfg = LearnerConfig(
        width=config.num_clients,
        expand=config.learner["expand"],
        state_dim=config.learner["state_dim"],
        conv_kernel=config.learner["conv_kernel"],
        num_blocks=config.learner["num_blocks"],
        conv_bias=not config.learner["zero_bias"],
        output_scale=config.learner["output_scale"],
    )
    block_names = [f"block{k}" for k in range(config.model["num_adapter_blocks"])]
    common = dict(lr=config.learner["lr"], master_seed=config.master_seed,
                  update_sign=config.learner["update_sign"])
    method = config.method
    if method == "local":
        return {"mode": "local", "bank": None, "personalization": "additive"}
    if method == "fedavg":
        return {"mode": "fedavg", "bank": None, "personalization": "additive"}
    if method in ("pfedseq", "variant_a", "variant_b"):
        bank = SsmLearnerBank(block_names, learner_cfg,
                              scan_mode=config.learner["scan_mode"], **common)
        personalization = "replace" if method == "variant_a" else "additive"
        return {"mode": "learner", "bank": bank, "personalization": personalization}
    if method == "variant_c":
        bank = PerClientLearnerBank(block_names, config.num_clients, learner_cfg,
                                    scan_mode=config.learner["scan_mode"], **common)
        return {"mode": "learner", "bank": bank, "personalization": "additive"}
    if method == "mlp_learner":
        mlp_cfg = MlpConfig(width=config.num_clients, fixed_len=config.max_seq_len,
                            hidden=config.learner["mlp_hidden"],
                            output_scale=config.learner["output_scale"])
        bank = MlpLearnerBank(block_names, mlp_cfg, **common)
        return {"mode": "learner", "bank": bank, "personalization": "additive"}
    raise ConfigError("method", f"unhandled method {method!r}")


def build_simulation(config: ExperimentConfig) -> Simulation:
    dataset = build_federated_dataset(
        config.dataset_spec(), config.num_clients, config.data["alpha"],
        ratio_train=config.data["train_fraction"])
    plan = dispatch_variant(config)
    return Simulation(
        dataset=dataset, model=config.model, local_cfg=config.local,
        mode=plan["mode"], warmup=config.warmup, max_len=config.max_seq_len,
        learner_bank=plan["bank"], personalization=plan["personalization"],
        master_seed=config.master_seed,
        parallel_clients=config.parallel_clients)


@dataclass
class RunRecord:
    config: ExperimentConfig
    metrics_path: str
    rows: list
    construction_log: list
    messages_serialized: int


def format_rows(rows: list[dict], method: str, seed: int) -> list[str]:
    out = []
    for r in rows:
        out.append(f"{r['round']},{r['client_id']},{r['split']},"
                   f"{float(r['loss'])!r},{float(r['accuracy'])!r},{method},{seed}")
    return out


def run_experiment(config: ExperimentConfig, on_round=None) -> RunRecord:
    """Execute all rounds and write the metrics CSV; returns the record."""
    before = serialized_message_counts()
    sim = build_simulation(config)
    rows = sim.run(config.rounds, on_round=on_round)
    after = serialized_message_counts()
    delta = sum(after.values()) - sum(before.values())
    if config.method == "local" and delta != 0:
        raise ProtocolError("local baseline must not serialize protocol messages")
    if config.method in ("local", "fedavg"):
        if any(entry.startswith("learner") for entry in sim.construction_log):
            raise ProtocolError(f"{config.method} must not instantiate a learner")

    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, config.run_name() + ".csv")
    lines = [f"# config = {json.dumps(config.to_dict(), sort_keys=True)}", CSV_HEADER]
    lines.extend(format_rows(rows, config.method, config.master_seed))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return RunRecord(config=config, metrics_path=path, rows=rows,
                     construction_log=sim.construction_log,
                     messages_serialized=delta)


def parse_metrics_csv(path: str) -> tuple[dict | None, list[dict]]:
    """Read a metrics CSV back; returns (embedded config, rows)."""
    config = None
    rows = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            if ln.startswith("# config = "):
                config = json.loads(ln[len("# config = "):])
            continue
        if ln:
            body.append(ln)
    if not body or body[0] != CSV_HEADER:
        raise ComparisonError(f"{path}: header differs from {CSV_HEADER!r}")
    for ln in body[1:]:
        parts = ln.split(",")
        rows.append({"round": int(parts[0]), "client_id": int(parts[1]),
                     "split": parts[2], "loss": float(parts[3]),
                     "accuracy": float(parts[4]), "method": parts[5],
                     "seed": int(parts[6])})
    return config, rows


def mean_test_accuracy_by_round(rows: list[dict]) -> dict[int, float]:
    """Unweighted mean over clients of test accuracy, per round."""
    per_round: dict[int, list[float]] = {}
    for r in rows:
        if r["split"] == "test":
            per_round.setdefault(r["round"], []).append(r["accuracy"])
    return {t: float(np.mean(v)) for t, v in sorted(per_round.items())}


def final_mean_test_accuracy(rows: list[dict]) -> float:
    curve = mean_test_accuracy_by_round(rows)
    return curve[max(curve)]


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _sample_std(values: list[float]) -> float:
    """Sample standard deviation (n-1 denominator); 0.0 for a single value."""
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values), ddof=1))


def compare(configs: list[ExperimentConfig], out_dir: str) -> str:
    """Run every config, group by (method, L, W), and write summary tables.

    Writes `summary.csv` (one row per group: final accuracy mean +/- std
    across seeds) and `curves.csv` (per-round mean curves); returns the
    summary path. All configs must share the data signature, and every
    group must see the same multiset of seeds.
    """
    if len(configs) < 2:
        raise ComparisonError("compare needs at least 2 configs")
    signature = json.dumps(configs[0].data_signature(), sort_keys=True)
    for cfg in configs[1:]:
        if json.dumps(cfg.data_signature(), sort_keys=True) != signature:
            raise ComparisonError("configs do not share a data spec")

    groups: dict[tuple, list[RunRecord]] = {}
    for cfg in configs:
        cfg = copy.deepcopy(cfg)
        cfg.output_dir = out_dir
        record = run_experiment(cfg)
        key = (cfg.method, cfg.max_seq_len, cfg.warmup)
        groups.setdefault(key, []).append(record)

    seed_sets = {key: sorted(r.config.master_seed for r in records)
                 for key, records in groups.items()}
    reference = next(iter(seed_sets.values()))
    for key, seeds in seed_sets.items():
        if seeds != reference:
            raise ComparisonError(
                f"group {key} has seeds {seeds}, expected {reference}")

    os.makedirs(out_dir, exist_ok=True)
    summary_lines = ["method,L,W,n_seeds,final_accuracy_mean,final_accuracy_std"]
    curve_lines = ["method,L,W,round,accuracy_mean,accuracy_std"]
    for key in sorted(groups):
        method, seq_len, warmup = key
        records = groups[key]
        finals = [final_mean_test_accuracy(r.rows) for r in records]
        summary_lines.append(
            f"{method},{seq_len},{warmup},{len(finals)},"
            f"{float(np.mean(finals))!r},{_sample_std(finals)!r}")
        curves = [mean_test_accuracy_by_round(r.rows) for r in records]
        for t in sorted(curves[0]):
            vals = [c[t] for c in curves]
            curve_lines.append(f"{method},{seq_len},{warmup},{t},"
                               f"{float(np.mean(vals))!r},{_sample_std(vals)!r}")
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("\n".join(summary_lines) + "\n")
    with open(os.path.join(out_dir, "curves.csv"), "w") as fh:
        fh.write("\n".join(curve_lines) + "\n")
    return summary_path


# ---------------------------------------------------------------------------
# gradcheck suites
# ---------------------------------------------------------------------------

GRADCHECK_SUITES = ("client_loss", "learner_forward", "surrogate")


def _client_loss_instance(rng):
    from fedseq.clientsim import AdapterBlock, Head, forward, init_backbone
    from fedseq.numerics import cross_entropy

    p = int(rng.integers(3, 7))
    d = int(rng.integers(3, 7))
    r = int(rng.integers(1, 3))
    c = int(rng.integers(2, 5))
    n = int(rng.integers(2, 6))
    backbone = init_backbone(int(rng.integers(0, 10_000)), p, d, 1)
    x = rng.normal(size=(n, p))
    y = rng.integers(0, c, size=n)
    params = {"a": rng.normal(0, 0.5, size=(r, p)), "b": rng.normal(0, 0.5, size=(d, r)),
              "w": rng.normal(0, 0.5, size=(c, d)), "bias": rng.normal(0, 0.5, size=c)}

    def f(leaves):
        adapter = {"block0": AdapterBlock("block0", leaves["a"], leaves["b"])}
        head = Head(leaves["w"], leaves["bias"])
        return cross_entropy(forward(x, adapter, head, backbone), y)

    return f, params


def _learner_instance(rng):
    width = int(rng.integers(2, 5))
    cfg = LearnerConfig(width=width, expand=2,
                        state_dim=int(rng.choice([2, 3, 4])),
                        conv_kernel=int(rng.choice([2, 3])),
                        num_blocks=2)
    d = int(rng.integers(1, 5))
    length = int(rng.integers(1, 7))
    window = rng.normal(size=(d, width, length)) * 0.5
    params = random_ssm_params(cfg, rng)
    return cfg, window, params, d, width


def _learner_forward_instance(rng):
    cfg, window, params, d, width = _learner_instance(rng)
    probe = rng.normal(size=(d, width))

    def f(leaves):
        return tensor_sum(mul(seqlearner_forward(window, leaves, cfg), Tensor(probe)))

    return f, params


def _surrogate_instance(rng):
    cfg, window, params, d, width = _learner_instance(rng)
    delta = rng.normal(size=(d, width))

    def f(leaves):
        xi = seqlearner_forward(window, leaves, cfg)
        return neg(tensor_sum(mul(xi, Tensor(delta))))

    return f, params


_SUITE_BUILDERS = {
    "client_loss": _client_loss_instance,
    "learner_forward": _learner_forward_instance,
    "surrogate": _surrogate_instance,
}


def gradcheck(suites: list[str] | None = None, instances: int = 20,
              h: float = 1e-5, tol: float = 1e-5, seed: int = 0) -> dict:
    """Finite-difference suites over randomized small instances.

    Returns {suite: {"max_rel_err", "passed", "instances", "coords"}};
    overall pass is the conjunction.
    """
    suites = list(suites) if suites else list(GRADCHECK_SUITES)
    for name in suites:
        if name not in _SUITE_BUILDERS:
            raise ConfigError("suite", f"unknown suite {name!r}")
    report = {}
    for name in suites:
        rng = np.random.default_rng([seed, hash(name) % (2**31)])
        worst = 0.0
        coords = 0
        for _ in range(instances):
            f, params = _SUITE_BUILDERS[name](rng)
            res = finite_diff_check(f, params, h=h, tol=tol)
            worst = max(worst, res.max_rel_err)
            coords += res.n_coords
        report[name] = {"max_rel_err": worst, "passed": worst <= tol,
                        "instances": instances, "coords": coords}
    report["passed"] = all(report[name]["passed"] for name in suites)
    return report
