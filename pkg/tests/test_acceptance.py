"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a single PASS/FAIL line (visible with `pytest -s` or in
captured output). The experiment runs are shared across criteria through
session-scoped fixtures, so the whole suite stays inside its runtime
budgets.
"""

import math
import time

import numpy as np
import pytest

from fedseq.fedserver import aggregation_weights
from fedseq.harness import (
    ExperimentConfig,
    build_simulation,
    final_mean_test_accuracy,
    gradcheck,
    run_experiment,
)
from fedseq.numerics import Tensor
from fedseq.seqlearner import ssm_scan

SEEDS = (1, 2, 3)


def _report(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
    assert passed, f"{name}: {detail}"


def _default_config(method: str, seed: int, tmp, **overrides) -> ExperimentConfig:
    raw = {"method": method, "master_seed": seed, "output_dir": str(tmp)}
    raw.update(overrides)
    return ExperimentConfig.from_dict(raw)


@pytest.fixture(scope="session")
def trend_runs(tmp_path_factory):
    """Default-config runs of the three headline methods over three seeds."""
    out = tmp_path_factory.mktemp("trend")
    runs = {}
    for method in ("local", "fedavg", "pfedseq"):
        for seed in SEEDS:
            runs[(method, seed)] = run_experiment(
                _default_config(method, seed, out / f"{method}{seed}"))
    return runs


@pytest.fixture(scope="session")
def ablation_runs(tmp_path_factory, trend_runs):
    """Variant runs on the default config (pfedseq reused from trend_runs)."""
    out = tmp_path_factory.mktemp("ablation")
    runs = {("pfedseq", seed): trend_runs[("pfedseq", seed)] for seed in SEEDS}
    for method in ("variant_a", "variant_b", "variant_c"):
        for seed in SEEDS:
            overrides = {"max_seq_len": 1} if method == "variant_b" else {}
            runs[(method, seed)] = run_experiment(
                _default_config(method, seed, out / f"{method}{seed}", **overrides))
    return runs


class TestGradientSuite:
    def test_gradient_suites_within_tolerance_and_budget(self):
        start = time.time()
        report = gradcheck(instances=20, h=1e-5, tol=1e-5, seed=0)
        elapsed = time.time() - start
        worst = max(report[s]["max_rel_err"]
                    for s in ("client_loss", "learner_forward", "surrogate"))
        _report(
            "gradient suite: client loss, learner forward, proxy surrogate",
            report["passed"] and elapsed < 60.0,
            f"max_rel_err={worst:.2e} tol=1e-5, {elapsed:.1f}s < 60s")


class TestScanOracle:
    def test_parallel_scan_matches_sequential_on_100_instances(self):
        start = time.time()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            d = int(rng.integers(1, 5))
            e = int(rng.integers(1, 5))
            m = int(rng.integers(1, 9))
            length = int(rng.integers(1, 17))
            u = [Tensor(rng.normal(size=(d, e))) for _ in range(length)]
            a = [Tensor(np.exp(-np.exp(rng.normal(size=(d, e, m)))))
                 for _ in range(length)]
            b = [Tensor(rng.normal(size=(d, e, m))) for _ in range(length)]
            c = [Tensor(rng.normal(size=(d, m))) for _ in range(length)]
            skip = Tensor(rng.normal(size=e))
            y_seq, h_seq = ssm_scan(u, a, b, c, skip, mode="sequential")
            y_par, h_par = ssm_scan(u, a, b, c, skip, mode="parallel")
            for s, p in zip(y_seq + h_seq, y_par + h_par):
                worst = max(worst, float(np.max(np.abs(p.data - s.data))))
        elapsed = time.time() - start
        _report("scan oracle: parallel vs sequential recurrence",
                worst <= 1e-12 and elapsed < 10.0,
                f"max_abs_diff={worst:.2e} <= 1e-12, {elapsed:.1f}s < 10s")


class TestProtocolInvariants:
    def test_invariants_over_randomized_runs(self, tmp_path):
        start = time.time()
        overrides = {
            "rounds": 30, "num_clients": 4, "warmup": 5, "max_seq_len": 4,
            "model": {"input_dim": 6, "feature_dim": 8, "rank": 2, "num_classes": 3},
            "data": {"samples_per_class": 80, "alpha": 2.0},
            "learner": {"state_dim": 4, "conv_kernel": 2},
        }
        failures = []
        for seed in SEEDS:
            config = _default_config("pfedseq", seed, tmp_path / f"s{seed}", **overrides)
            sim = build_simulation(config)

            def inspect(s, t, info):
                buf_len = len(s.state.buffer)
                if buf_len != min(t, config.max_seq_len):
                    failures.append(f"seed {seed} round {t}: buffer length {buf_len}")
                glob = info["global_adapter"]
                if t <= config.warmup:
                    for p in info["personalized"]:
                        for name in glob:
                            if p[name].tobytes() != glob[name].tobytes():
                                failures.append(f"seed {seed} round {t}: warm-up identity")
                else:
                    for p, cal in zip(info["personalized"], info["calibrations"]):
                        for name in glob:
                            if p[name].tobytes() != (glob[name] + cal[name]).tobytes():
                                failures.append(f"seed {seed} round {t}: additivity")
                thetas, sizes = info["aggregate_inputs"]
                weights = aggregation_weights(sizes)
                if abs(math.fsum(weights) - 1.0) > 1e-15:
                    failures.append(f"seed {seed} round {t}: weights sum")
                for name, vectors in thetas.items():
                    oracle = np.zeros_like(vectors[0])
                    for w, v in zip(weights, vectors):
                        oracle = oracle + w * v
                    if np.max(np.abs(oracle - glob[name])) > 1e-12:
                        failures.append(f"seed {seed} round {t}: aggregation oracle")

            sim.run(config.rounds, on_round=inspect)

            base = run_experiment(_default_config(
                "pfedseq", seed, tmp_path / f"b{seed}", **{**overrides, "max_seq_len": 1}))
            variant = run_experiment(_default_config(
                "variant_b", seed, tmp_path / f"v{seed}", **{**overrides, "max_seq_len": 1}))
            if base.rows != variant.rows:
                failures.append(f"seed {seed}: variant B != pfedseq(L=1)")
        elapsed = time.time() - start
        _report("protocol invariants: warm-up, additivity, buffer, aggregation, variant B",
                not failures and elapsed < 120.0,
                f"{len(failures)} violations, {elapsed:.1f}s < 120s"
                + (f"; first: {failures[0]}" if failures else ""))


class TestDeterminism:
    def test_rerun_and_parallel_are_byte_identical(self, tmp_path):
        overrides = {
            "rounds": 8, "num_clients": 3, "warmup": 2, "max_seq_len": 3,
            "model": {"input_dim": 6, "feature_dim": 8, "rank": 2, "num_classes": 3},
            "data": {"samples_per_class": 32},
            "learner": {"state_dim": 4, "conv_kernel": 2},
        }
        config = _default_config("pfedseq", 5, tmp_path, **overrides)
        first = run_experiment(config)
        with open(first.metrics_path, "rb") as fh:
            bytes_a = fh.read()
        second = run_experiment(config)
        with open(second.metrics_path, "rb") as fh:
            bytes_b = fh.read()
        par_cfg = _default_config("pfedseq", 5, tmp_path, parallel_clients=True,
                                  **overrides)
        third = run_experiment(par_cfg)
        rows_match = third.rows == first.rows
        _report("determinism: rerun byte-identical, parallel equals serial",
                bytes_a == bytes_b and rows_match,
                f"serial rerun identical={bytes_a == bytes_b}, parallel rows match={rows_match}")


class TestTrend:
    def test_personalization_beats_baselines(self, trend_runs):
        margins_fa, margins_lo, wins = [], [], 0
        details = []
        for seed in SEEDS:
            finals = {m: final_mean_test_accuracy(trend_runs[(m, seed)].rows)
                      for m in ("local", "fedavg", "pfedseq")}
            margins_fa.append(finals["pfedseq"] - finals["fedavg"])
            margins_lo.append(finals["pfedseq"] - finals["local"])
            wins += int(finals["pfedseq"] >= max(finals["fedavg"], finals["local"]))
            details.append(f"seed {seed}: lo={finals['local']:.4f} "
                           f"fa={finals['fedavg']:.4f} pf={finals['pfedseq']:.4f}")
        mean_margin = float(np.mean(margins_fa))
        print("; ".join(details))
        _report("trend: pfedseq >= fedavg and >= local in 3/3 seeds, "
                "mean margin over fedavg >= 1 point",
                wins == 3 and mean_margin >= 0.01,
                f"wins={wins}/3, mean margin vs fedavg={mean_margin * 100:+.2f}pt")


class TestAblations:
    def test_variant_b_direction(self, ablation_runs):
        margins = []
        for seed in SEEDS:
            full = final_mean_test_accuracy(ablation_runs[("pfedseq", seed)].rows)
            lone = final_mean_test_accuracy(ablation_runs[("variant_b", seed)].rows)
            margins.append(full - lone)
        mean_margin = float(np.mean(margins))
        _report("ablation: full model vs variant B (L=1)",
                all(m >= -0.005 for m in margins) and mean_margin > 0.0,
                f"per-seed margins {[f'{m * 100:+.2f}pt' for m in margins]}, "
                f"mean {mean_margin * 100:+.2f}pt")

    @pytest.mark.parametrize("variant", ["variant_a", "variant_c"])
    def test_component_removal_direction(self, ablation_runs, variant):
        margins = []
        for seed in SEEDS:
            full = final_mean_test_accuracy(ablation_runs[("pfedseq", seed)].rows)
            removed = final_mean_test_accuracy(ablation_runs[(variant, seed)].rows)
            margins.append(full - removed)
        mean_margin = float(np.mean(margins))
        outcome = "underperforms" if mean_margin > 0 else "ties/overperforms"
        _report(f"ablation: {variant} vs full model ({outcome} by "
                f"{mean_margin * 100:+.2f}pt mean)",
                mean_margin >= -0.005,
                f"per-seed margins {[f'{m * 100:+.2f}pt' for m in margins]}")


class TestWarmupBehavior:
    def test_pfedseq_tracks_fedavg_through_warmup_then_diverges(self, trend_runs):
        warmup = 10
        ok = True
        detail = []
        for seed in SEEDS:
            fa = trend_runs[("fedavg", seed)].rows
            pf = trend_runs[("pfedseq", seed)].rows
            fa_head = [r for r in fa if r["round"] <= warmup]
            pf_head = [r for r in pf if r["round"] <= warmup]
            identical = fa_head == pf_head
            fa_next = [r for r in fa if r["round"] == warmup + 1]
            pf_next = [r for r in pf if r["round"] == warmup + 1]
            diverged = fa_next != pf_next
            ok = ok and identical and diverged
            detail.append(f"seed {seed}: warmup identical={identical}, "
                          f"diverged at {warmup + 1}={diverged}")
        _report("warm-up: pfedseq equals fedavg for rounds 1..W, diverges at W+1",
                ok, "; ".join(detail))
