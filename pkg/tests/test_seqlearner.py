"""Selective SSM learner: step ops, scan, blocks, full forward, bank, checkpoints."""

import math

import numpy as np
import pytest

from fedseq.errors import CheckpointError, DimensionError, SequenceError
from fedseq.numerics import Tensor, finite_diff_check, mul, tensor_sum
from fedseq.seqlearner import (
    LearnerConfig,
    MlpConfig,
    assign_learner_bank,
    discretize,
    init_mlp_params,
    init_ssm_params,
    mamba_block_forward,
    mlp_forward,
    mlp_parameter_count,
    parameter_count,
    param_shapes,
    params_from_checkpoint,
    params_to_checkpoint,
    random_ssm_params,
    selection,
    seqlearner_forward,
    ssm_scan,
)

SMALL = LearnerConfig(width=3, expand=2, state_dim=4, conv_kernel=3, num_blocks=2)


def _window(rng, d=4, n=3, length=5):
    return rng.normal(size=(d, n, length))


class TestSelection:
    def test_zero_input_zero_dtbias_gives_ln2(self):
        d, e, m = 3, 4, 5
        dt, bsel, csel = selection(np.zeros((d, e)), np.ones(e), np.zeros(e),
                                   np.ones((e, m)), np.ones((e, m)))
        np.testing.assert_allclose(dt.data, math.log(2.0), rtol=1e-15)
        np.testing.assert_array_equal(bsel.data, np.zeros((d, m)))
        np.testing.assert_array_equal(csel.data, np.zeros((d, m)))

    def test_dt_positive_for_random_input(self):
        rng = np.random.default_rng(0)
        dt, _, _ = selection(rng.normal(size=(4, 6)) * 5, rng.normal(size=6),
                             rng.normal(size=6), rng.normal(size=(6, 3)),
                             rng.normal(size=(6, 3)))
        assert np.all(dt.data > 0)


class TestDiscretize:
    def test_zero_dt(self):
        a = -np.ones((2, 3))
        abar, bbar = discretize(a, np.zeros((4, 2)), np.ones((4, 3)))
        np.testing.assert_array_equal(abar.data, np.ones((4, 2, 3)))
        np.testing.assert_array_equal(bbar.data, np.zeros((4, 2, 3)))

    def test_scalar_case_exp_of_minus_ln2(self):
        abar, _ = discretize(np.full((1, 1), -1.0), np.full((1, 1), math.log(2.0)),
                             np.ones((1, 1)))
        assert abar.data[0, 0, 0] == pytest.approx(0.5, rel=1e-15)

    def test_abar_in_unit_interval(self):
        rng = np.random.default_rng(1)
        a = -np.exp(rng.normal(size=(3, 4)))
        dt = np.exp(rng.normal(size=(5, 3)))  # > 0
        abar, _ = discretize(a, dt, rng.normal(size=(5, 4)))
        assert np.all(abar.data > 0) and np.all(abar.data < 1)


def _random_scan_inputs(rng, d=3, e=2, m=4, length=6):
    u = [Tensor(rng.normal(size=(d, e))) for _ in range(length)]
    a = [Tensor(np.exp(-np.exp(rng.normal(size=(d, e, m))))) for _ in range(length)]
    b = [Tensor(rng.normal(size=(d, e, m))) for _ in range(length)]
    c = [Tensor(rng.normal(size=(d, m))) for _ in range(length)]
    d_skip = Tensor(rng.normal(size=e))
    return u, a, b, c, d_skip


class TestScan:
    def test_single_step_unrolled(self):
        rng = np.random.default_rng(2)
        u, a, b, c, d_skip = _random_scan_inputs(rng, length=1)
        y_steps, h_steps = ssm_scan(u, a, b, c, d_skip)
        want_h = b[0].data * u[0].data[..., None]
        np.testing.assert_allclose(h_steps[0].data, want_h, atol=1e-15)
        want_y = (c[0].data[:, None, :] * want_h).sum(axis=2) + d_skip.data * u[0].data
        np.testing.assert_allclose(y_steps[0].data, want_y, atol=1e-14)

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(3)
        u, a, b, c, d_skip = _random_scan_inputs(rng, length=5)
        zero_u = [Tensor(np.zeros_like(t.data)) for t in u]
        y_steps, h_steps = ssm_scan(zero_u, a, b, c, d_skip)
        for y, h in zip(y_steps, h_steps):
            np.testing.assert_array_equal(y.data, np.zeros_like(y.data))
            np.testing.assert_array_equal(h.data, np.zeros_like(h.data))

    @pytest.mark.parametrize("length", [1, 2, 3, 6, 7, 8])
    def test_parallel_matches_sequential(self, length):
        rng = np.random.default_rng(40 + length)
        u, a, b, c, d_skip = _random_scan_inputs(rng, length=length)
        y_seq, h_seq = ssm_scan(u, a, b, c, d_skip, mode="sequential")
        y_par, h_par = ssm_scan(u, a, b, c, d_skip, mode="parallel")
        for s, p in zip(y_seq, y_par):
            np.testing.assert_allclose(p.data, s.data, atol=1e-12, rtol=0)
        for s, p in zip(h_seq, h_par):
            np.testing.assert_allclose(p.data, s.data, atol=1e-12, rtol=0)

    def test_hidden_state_stays_bounded_long_sequence(self):
        rng = np.random.default_rng(5)
        u, a, b, c, d_skip = _random_scan_inputs(rng, d=2, e=2, m=3, length=64)
        _, h_steps = ssm_scan(u, a, b, c, d_skip)
        bu_max = max(np.max(np.abs(bi.data * ui.data[..., None]))
                     for bi, ui in zip(b, u))
        a_max = max(np.max(ai.data) for ai in a)
        bound = bu_max / (1.0 - a_max) + 1e-9
        assert all(np.max(np.abs(h.data)) <= bound for h in h_steps)


class TestMambaBlock:
    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(6)
        params = random_ssm_params(SMALL, rng)
        x = np.zeros((4, SMALL.width, 5))
        out = mamba_block_forward(x, {k.split(".", 1)[1]: v for k, v in params.items()
                                      if k.startswith("block0.")}, SMALL)
        np.testing.assert_array_equal(out.data, np.zeros_like(x))

    def test_causality(self):
        rng = np.random.default_rng(7)
        params = {k.split(".", 1)[1]: v for k, v in random_ssm_params(SMALL, rng).items()
                  if k.startswith("block0.")}
        x = _window(rng, d=2, n=SMALL.width, length=6)
        base = mamba_block_forward(x, params, SMALL).data
        for j in (2, 4):
            bumped = x.copy()
            bumped[:, :, j] += rng.normal(size=(2, SMALL.width))
            out = mamba_block_forward(bumped, params, SMALL).data
            assert out[:, :, :j].tobytes() == base[:, :, :j].tobytes()
            assert not np.array_equal(out[:, :, j], base[:, :, j])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        cfg = LearnerConfig(width=2, expand=2, state_dim=3, conv_kernel=2, num_blocks=1)
        x = _window(rng, d=2, n=2, length=3)
        probe = rng.normal(size=(2, 2, 3))
        params = {k.split(".", 1)[1]: v for k, v in random_ssm_params(cfg, rng).items()
                  if k.startswith("block0.")}

        def f(p):
            return tensor_sum(mul(mamba_block_forward(x, p, cfg), Tensor(probe)))

        report = finite_diff_check(f, params, h=1e-5, tol=1e-5)
        assert report.passed, report


class TestSeqLearnerForward:
    def test_zero_window_gives_zero_calibration(self):
        rng = np.random.default_rng(9)
        params = random_ssm_params(SMALL, rng)
        out = seqlearner_forward(np.zeros((5, SMALL.width, 4)), params, SMALL)
        np.testing.assert_array_equal(out.data, np.zeros((5, SMALL.width)))

    def test_output_shape_is_last_step_slice(self):
        rng = np.random.default_rng(10)
        params = random_ssm_params(SMALL, rng)
        out = seqlearner_forward(_window(rng, d=6, n=SMALL.width, length=5), params, SMALL)
        assert out.shape == (6, SMALL.width)

    def test_appending_a_step_changes_output(self):
        rng = np.random.default_rng(11)
        params = random_ssm_params(SMALL, rng)
        w2 = _window(rng, d=4, n=SMALL.width, length=2)
        full = seqlearner_forward(w2, params, SMALL).data
        last_only = seqlearner_forward(w2[:, :, 1:], params, SMALL).data
        assert np.linalg.norm(full - last_only) > 0

    def test_empty_window_rejected(self):
        params = random_ssm_params(SMALL, np.random.default_rng(12))
        with pytest.raises(SequenceError):
            seqlearner_forward(np.zeros((3, SMALL.width, 0)), params, SMALL)

    def test_wrong_width_rejected(self):
        params = random_ssm_params(SMALL, np.random.default_rng(13))
        with pytest.raises(DimensionError):
            seqlearner_forward(np.zeros((3, SMALL.width + 1, 2)), params, SMALL)

    def test_batch_dimension_independence(self):
        rng = np.random.default_rng(14)
        params = random_ssm_params(SMALL, rng)
        window = _window(rng, d=6, n=SMALL.width, length=4)
        perm = rng.permutation(6)
        base = seqlearner_forward(window, params, SMALL).data
        permuted = seqlearner_forward(window[perm], params, SMALL).data
        assert permuted.tobytes() == base[perm].tobytes()

    def test_parallel_scan_full_forward_agrees(self):
        rng = np.random.default_rng(15)
        params = random_ssm_params(SMALL, rng)
        window = _window(rng, d=4, n=SMALL.width, length=6)
        seq = seqlearner_forward(window, params, SMALL, scan_mode="sequential").data
        par = seqlearner_forward(window, params, SMALL, scan_mode="parallel").data
        np.testing.assert_allclose(par, seq, atol=1e-12, rtol=0)

    def test_full_gradient_small_instance(self):
        rng = np.random.default_rng(16)
        cfg = LearnerConfig(width=2, expand=2, state_dim=3, conv_kernel=2, num_blocks=2)
        window = _window(rng, d=2, n=2, length=3)
        probe = rng.normal(size=(2, 2))
        params = random_ssm_params(cfg, rng)

        def f(p):
            return tensor_sum(mul(seqlearner_forward(window, p, cfg), Tensor(probe)))

        report = finite_diff_check(f, params, h=1e-5, tol=1e-5,
                                   max_coords_per_param=6, rng=rng)
        assert report.passed, report


class TestParameterAccounting:
    def test_hand_count_for_reference_config(self):
        cfg = LearnerConfig(width=4, expand=2, state_dim=16, conv_kernel=4, num_blocks=2)
        # structural count oracle, by hand: per block
        in_proj = 4 * (2 * 8)
        conv = 8 * 4
        state = 3 * (8 * 16)
        dt = 2 * 8
        d_skip = 8
        out_proj = 8 * 4
        gain = 4
        per_block = in_proj + conv + state + dt + d_skip + out_proj + gain
        want = 2 * per_block + 4
        assert parameter_count(cfg) == want == 1084

    def test_count_matches_actual_params(self):
        for cfg in (SMALL, LearnerConfig(width=2, state_dim=8, conv_kernel=2,
                                         num_blocks=1, conv_bias=True)):
            params = init_ssm_params(cfg, np.random.default_rng(0))
            assert sum(v.size for v in params.values()) == parameter_count(cfg)
            assert {k: v.shape for k, v in params.items()} == param_shapes(cfg)

    def test_size_independent_of_adapter_length(self):
        bank = assign_learner_bank(["block0", "block1"], SMALL,
                                   lambda i: np.random.default_rng(i))
        sizes = [sum(v.size for v in params.values()) for params in bank.values()]
        assert sizes[0] == sizes[1] == parameter_count(SMALL)

    def test_single_block_bank(self):
        bank = assign_learner_bank(["block0"], SMALL, lambda i: np.random.default_rng(i))
        assert list(bank) == ["block0"]

    def test_empty_bank_rejected(self):
        with pytest.raises(SequenceError):
            assign_learner_bank([], SMALL, lambda i: np.random.default_rng(i))


class TestInit:
    def test_a_is_negative_and_dt_in_range(self):
        params = init_ssm_params(SMALL, np.random.default_rng(17))
        for i in range(SMALL.num_blocks):
            a = -np.exp(params[f"block{i}.a_log"])
            assert np.all(a < 0)
            np.testing.assert_allclose(a[0], -np.arange(1, SMALL.state_dim + 1))
            dt0 = np.log1p(np.exp(params[f"block{i}.dt_b"]))
            assert np.all(dt0 >= 0.001 - 1e-12) and np.all(dt0 <= 0.1 + 1e-12)

    def test_initial_forward_passes_scaled_last_step(self):
        # out_proj starts at zero, so blocks are identity and the output is
        # the final-norm of the newest step
        cfg = SMALL
        params = init_ssm_params(cfg, np.random.default_rng(18))
        rng = np.random.default_rng(19)
        window = _window(rng, d=5, n=cfg.width, length=3)
        out = seqlearner_forward(window, params, cfg).data
        last = window[:, :, -1]
        rms = np.sqrt(np.mean(last * last, axis=1, keepdims=True) + 1e-8)
        np.testing.assert_allclose(out, last / rms * cfg.output_scale, atol=1e-12)


class TestCheckpoint:
    def test_round_trip(self):
        params = init_ssm_params(SMALL, np.random.default_rng(20))
        blob = params_to_checkpoint(params, SMALL)
        back = params_from_checkpoint(blob, SMALL)
        for name in params:
            assert back[name].tobytes() == params[name].tobytes()

    def test_fingerprint_mismatch_rejected(self):
        params = init_ssm_params(SMALL, np.random.default_rng(21))
        blob = params_to_checkpoint(params, SMALL)
        other = LearnerConfig(width=SMALL.width, state_dim=SMALL.state_dim + 1)
        with pytest.raises(CheckpointError):
            params_from_checkpoint(blob, other)


class TestMlpLearner:
    def test_parameter_count_closed_form(self):
        cfg = MlpConfig(width=3, fixed_len=4, hidden=8)
        params = init_mlp_params(cfg, np.random.default_rng(22))
        want = (3 * 4) * 8 + 8 + 8 * 3 + 3
        assert mlp_parameter_count(cfg) == want
        assert sum(v.size for v in params.values()) == want

    def test_short_window_left_padded(self):
        cfg = MlpConfig(width=2, fixed_len=4, hidden=5)
        rng = np.random.default_rng(23)
        params = {k: rng.normal(size=v.shape) for k, v in init_mlp_params(cfg, rng).items()}
        short = rng.normal(size=(3, 2, 2))
        padded = np.concatenate([np.zeros((3, 2, 2)), short], axis=2)
        a = mlp_forward(short, params, cfg).data
        b = mlp_forward(padded, params, cfg).data
        assert a.tobytes() == b.tobytes()

    def test_too_long_window_rejected(self):
        cfg = MlpConfig(width=2, fixed_len=2, hidden=4)
        params = init_mlp_params(cfg, np.random.default_rng(24))
        with pytest.raises(SequenceError):
            mlp_forward(np.zeros((2, 2, 3)), params, cfg)

    def test_gradient(self):
        cfg = MlpConfig(width=2, fixed_len=3, hidden=4)
        rng = np.random.default_rng(25)
        params = {k: rng.normal(0, 0.5, size=v.shape)
                  for k, v in init_mlp_params(cfg, rng).items()}
        window = rng.normal(size=(3, 2, 2))
        probe = rng.normal(size=(3, 2))

        def f(p):
            return tensor_sum(mul(mlp_forward(window, p, cfg), Tensor(probe)))

        report = finite_diff_check(f, params, h=1e-5, tol=1e-6)
        assert report.passed, report
