"""Sequential learner: a two-block selective state space stack.

Maps a window of stacked client update matrices [D, N, L] (D = flat
adapter coordinate treated as batch, N = clients = model width, L =
steps oldest to newest) to a calibration matrix [D, N], read from the
final step. Per block, with pre-norm and a residual connection:

    xn   = rmsnorm(x)
    main, gate = split(xn @ in_proj)
    u    = silu(causal_depthwise_conv(main))
    dt   = softplus(u * dt_w + dt_b)          input-dependent step size
    Bsel = u @ b_proj,  Csel = u @ c_proj     input-dependent projections
    Abar = exp(dt * A),  Bbar = dt * Bsel     A = -exp(a_log) < 0
    h_j  = Abar_j * h_{j-1} + Bbar_j * u_j;   y_j = Csel_j . h_j + d_skip * u_j
    out  = (y * silu(gate)) @ out_proj + x

The recurrence runs sequentially by default; a Blelloch-style scan over
the affine step maps is available behind `scan_mode="parallel"` and must
agree with the sequential path.

Parameter size depends only on (width, expand, state_dim, conv_kernel,
num_blocks), never on D.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, DimensionError, SequenceError
from .numerics import (
    Tensor,
    add,
    conv1d_causal,
    exp,
    matmul,
    mul,
    neg,
    reshape,
    rmsnorm,
    silu,
    slice_axis,
    softplus,
    stack,
    take_index,
    tensor_sum,
    transpose,
    unstack,
)

SCAN_MODES = ("sequential", "parallel")

DT_INIT_MIN = 0.001
DT_INIT_MAX = 0.1


@dataclass(frozen=True)
class LearnerConfig:
    """Architecture knobs; `fingerprint()` guards checkpoint compatibility."""

    width: int                 # model width = number of clients
    expand: int = 2
    state_dim: int = 16
    conv_kernel: int = 4
    num_blocks: int = 2
    conv_bias: bool = False
    output_scale: float = 0.01  # init value of the final norm gain

    @property
    def e_inner(self) -> int:
        return self.expand * self.width

    def fingerprint(self) -> dict:
        return {
            "width": self.width,
            "e_inner": self.e_inner,
            "state_dim": self.state_dim,
            "conv_kernel": self.conv_kernel,
            "num_blocks": self.num_blocks,
        }


def parameter_count(config: LearnerConfig) -> int:
    """Closed form for the number of learnable scalars."""
    n, e, m, k = config.width, config.e_inner, config.state_dim, config.conv_kernel
    per_block = (
        n * 2 * e        # in_proj
        + e * k          # conv weights
        + (e if config.conv_bias else 0)
        + 3 * e * m      # a_log, b_proj, c_proj
        + 2 * e          # dt_w, dt_b
        + e              # d_skip
        + e * n          # out_proj
        + n              # block norm gain
    )
    return config.num_blocks * per_block + n  # final norm gain


def _block_param_shapes(config: LearnerConfig) -> dict[str, tuple]:
    n, e, m, k = config.width, config.e_inner, config.state_dim, config.conv_kernel
    shapes = {
        "in_proj": (n, 2 * e),
        "conv_w": (e, k),
        "a_log": (e, m),
        "b_proj": (e, m),
        "c_proj": (e, m),
        "dt_w": (e,),
        "dt_b": (e,),
        "d_skip": (e,),
        "out_proj": (e, n),
        "gain": (n,),
    }
    if config.conv_bias:
        shapes["conv_b"] = (e,)
    return shapes


def param_shapes(config: LearnerConfig) -> dict[str, tuple]:
    shapes = {}
    for i in range(config.num_blocks):
        for name, shape in _block_param_shapes(config).items():
            shapes[f"block{i}.{name}"] = shape
    shapes["final_gain"] = (config.width,)
    return shapes


def init_ssm_params(config: LearnerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Training initialization.

    A's state columns start at -1..-M per inner channel; dt_b is set so
    softplus lands in [DT_INIT_MIN, DT_INIT_MAX]; the residual-branch
    out_proj starts at zero and the final gain at `output_scale`, so the
    stack initially passes a small normalized copy of the newest step.
    """
    n, e, m = config.width, config.e_inner, config.state_dim
    params: dict[str, np.ndarray] = {}
    for i in range(config.num_blocks):
        p = f"block{i}."
        params[p + "in_proj"] = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, 2 * e))
        params[p + "conv_w"] = rng.normal(0.0, 1.0 / np.sqrt(config.conv_kernel),
                                          size=(e, config.conv_kernel))
        if config.conv_bias:
            params[p + "conv_b"] = np.zeros(e)
        params[p + "a_log"] = np.tile(np.log(np.arange(1, m + 1)), (e, 1))
        params[p + "b_proj"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, m))
        params[p + "c_proj"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, m))
        params[p + "dt_w"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=e)
        dt0 = np.exp(rng.uniform(np.log(DT_INIT_MIN), np.log(DT_INIT_MAX), size=e))
        params[p + "dt_b"] = np.log(np.expm1(dt0))
        params[p + "d_skip"] = np.ones(e)
        params[p + "out_proj"] = np.zeros((e, n))
        params[p + "gain"] = np.ones(n)
    params["final_gain"] = np.full(n, config.output_scale)
    return params


def random_ssm_params(config: LearnerConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fully random nonzero parameters; used by gradient and property tests."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "a_log":
            params[name] = rng.normal(0.0, 0.5, size=shape)
        elif leaf in ("gain", "final_gain"):
            params[name] = rng.uniform(0.5, 1.5, size=shape)
        else:
            params[name] = rng.normal(0.0, 0.4, size=shape)
    return params


def _as_t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _block_view(params: dict, index: int) -> dict:
    prefix = f"block{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# step-wise pieces
# ---------------------------------------------------------------------------


def selection(x_step, dt_w, dt_b, b_proj, c_proj):
    """Input-dependent step size and projections for one step.

    x_step [D, E] is the post-conv, post-SiLU inner activation. Returns
    (dt [D, E], bsel [D, M], csel [D, M]); dt > 0 by softplus.
    """
    x_step, dt_w, dt_b = _as_t(x_step), _as_t(dt_w), _as_t(dt_b)
    dt = softplus(add(mul(x_step, dt_w), dt_b))
    bsel = matmul(x_step, _as_t(b_proj))
    csel = matmul(x_step, _as_t(c_proj))
    return dt, bsel, csel


def discretize(a, dt, bsel):
    """Zero-order hold for the state map, Euler for the input map.

    a [E, M] (negative), dt [D, E], bsel [D, M] ->
    abar = exp(dt x a) in (0, 1), bbar = dt x bsel, both [D, E, M].
    """
    a, dt, bsel = _as_t(a), _as_t(dt), _as_t(bsel)
    d, e = dt.shape
    m = a.shape[1]
    dt_col = reshape(dt, (d, e, 1))
    abar = exp(mul(dt_col, a))
    bbar = mul(dt_col, reshape(bsel, (d, 1, m)))
    return abar, bbar


def _affine_combine(first, second):
    """Compose step maps h -> a*h + b: `first` applied before `second`."""
    a1, b1 = first
    a2, b2 = second
    return mul(a2, a1), add(mul(a2, b1), b2)


def _blelloch_inclusive(pairs: list[tuple]):
    """Inclusive scan of affine maps via Blelloch up/downsweep."""
    n = len(pairs)
    size = 1
    while size < n:
        size *= 2
    ident_a = Tensor(np.ones(pairs[0][0].shape))
    ident_b = Tensor(np.zeros(pairs[0][1].shape))
    tree = list(pairs) + [(ident_a, ident_b)] * (size - n)
    depth = size.bit_length() - 1
    for d in range(depth):
        step = 1 << (d + 1)
        for i in range(0, size, step):
            left = i + (1 << d) - 1
            right = i + step - 1
            tree[right] = _affine_combine(tree[left], tree[right])
    tree[size - 1] = (ident_a, ident_b)
    for d in range(depth - 1, -1, -1):
        step = 1 << (d + 1)
        for i in range(0, size, step):
            left = i + (1 << d) - 1
            right = i + step - 1
            saved = tree[left]  # sum of the left half-block
            tree[left] = tree[right]  # parent prefix flows to the left child
            # right child's prefix: parent's earlier elements first, then the
            # left half-block
            tree[right] = _affine_combine(tree[left], saved)
    # tree now holds exclusive prefixes; fold in each step's own map
    return [_affine_combine(tree[i], pairs[i]) for i in range(n)]


def ssm_scan(u_steps, abar_steps, bbar_steps, csel_steps, d_skip, mode="sequential"):
    """Run the recurrence h_j = abar_j*h_{j-1} + bbar_j*u_j from h_0 = 0.

    Per step: u [D, E], abar/bbar [D, E, M], csel [D, M]. Returns
    (y_steps, h_steps) with y_j = sum_M(csel_j * h_j) + d_skip * u_j of
    shape [D, E]. `mode="parallel"` uses a Blelloch-style scan over the
    composed affine maps and must match the sequential path.
    """
    if mode not in SCAN_MODES:
        raise DimensionError(f"unknown scan mode {mode!r}")
    d_skip = _as_t(d_skip)
    steps = len(u_steps)
    bu = [mul(bbar_steps[j], reshape(u_steps[j], (*u_steps[j].shape, 1)))
          for j in range(steps)]
    if mode == "sequential":
        h_steps = []
        h = bu[0]
        h_steps.append(h)
        for j in range(1, steps):
            h = add(mul(abar_steps[j], h), bu[j])
            h_steps.append(h)
    else:
        h_steps = [pair[1] for pair in
                   _blelloch_inclusive(list(zip(abar_steps, bu)))]
    y_steps = []
    for j in range(steps):
        d, m = csel_steps[j].shape
        csel_col = reshape(csel_steps[j], (d, 1, m))
        y = add(tensor_sum(mul(csel_col, h_steps[j]), axis=2),
                mul(d_skip, u_steps[j]))
        y_steps.append(y)
    return y_steps, h_steps


def _block_inner(x, block: dict, config: LearnerConfig, scan_mode: str) -> Tensor:
    """Pre-norm block body on [D, L, N]; returns the same shape, with residual."""
    dn, ln, _ = x.shape
    e = config.e_inner
    xn = rmsnorm(x, _as_t(block["gain"]))
    proj = matmul(xn, _as_t(block["in_proj"]))
    main = slice_axis(proj, 2, 0, e)
    gate = slice_axis(proj, 2, e, 2 * e)
    conv = conv1d_causal(main, _as_t(block["conv_w"]),
                         _as_t(block["conv_b"]) if config.conv_bias else None)
    u = silu(conv)
    dt = softplus(add(mul(u, _as_t(block["dt_w"])), _as_t(block["dt_b"])))
    bsel = matmul(u, _as_t(block["b_proj"]))
    csel = matmul(u, _as_t(block["c_proj"]))
    a = neg(exp(_as_t(block["a_log"])))
    dt_col = reshape(dt, (dn, ln, e, 1))
    abar = exp(mul(dt_col, a))
    bbar = mul(dt_col, reshape(bsel, (dn, ln, 1, config.state_dim)))
    y_steps, _ = ssm_scan(
        unstack(u, 1), unstack(abar, 1), unstack(bbar, 1), unstack(csel, 1),
        _as_t(block["d_skip"]), mode=scan_mode)
    y = stack(y_steps, 1)
    gated = mul(y, silu(gate))
    out = matmul(gated, _as_t(block["out_proj"]))
    return add(x, out)


def mamba_block_forward(x, block_params: dict, config: LearnerConfig,
                        scan_mode: str = "sequential") -> Tensor:
    """One block on [D, N, L] layout (steps last); causal along L."""
    x = _as_t(x)
    if x.ndim != 3 or x.shape[1] != config.width:
        raise DimensionError(f"block input shape {x.shape} vs width {config.width}")
    inner = _block_inner(transpose(x, (0, 2, 1)), block_params, config, scan_mode)
    return transpose(inner, (0, 2, 1))


def seqlearner_forward(window, params: dict, config: LearnerConfig,
                       scan_mode: str = "sequential") -> Tensor:
    """Calibrations [D, N] from a window [D, N, L'], L' >= 1, oldest first."""
    window = _as_t(window)
    if window.ndim != 3 or window.shape[2] == 0:
        raise SequenceError(f"window must be [D, N, L>=1], got {window.shape}")
    if window.shape[1] != config.width:
        raise DimensionError(
            f"window has {window.shape[1]} clients, learner width is {config.width}")
    x = transpose(window, (0, 2, 1))
    for i in range(config.num_blocks):
        x = _block_inner(x, _block_view(params, i), config, scan_mode)
    final = rmsnorm(x, _as_t(params["final_gain"]))
    return take_index(final, 1, window.shape[2] - 1)


# ---------------------------------------------------------------------------
# MLP learner (fixed-length alternative architecture)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    """MLP over the window flattened to one axis of size width*fixed_len."""

    width: int
    fixed_len: int
    hidden: int = 64
    output_scale: float = 0.01


def mlp_parameter_count(config: MlpConfig) -> int:
    n, l, h = config.width, config.fixed_len, config.hidden
    return (n * l) * h + h + h * n + n


def init_mlp_params(config: MlpConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n, l, h = config.width, config.fixed_len, config.hidden
    return {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(n * l), size=(n * l, h)),
        "b1": np.zeros(h),
        "w2": rng.normal(0.0, config.output_scale / np.sqrt(h), size=(h, n)),
        "b2": np.zeros(n),
    }


def mlp_forward(window, params: dict, config: MlpConfig) -> Tensor:
    """Zero-pad the window on the left to fixed_len, flatten, one hidden layer."""
    window = _as_t(window)
    if window.ndim != 3 or window.shape[2] == 0:
        raise SequenceError(f"window must be [D, N, L>=1], got {window.shape}")
    d, n, l = window.shape
    if l > config.fixed_len:
        raise SequenceError(f"window length {l} exceeds fixed_len {config.fixed_len}")
    if l < config.fixed_len:
        pad = Tensor(np.zeros((d, n, config.fixed_len - l)))
        parts = unstack(pad, 2) + unstack(window, 2)
        window = stack(parts, 2)
    flat = reshape(window, (d, n * config.fixed_len))
    hidden = silu(add(matmul(flat, _as_t(params["w1"])), _as_t(params["b1"])))
    return add(matmul(hidden, _as_t(params["w2"])), _as_t(params["b2"]))


# ---------------------------------------------------------------------------
# learner bank and checkpointing
# ---------------------------------------------------------------------------


def assign_learner_bank(block_names: list[str], config: LearnerConfig,
                        seed_fn) -> dict[str, dict[str, np.ndarray]]:
    """One independent parameter set per adapter block.

    `seed_fn(index)` returns the rng for block `index`; sizes depend on
    the config only, never on each block's flat length.
    """
    if not block_names:
        raise SequenceError("at least one adapter block required")
    return {name: init_ssm_params(config, seed_fn(i))
            for i, name in enumerate(block_names)}


def params_to_checkpoint(params: dict[str, np.ndarray], config: LearnerConfig) -> dict:
    return {
        "fingerprint": config.fingerprint(),
        "tensors": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                    for name, arr in sorted(params.items())},
    }


def params_from_checkpoint(blob: dict, config: LearnerConfig) -> dict[str, np.ndarray]:
    if blob.get("fingerprint") != config.fingerprint():
        raise CheckpointError(
            f"fingerprint mismatch: checkpoint {blob.get('fingerprint')} "
            f"vs config {config.fingerprint()}")
    out = {}
    for name, entry in blob["tensors"].items():
        out[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return out
