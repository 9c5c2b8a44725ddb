"""Central-difference checker for tape gradients."""

from dataclasses import dataclass

import numpy as np

from ..errors import DeterminismError, ParameterError
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    worst_param: str = ""


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def finite_diff_check(f,
                      params: dict[str, np.ndarray],
                      h: float = 1e-5,
                      tol: float = 1e-6,
                      max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar f(params) against central differences.

    `f` maps a dict of (name -> Tensor) to a scalar Tensor and must be
    deterministic; it is evaluated twice up front and a mismatch raises
    DeterminismError. Relative error uses a max(1, |numeric|) denominator.
    When `max_coords_per_param` is set, that many coordinates per parameter
    are sampled with `rng` instead of sweeping all of them.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ParameterError(f"finite-difference step h={h} outside [1e-7, 1e-3]")

    def run_plain(values: dict[str, np.ndarray]) -> float:
        return f({k: Tensor(v) for k, v in values.items()}).item()

    base = run_plain(params)
    if run_plain(params) != base:
        raise DeterminismError("f returned different values on repeated evaluation")

    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        out = f(leaves)
    tape.backward(out)
    analytic = {k: tape.grad(leaf) for k, leaf in leaves.items()}

    max_err = 0.0
    worst = ""
    n_checked = 0
    for name, value in params.items():
        flat_n = value.size
        if max_coords_per_param is not None and flat_n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat_n, size=max_coords_per_param, replace=False)
        else:
            coords = range(flat_n)
        g = analytic[name]
        g_flat = np.zeros(flat_n) if g is None else g.reshape(flat_n)
        for idx in coords:
            bumped = dict(params)
            plus = value.copy().reshape(flat_n)
            plus[idx] += h
            bumped[name] = plus.reshape(value.shape)
            f_plus = run_plain(bumped)
            minus = value.copy().reshape(flat_n)
            minus[idx] -= h
            bumped[name] = minus.reshape(value.shape)
            f_minus = run_plain(bumped)
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(float(g_flat[idx]), numeric)
            n_checked += 1
            if err > max_err:
                max_err = err
                worst = f"{name}[{idx}]"
    return GradCheckReport(max_rel_err=max_err, passed=max_err <= tol,
                           n_coords=n_checked, worst_param=worst)
