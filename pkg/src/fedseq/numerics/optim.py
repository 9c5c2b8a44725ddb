"""SGD and Adam steps over named parameter dicts."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NumericError, ParameterError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    """Mutable optimizer state; `step` increases by exactly 1 per applied step."""

    kind: str
    learning_rate: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState,
                   params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Apply one update; returns new params, mutates `state` in place.

    A NaN/Inf gradient refuses the step: state is left untouched and
    NumericError is raised.
    """
    if set(params) != set(grads):
        raise DimensionError("params and grads carry different names")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step refused")

    lr = state.learning_rate
    if state.kind == "sgd":
        out = {name: p - lr * grads[name] for name, p in params.items()}
        state.step += 1
        return out

    t = state.step + 1
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    state.step = t
    return out
