from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nsync.numerics.autodiff import GradVector, LayoutEntry, ParamSet


@dataclass
class AdamState:
    layout: tuple[LayoutEntry, ...]
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        n = sum(e.size for e in self.layout)
        if self.m is None:
            self.m = np.zeros(n)
        if self.v is None:
            self.v = np.zeros(n)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamState":
        return cls(params.layout, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.layout, self.lr, self.beta1, self.beta2, self.eps, self.step, self.m.copy(), self.v.copy())


def adam_step(params: ParamSet, grad: GradVector, state: AdamState) -> ParamSet:
    """Apply one bias-corrected Adam update to the trainable parameters.

    ``state`` is advanced in place; a new ParamSet is returned.
    """
    if grad.layout != state.layout or params.layout != state.layout:
        raise ValueError("gradient / optimizer / parameter layouts do not match")
    g = grad.values
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    flat = params.flat()
    return params.updated(flat.replace(flat.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)))
