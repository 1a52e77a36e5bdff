from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"parameter {name!r} has no gradient; run backward() first")
        self.name = name


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place, then clear the gradients."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(name)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


class Adam:
    """Thin convenience wrapper binding a parameter dict to an :class:`AdamState`."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"{prefix}{name}.m"] = self.state.m[name]
                out[f"{prefix}{name}.v"] = self.state.v[name]
        out[f"{prefix}step_count"] = np.array(float(self.state.step_count))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        self.state.step_count = int(arrays[f"{prefix}step_count"])
        self.state.m.clear()
        self.state.v.clear()
        for name in self.params:
            key = f"{prefix}{name}.m"
            if key in arrays:
                self.state.m[name] = np.array(arrays[key], dtype=np.float64)
                self.state.v[name] = np.array(arrays[f"{prefix}{name}.v"], dtype=np.float64)
