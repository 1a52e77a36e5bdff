"""Parameter containers and the conv building blocks shared by all networks."""
from __future__ import annotations

import hashlib

import numpy as np

from .engine import Tensor, conv2d, conv_transpose2d, instance_norm


class Net:
    """Named parameter dict plus helpers to create and checksum it."""

    def __init__(self, rng: np.random.Generator, init_std: float = 0.02):
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        self._init_std = init_std

    def _conv(self, name: str, cin: int, cout: int, k: int, transpose: bool = False,
              std: float | None = None) -> None:
        std = self._init_std if std is None else std
        shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
        self.params[f"{name}.weight"] = Tensor(self._rng.normal(0.0, std, shape), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)

    def conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, padding)

    def deconv(self, name: str, x: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
        return conv_transpose2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                                stride, padding)

    def norm(self, name: str, x: Tensor) -> Tensor:
        return instance_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.params.items():
            src = arrays[prefix + k]
            if src.shape != p.shape:
                raise ValueError(f"checkpoint shape {src.shape} != {p.shape} for {prefix + k}")
            p.data[...] = src

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())
