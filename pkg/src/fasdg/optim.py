"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from fasdg import kernels
from fasdg.errors import ShapeError
from fasdg.tensor import Tensor


class Adam:
    """Standard Adam with bias correction; state is per parameter name.

    Updates are applied in place with the fused kernel; given identical
    gradients the trajectory is deterministic. Parameters whose grad is None
    are left untouched (their moments do not decay either).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros(p.size, dtype=p.dtype) for k, p in params.items()}
        self._v = {k: np.zeros(p.size, dtype=p.dtype) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"'{name}' shape {p.data.shape}"
                )
            kernels.adam_update(
                p.data.reshape(-1),
                np.ascontiguousarray(g.reshape(-1)),
                self._m[name],
                self._v[name],
                self.t,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
