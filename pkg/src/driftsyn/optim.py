import logging
from typing import Sequence

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction. Moments live in ``self.m`` / ``self.v``, updated in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped = 0
        self.warnings: list[str] = []

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray] | None = None) -> bool:
        """Apply one update. Returns False (and records a warning) if any gradient is non-finite."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            msg = f"non-finite gradient at step {self.t + 1}; update skipped"
            self.warnings.append(msg)
            log.warning(msg)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def adam_step(params, grads, state: Adam) -> bool:
    """Functional alias: one Adam update of ``params`` with explicit ``grads``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("params do not match the optimizer state")
    return state.step(grads)
