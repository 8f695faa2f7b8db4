"""Conditional 1-D -> 1-D drifting toy: a small dense generator trained with the
drift loss alone, scored by energy distance to the true conditional samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .drift import drift_field_batch, median_tau
from .optim import Adam
from .tensor import Tensor


def energy_distance(x, y) -> float:
    """Squared energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| between 1-D samples."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    xy = np.abs(x[:, None] - y[None, :]).mean()
    xx = np.abs(x[:, None] - x[None, :]).mean()
    yy = np.abs(y[:, None] - y[None, :]).mean()
    return float(2 * xy - xx - yy)


def sample_target(m: np.ndarray, n: int, rng) -> np.ndarray:
    """n draws of c | m for each condition: a two-branch mixture around sin(pi m)."""
    m = np.asarray(m, dtype=np.float64).reshape(-1, 1)
    branch = rng.choice([-1.0, 1.0], size=(m.shape[0], n))
    return np.sin(np.pi * m) + 0.4 * branch * (0.5 + 0.5 * (m + 1) / 2) + 0.05 * rng.standard_normal((m.shape[0], n))


class DenseGenerator:
    """Three-layer MLP mapping (m, eps) -> c."""

    def __init__(self, hidden: int = 64, noise_dim: int = 1, seed: int = 0, slope: float = 0.1):
        rng = np.random.default_rng(seed)
        sizes = [1 + noise_dim, hidden, hidden, 1]
        self.noise_dim = noise_dim
        self.slope = slope
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = Tensor(rng.normal(0, np.sqrt(2.0 / a), size=(a, b)), requires_grad=True, name=f"w{i}")
            bias = Tensor(np.zeros(b), requires_grad=True, name=f"b{i}")
            self.layers.append((w, bias))
        self.forward_passes = 0

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def forward(self, m: np.ndarray, eps: np.ndarray) -> Tensor:
        self.forward_passes += 1
        h = Tensor(np.concatenate([np.reshape(m, (-1, 1)), np.reshape(eps, (-1, self.noise_dim))], axis=1))
        for i, (w, b) in enumerate(self.layers):
            h = T.add_bias(T.matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = T.leaky_relu(h, self.slope)
        return h

    def sample(self, m: np.ndarray, n: int, rng) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64).ravel()
        mm = np.repeat(m, n)
        with T.no_grad():
            out = self.forward(mm, rng.standard_normal((mm.size, self.noise_dim))).data
        return out.reshape(m.size, n)


@dataclass
class ToyResult:
    energy_before: float
    energy_after: float
    steps: int
    history: list

    @property
    def reduction(self) -> float:
        return 1.0 - self.energy_after / self.energy_before


def evaluate(gen: DenseGenerator, conditions: np.ndarray, n: int = 256, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    fake = gen.sample(conditions, n, rng)
    real = sample_target(conditions, n, rng)
    return float(np.mean([energy_distance(f, r) for f, r in zip(fake, real)]))


def train_toy(
    steps: int = 2000,
    n_conditions: int = 8,
    n_samples: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    eval_every: int = 200,
) -> ToyResult:
    """Drift-loss-only training: per condition, positives are true draws and negatives
    are the generator's own draws (self excluded)."""
    rng = np.random.default_rng(seed)
    gen = DenseGenerator(seed=seed + 1)
    opt = Adam(gen.parameters(), lr=lr)
    grid = np.linspace(-0.9, 0.9, 10)
    before = evaluate(gen, grid, seed=seed + 2)
    history = [(0, before)]
    for step in range(1, steps + 1):
        T.clear_tape()
        opt.zero_grad()
        m = rng.uniform(-1, 1, size=n_conditions)
        mm = np.repeat(m, n_samples)
        out = gen.forward(mm, rng.standard_normal((mm.size, gen.noise_dim)))
        real = sample_target(m, n_samples, rng)
        fake = out.data.reshape(n_conditions, n_samples)
        V = np.empty_like(fake)
        for j in range(n_conditions):
            q = fake[j][:, None]
            pos = real[j][:, None]
            tau = median_tau(q, pos)
            V[j] = drift_field_batch(q, pos, q, tau, self_index=np.arange(n_samples)).V[:, 0]
        target = T.stop_gradient(T.add(out, Tensor(V.reshape(-1, 1))))
        T.mse_mean(out, target).backward()
        opt.step()
        if step % eval_every == 0 or step == steps:
            history.append((step, evaluate(gen, grid, seed=seed + 2)))
    return ToyResult(before, history[-1][1], steps, history)
