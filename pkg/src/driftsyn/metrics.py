"""Image quality metrics, repeated-sampling uncertainty maps, and inference timing."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, peak: float = 1.0, return_flag: bool = False):
    """10 log10(peak^2 / MSE) in dB; identical inputs give the ``PSNR_CAP`` sentinel.

    With ``return_flag`` returns (value, exact_match).
    """
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    exact = mse == 0.0
    val = PSNR_CAP if exact else 10.0 * math.log10(peak * peak / mse)
    return (val, exact) if return_flag else val


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, cfg: SSIMConfig = SSIMConfig()) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise MetricError(f"ssim expects 2-D images, got {a.shape}")
    if a.shape[0] < cfg.window or a.shape[1] < cfg.window:
        raise MetricError(f"image {a.shape} smaller than the {cfg.window}x{cfg.window} window")
    w = gaussian_window(cfg.window, cfg.sigma)

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )


def ssim(a, b, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Single-scale SSIM (Gaussian-weighted local statistics), mean over valid window positions."""
    return float(ssim_map(a, b, cfg).mean())


def gradient_energy(img) -> float:
    """Mean gradient magnitude from forward differences; a sharpness proxy."""
    x = np.asarray(img, dtype=np.float64)
    gy = np.diff(x, axis=-2)[..., :, :-1]
    gx = np.diff(x, axis=-1)[..., :-1, :]
    return float(np.mean(np.sqrt(gx * gx + gy * gy)))


@dataclass
class MetricsReport:
    ssim: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    exact: list = field(default_factory=list)
    keys: list = field(default_factory=list)

    def add(self, key, pred, ref, cfg: SSIMConfig = SSIMConfig()) -> None:
        p, flag = psnr(pred, ref, return_flag=True)
        self.ssim.append(ssim(pred, ref, cfg))
        self.psnr.append(p)
        self.rmse.append(rmse(pred, ref))
        self.exact.append(flag)
        self.keys.append(key)

    @staticmethod
    def _ms(xs):
        if not xs:
            return float("nan"), float("nan")
        return float(np.mean(xs)), float(np.std(xs))

    def summary(self) -> dict:
        return {name: self._ms(getattr(self, name)) for name in ("ssim", "psnr", "rmse")}

    def by_subject(self) -> dict:
        groups: dict = {}
        for key, s, p, r in zip(self.keys, self.ssim, self.psnr, self.rmse):
            sub = key[0] if isinstance(key, tuple) else key
            groups.setdefault(sub, []).append((s, p, r))
        return {k: tuple(float(np.mean(col)) for col in zip(*v)) for k, v in groups.items()}


def evaluate(preds, refs, keys=None) -> MetricsReport:
    rep = MetricsReport()
    for i, (p, r) in enumerate(zip(preds, refs)):
        rep.add(keys[i] if keys is not None else i, p, r)
    return rep


@dataclass
class UncertaintyMap:
    std: np.ndarray
    K: int
    mean: np.ndarray | None = None


def pixel_std(samples) -> UncertaintyMap:
    """Population standard deviation (divide by K) across a stack of K images.

    Samples are sorted per pixel and shifted by their minimum first, which makes the
    result independent of sample order and exactly zero where all samples agree.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.shape[0] < 1:
        raise MetricError("need at least one sample")
    s = np.sort(s, axis=0)
    d = s - s[0]
    mu_d = d.mean(axis=0)
    std = np.sqrt(np.mean((d - mu_d) ** 2, axis=0))
    return UncertaintyMap(std=std, K=s.shape[0], mean=s[0] + mu_d)


def uncertainty_map(generator, m, K: int = 20, seeds=None, no_noise: bool = False) -> UncertaintyMap:
    """Per-pixel std over K generations of the same condition with distinct noise seeds."""
    if K < 1:
        raise MetricError(f"K must be >= 1, got {K}")
    seeds = list(range(K)) if seeds is None else list(seeds)
    if len(seeds) != K:
        raise MetricError(f"expected {K} seeds, got {len(seeds)}")
    m = np.asarray(m, dtype=np.float64)
    outs = []
    for s in seeds:
        eps = generator.noise(m.shape[-2:], n=1, seed=s)
        if no_noise:
            eps = np.zeros_like(eps)
        outs.append(generator.generate(m, eps))
    return pixel_std(outs)


@dataclass
class TimingRecord:
    samples: list
    batch_size: int
    image_size: tuple
    warmup: int
    reps: int

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def spread(self) -> tuple:
        return min(self.samples), max(self.samples)


def time_inference(generator, m_batch, warmup: int = 3, reps: int = 20, seed: int = 0) -> TimingRecord:
    """Median wall time of single-forward generations; checks one forward pass per call."""
    if reps < 1:
        raise MetricError("reps must be >= 1")
    m = np.asarray(m_batch, dtype=np.float64)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    eps = generator.noise(m.shape[-2:], n=m.shape[0], seed=seed)
    for _ in range(warmup):
        generator.generate(m, eps)
    start = generator.forward_passes
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        generator.generate(m, eps)
        samples.append(time.perf_counter() - t0)
    if generator.forward_passes - start != reps:
        raise AssertionError(
            f"expected {reps} forward passes, counted {generator.forward_passes - start}"
        )
    return TimingRecord(samples, m.shape[0], tuple(m.shape[-2:]), warmup, reps)
