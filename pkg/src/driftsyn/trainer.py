"""Drifting objective, patch sampling, and the training loop.

Per step: sample noise, generate c_hat, crop positive patches from the real targets
and negative patches from c_hat, move each generated patch toward
``stop_gradient(patch + V(patch))`` and add the weighted L1 fidelity term.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SliceDataset
from .drift import drift_field_batch, median_tau
from .generator import Generator, GeneratorSpec
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "drift_loss", "l1_loss", "total", "tau_used", "grad_norm", "val_l1", "wall_seconds"]


class ConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_drift: float = 1.0
    lambda_l1: float = 10.0
    patches_per_image: int = 16
    patch_size: int | None = None  # None: image size / 8
    patch_scope: str = "image"  # "image": count per image; "batch": count per batch
    lr: float = 1e-4
    tau: float | None = None  # None: median heuristic per step
    early_stop_window: int = 20
    early_stop_threshold: float = 0.01
    split: tuple = (0.7, 0.1, 0.2)
    seed: int = 0
    batch_size: int = 4
    max_epochs: int = 200
    eval_seed: int = 12345

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {self.split}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lambda_drift < 0 or self.lambda_l1 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError(f"fixed tau must be positive, got {self.tau}")
        if self.patches_per_image < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("patches_per_image and batch_size must be >= 1, max_epochs >= 0")
        if self.early_stop_window < 1 or not 0 <= self.early_stop_threshold < 1:
            raise ConfigError("early_stop_window must be >= 1 and threshold in [0, 1)")
        if self.patch_scope not in ("image", "batch"):
            raise ConfigError(f"patch_scope must be 'image' or 'batch', got {self.patch_scope!r}")

    def resolved_patch_size(self, image_size: int) -> int:
        p = self.patch_size if self.patch_size is not None else max(1, image_size // 8)
        if p > image_size:
            raise ConfigError(f"patch_size {p} exceeds image size {image_size}")
        return p


@dataclass
class LossReport:
    drift_loss: float
    l1_loss: float
    total: float
    tau_used: float = float("nan")
    grad_norm: float = float("nan")


@dataclass
class PatchSet:
    points: object  # (Q, D) ndarray or Tensor
    offsets: list
    role: str


# ---------------------------------------------------------------------- data split


def split_dataset(ids, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffle ids and cut them into train/val/test by largest-remainder rounding.

    Every partition with a non-zero fraction gets at least one id.
    """
    ids = list(ids)
    fr = np.asarray(fractions, dtype=np.float64)
    if not ids:
        raise ConfigError("cannot split an empty id list")
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1) > 1e-9:
        raise ConfigError(f"invalid split fractions {tuple(fractions)}")
    n = len(ids)
    nonzero = fr > 0
    if n < nonzero.sum():
        raise ConfigError(f"{n} ids cannot fill {int(nonzero.sum())} non-empty partitions")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    for i in np.nonzero(nonzero & (sizes == 0))[0]:
        sizes[i] += 1
        sizes[np.argmax(sizes)] -= 1
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return shuffled[:a], shuffled[a:b], shuffled[b:]


# ---------------------------------------------------------------------- patches


def patch_offsets(n_images: int, height: int, width: int, count: int, size: int, rng, per_image=True):
    if size > height or size > width:
        raise ConfigError(f"patch size {size} larger than image {height}x{width}")
    if per_image:
        imgs = np.repeat(np.arange(n_images), count)
    else:
        imgs = rng.integers(0, n_images, size=count)
    rows = rng.integers(0, height - size + 1, size=imgs.size)
    cols = rng.integers(0, width - size + 1, size=imgs.size)
    return [(int(i), int(r), int(c)) for i, r, c in zip(imgs, rows, cols)]


def sample_patches(images, count: int, patch_size: int, seed=None, rng=None, per_image=True, role="positive"):
    """Crop ``count`` square patches (per image, or per batch) at uniform random offsets.

    ``images`` is (N, C, H, W). A Tensor input yields a differentiable (Q, D) Tensor of
    patches; an ndarray yields an ndarray.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if data.ndim == 2:
        data = data[None, None]
    n, _, h, w = data.shape
    offs = patch_offsets(n, h, w, count, patch_size, rng, per_image)
    if isinstance(images, Tensor):
        pts = T.extract_patches(images, offs, patch_size)
    else:
        pts = np.stack([data[i, :, r : r + patch_size, c : c + patch_size].reshape(-1) for i, r, c in offs])
    return PatchSet(pts, offs, role)


# ---------------------------------------------------------------------- losses


def drift_targets(generated: np.ndarray, positives: np.ndarray, negatives=None, tau=None):
    """Drift V for every generated patch. Without explicit negatives, the generated
    set itself is used with each query excluded from its own repulsion set."""
    tau_used = float(tau) if tau is not None else median_tau(generated, positives)
    if negatives is None:
        res = drift_field_batch(generated, positives, generated, tau_used, self_index=np.arange(len(generated)))
    else:
        res = drift_field_batch(generated, positives, negatives, tau_used)
    return res, tau_used


def drift_loss(generated: Tensor, positives, negatives=None, tau=None):
    """Mean squared distance between generated patches and their frozen drifted copies.

    Returns (loss, V, tau_used). The gradient w.r.t. the patches is -2 V / N, N being
    the number of averaged elements.
    """
    gen = generated if isinstance(generated, Tensor) else Tensor(generated)
    pos = positives.points if isinstance(positives, PatchSet) else positives
    # positives only supply values; nothing is recorded through them
    pos = np.asarray(pos.data if isinstance(pos, Tensor) else pos, dtype=np.float64)
    neg = negatives.points if isinstance(negatives, PatchSet) else negatives
    if neg is not None:
        neg = np.asarray(neg.data if isinstance(neg, Tensor) else neg, dtype=np.float64)
    res, tau_used = drift_targets(gen.data, pos, neg, tau)
    target = T.stop_gradient(T.add(gen, Tensor(res.V)))
    return T.mse_mean(gen, target), res.V, tau_used


def total_loss(c_hat: Tensor, c, drift_component, cfg: TrainConfig, tau_used=float("nan")):
    """lambda_drift * drift + lambda_l1 * mean|c_hat - c|; returns (loss tensor, LossReport)."""
    c_hat = c_hat if isinstance(c_hat, Tensor) else Tensor(c_hat)
    c = c if isinstance(c, Tensor) else Tensor(c)
    l1 = T.l1_mean(c_hat, c)
    total = T.scale(l1, cfg.lambda_l1)
    d = 0.0
    if drift_component is not None:
        d = float(drift_component.data)
        if cfg.lambda_drift != 0:
            total = T.add(total, T.scale(drift_component, cfg.lambda_drift))
    rep = LossReport(
        drift_loss=d,
        l1_loss=float(l1.data),
        total=cfg.lambda_drift * d + cfg.lambda_l1 * float(l1.data),
        tau_used=tau_used,
    )
    return total, rep


def should_stop(history, window: int = 20, threshold: float = 0.01) -> bool:
    """True when the best loss of the last ``window`` epochs did not improve on the
    best earlier loss by more than ``threshold`` (relative)."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    h = list(history)
    if len(h) < window + 1:
        return False
    return min(h[-window:]) > (1.0 - threshold) * min(h[:-window])


# ---------------------------------------------------------------------- training


@dataclass
class TrainResult:
    generator: Generator
    best: Generator
    history: list = field(default_factory=list)
    val_l1: list = field(default_factory=list)
    split: tuple = ((), (), ())
    stopped_early: bool = False
    epochs_run: int = 0


def _global_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def validation_l1(gen: Generator, data: SliceDataset, seed: int, batch: int = 8) -> float:
    if len(data) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    total = 0.0
    for lo in range(0, len(data), batch):
        m = data.m[lo : lo + batch]
        eps = gen.noise(m.shape[-2:], n=m.shape[0], rng=rng)
        out = gen.generate(m, eps)
        total += float(np.abs(out - data.c[lo : lo + batch]).sum())
    return total / data.c.size


def train_step(gen: Generator, opt: Adam, m, c, cfg: TrainConfig, rng, patch_rng=None) -> LossReport:
    T.clear_tape()
    opt.zero_grad()
    patch_rng = patch_rng if patch_rng is not None else rng
    n, _, h, w = m.shape
    eps = gen.noise((h, w), n=n, rng=rng)
    c_hat = gen.generate(m, eps, grad=True)
    drift = None
    tau_used = float("nan")
    if cfg.lambda_drift > 0:
        size = cfg.resolved_patch_size(min(h, w))
        per_image = cfg.patch_scope == "image"
        neg = sample_patches(c_hat, cfg.patches_per_image, size, rng=patch_rng, per_image=per_image, role="negative")
        pos = sample_patches(c, cfg.patches_per_image, size, rng=patch_rng, per_image=per_image, role="positive")
        drift, _, tau_used = drift_loss(neg.points, pos.points, tau=cfg.tau)
    loss, rep = total_loss(c_hat, c, drift, cfg, tau_used)
    if not math.isfinite(rep.total):
        T.clear_tape()
        raise NonFiniteLossError(f"non-finite loss {rep.total}")
    loss.backward()
    rep.grad_norm = _global_norm(gen.parameters())
    opt.step()
    return rep


def _git_describe() -> str:
    import subprocess

    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def train(
    dataset: SliceDataset,
    cfg: TrainConfig,
    spec: GeneratorSpec | None = None,
    out_dir=None,
    split=None,
    progress=None,
) -> TrainResult:
    """Optimize a fresh generator on ``dataset``.

    Writes ``train_log.csv``, ``best.ckpt``, ``final.ckpt`` and ``run.json`` to ``out_dir``
    when given. ``split`` may pass a precomputed (train, val, test) subject split.
    """
    spec = spec or GeneratorSpec()
    ss = np.random.SeedSequence(cfg.seed)
    # independent streams: toggling the drift term leaves init, batches and noise unchanged
    init_seed, loop_seed, patch_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    if split is None:
        split = split_dataset(dataset.subject_ids, cfg.split, cfg.seed)
    train_ids, val_ids, test_ids = split
    tr, va = dataset.subset(train_ids), dataset.subset(val_ids)
    if len(tr) == 0 and cfg.max_epochs > 0:
        raise ConfigError("training split is empty")

    gen = Generator(spec, seed=init_seed)
    opt = Adam(gen.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(loop_seed)
    patch_rng = np.random.default_rng(patch_seed)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(gen, gen, split=(list(train_ids), list(val_ids), list(test_ids)))

    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": asdict(cfg),
            "generator": asdict(spec),
            "seeds": {"config": cfg.seed, "init": init_seed, "loop": loop_seed, "patch": patch_seed, "eval": cfg.eval_seed},
            "split": {"train": list(train_ids), "val": list(val_ids), "test": list(test_ids)},
            "version": _git_describe(),
        }
        (out / "run.json").write_text(json.dumps(meta, indent=2))
        logf = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(logf)
        writer.writerow(LOG_COLUMNS)

    def snapshot(g: Generator) -> Generator:
        return Generator(spec, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in g.params.items()}, seed=g.seed)

    best = snapshot(gen)
    best_val = validation_l1(gen, va, cfg.eval_seed)
    last_good = snapshot(gen)
    losses = []
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(len(tr))
            reps = []
            for lo in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[lo : lo + cfg.batch_size])
                try:
                    reps.append(train_step(gen, opt, tr.m[idx], tr.c[idx], cfg, rng, patch_rng))
                except NonFiniteLossError:
                    gen.params = last_good.params
                    if out is not None:
                        gen.save(out / "final.ckpt", extra={"status": "aborted: non-finite loss"})
                        best.save(out / "best.ckpt")
                    raise
            last_good = snapshot(gen)
            rep = LossReport(
                drift_loss=float(np.mean([r.drift_loss for r in reps])),
                l1_loss=float(np.mean([r.l1_loss for r in reps])),
                total=float(np.mean([r.total for r in reps])),
                tau_used=float(np.mean([r.tau_used for r in reps])),
                grad_norm=float(np.mean([r.grad_norm for r in reps])),
            )
            val = validation_l1(gen, va, cfg.eval_seed)
            if math.isnan(best_val) or val < best_val:
                best_val = val
                best = snapshot(gen)
            result.history.append(rep)
            result.val_l1.append(val)
            losses.append(rep.total)
            if writer is not None:
                writer.writerow(
                    [epoch, rep.drift_loss, rep.l1_loss, rep.total, rep.tau_used, rep.grad_norm, val,
                     round(time.perf_counter() - t0, 3)]
                )
                logf.flush()
            if progress is not None:
                progress(epoch, rep, val)
            result.epochs_run = epoch + 1
            if should_stop(losses, cfg.early_stop_window, cfg.early_stop_threshold):
                result.stopped_early = True
                break
    finally:
        if writer is not None:
            logf.close()

    if len(va) == 0:
        best = snapshot(gen)
    result.generator = gen
    result.best = best
    if out is not None:
        gen.save(out / "final.ckpt", extra={"epochs": result.epochs_run})
        best.save(out / "best.ckpt", extra={"val_l1": best_val})
    return result
