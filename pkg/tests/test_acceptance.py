"""Acceptance suite: one PASS/FAIL line per primary criterion.

The lines are printed as each check finishes and repeated in the pytest terminal
summary under "acceptance criteria". The end-to-end phantom run dominates the
runtime (about 13 minutes on one CPU core).
"""

import time

import numpy as np

from driftsyn import tensor as T
from driftsyn.cli import driftcheck
from driftsyn.data import phantom_dataset, slices_from_pairs
from driftsyn.drift import drift_field, median_tau
from driftsyn.generator import Generator, GeneratorSpec
from driftsyn.metrics import gradient_energy, psnr, rmse, ssim, time_inference, uncertainty_map
from driftsyn.tensor import Tensor
from driftsyn.toy import train_toy
from driftsyn.trainer import TrainConfig, drift_loss, sample_patches, should_stop, train

from acceptance_log import report
from gradcheck import check_op
from test_metrics import brute_ssim
from test_tensor import PRIMITIVES

E2E_PAIRS = 40
E2E_EPOCHS = 100
E2E_BUDGET_S = 15 * 60


def test_drift_field_oracle_equivalence():
    res = driftcheck(instances=100, seed=2024)
    ok = res["max_rel_error"] <= 1e-12 and res["seconds"] < 60
    report(
        "drift-field oracle equivalence",
        ok,
        f"{res['instances']} instances, max rel err {res['max_rel_error']:.2e} (≤1e-12), {res['seconds']:.1f} s (<60 s)",
    )


def test_equilibrium_invariant():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        d = int(rng.choice([1, 3, 16, 64, 256, 1024, 4096]))
        n = int(rng.integers(1, 33))
        s = rng.normal(size=(n, d)) * rng.uniform(0.1, 10)
        q = rng.normal(size=d) * rng.uniform(0.1, 10)
        tau = median_tau(q[None, :], s)
        v = drift_field(q, s, s, tau, exclude_self=False).V
        worst = max(worst, float(np.max(np.abs(v))))
    report("equilibrium invariant", worst <= 1e-12, f"50 sets, max |V| {worst:.2e} (≤1e-12)")


def test_drift_loss_gradient_identity():
    rng = np.random.default_rng(11)
    worst_id = 0.0
    for _ in range(20):
        n, d = int(rng.integers(2, 17)), int(rng.choice([4, 16, 64]))
        g = Tensor(rng.normal(size=(n, d)), requires_grad=True)
        T.clear_tape()
        loss, V, _ = drift_loss(g, rng.normal(0.3, 1.0, size=(int(rng.integers(1, 17)), d)))
        loss.backward()
        worst_id = max(worst_id, float(np.max(np.abs(g.grad + 2.0 * V / g.size))))

    # full chain: frozen drift target on patches of a generated image, back to the weights
    spec = GeneratorSpec(base_width=4, depth=2)
    gen = Generator(spec, seed=3)
    m = rng.uniform(size=(2, 1, 16, 16))
    c = rng.uniform(size=(2, 1, 16, 16))
    eps = gen.noise((16, 16), n=2, seed=4)
    T.clear_tape()
    out = gen.generate(m, eps, grad=True)
    neg = sample_patches(out, 4, 4, seed=5)
    pos = sample_patches(c, 4, 4, seed=6)
    loss, V, _ = drift_loss(neg.points, pos.points)
    loss.backward()
    frozen = neg.points.data + V

    def f():
        with T.no_grad():
            o = gen.forward(Tensor(m), Tensor(eps))
            pts = T.extract_patches(o, neg.offsets, 4).data
        return float(np.mean((pts - frozen) ** 2))

    worst_fd = 0.0
    # small step: the leaky-ReLU network is piecewise linear and a 1e-3 nudge to an
    # early-layer weight can flip activations, which biases the difference quotient
    h = 1e-5
    for name in ("enc0a.w", "enc1.w", "dec1.w", "up2.w", "out.w", "out.b"):
        p = gen.params[name]
        for idx in [tuple(rng.integers(0, s) for s in p.shape) for _ in range(3)]:
            old = p.data[idx]
            p.data[idx] = old + h
            hi = f()
            p.data[idx] = old - h
            lo = f()
            p.data[idx] = old
            num = (hi - lo) / (2 * h)
            ana = p.grad[idx]
            worst_fd = max(worst_fd, abs(ana - num) / max(abs(ana), abs(num), 1e-12))
    ok = worst_id <= 1e-10 and worst_fd <= 1e-4
    report(
        "drift-loss gradient identity",
        ok,
        f"max |grad + 2V/N| {worst_id:.1e} (≤1e-10); generator FD rel err {worst_fd:.1e} (≤1e-4)",
    )


def test_autodiff_suite():
    worst, count = 0.0, 0
    for name, (build, make) in sorted(PRIMITIVES.items()):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            inputs = make(rng)
            if name == "l1_mean":
                d = inputs[0] - inputs[1]
                inputs[1] = np.where(np.abs(d) < 0.05, inputs[1] + 0.1, inputs[1])
            worst = max(worst, check_op(build, inputs, step=1e-3, seed=seed))
            count += 1
    report(
        "autodiff suite",
        worst <= 1e-4,
        f"{len(PRIMITIVES)} primitives x 20 seeds ({count} checks), max rel err {worst:.1e} (≤1e-4)",
    )


def test_metric_oracles():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(3):
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(0, 0.15, size=(32, 32)), 0, 1)
        worst = max(worst, abs(ssim(a, b) - brute_ssim(a, b)))
    zero, off = np.zeros((32, 32)), np.full((32, 32), 0.1)
    r, p = rmse(zero, off), psnr(zero, off)
    ok = worst <= 1e-9 and abs(r - 0.1) <= 1e-15 and abs(p - 20.0) <= 1e-12
    report("metric oracles", ok, f"SSIM vs brute force {worst:.1e} (≤1e-9); offset 0.1: RMSE {r!r}, PSNR {p!r} dB")


def test_toy_transport():
    t0 = time.perf_counter()
    res = train_toy(steps=2000, seed=0)
    secs = time.perf_counter() - t0
    ok = res.reduction >= 0.5 and secs < 120
    report(
        "toy transport",
        ok,
        f"energy distance {res.energy_before:.4f} -> {res.energy_after:.4f} "
        f"({100 * res.reduction:.1f}% reduction, ≥50%) in 2000 steps, {secs:.1f} s (<120 s)",
    )


def test_one_step_inference():
    gen = Generator(GeneratorSpec(), seed=0)
    m = np.random.default_rng(13).uniform(size=(64, 64))
    before = gen.forward_passes
    gen.generate(m, gen.noise((64, 64), seed=0))
    one = gen.forward_passes - before
    rec = time_inference(gen, m, warmup=3, reps=20)
    ms = rec.median * 1e3
    report("one-step inference", one == 1 and ms < 50, f"forward passes per call {one}; median 64x64 latency {ms:.1f} ms (<50 ms)")


def test_uncertainty_protocol():
    rng = np.random.default_rng(14)
    m = rng.uniform(size=(64, 64))
    gen = Generator(GeneratorSpec(), seed=1)
    seeds = list(range(500, 520))
    a = uncertainty_map(gen, m, K=20, seeds=seeds)
    b = uncertainty_map(gen, m, K=20, seeds=[seeds[i] for i in rng.permutation(20)])
    flat = uncertainty_map(Generator(GeneratorSpec(noise_scale=0.0), seed=1), m, K=20, seeds=seeds)
    ok = bool(np.all(a.std >= 0)) and np.array_equal(a.std, b.std) and bool(np.all(flat.std == 0))
    report(
        "uncertainty protocol",
        ok,
        f"K=20: min std {a.std.min():.2e} ≥ 0, order-invariant {np.array_equal(a.std, b.std)}, "
        f"noise_scale=0 max std {flat.std.max():.1e}",
    )


def test_early_stop_rule():
    cases = [
        ("decreasing 2%/epoch", [0.98**i for i in range(40)], False),
        ("constant for 21 epochs", [1.0] * 21, True),
        ("history shorter than window+1", [1.0] * 20, False),
    ]
    got = [(label, should_stop(h, 20, 0.01), want) for label, h, want in cases]
    ok = all(g == w for _, g, w in got)
    report("early-stop rule", ok, "; ".join(f"{label} -> {g}" for label, g, _ in got))


def _score(gen, test, seed=7):
    rng = np.random.default_rng(seed)
    out = gen.generate(test.m, gen.noise(test.m.shape[-2:], n=len(test), rng=rng))
    s = float(np.mean([ssim(o[0], c[0]) for o, c in zip(out, test.c)]))
    g = float(np.mean([gradient_energy(o[0]) for o in out]))
    return s, g


def test_end_to_end_phantom_run():
    t0 = time.perf_counter()
    data = slices_from_pairs(phantom_dataset(E2E_PAIRS))
    drift_run = train(data, TrainConfig(max_epochs=E2E_EPOCHS))
    l1_run = train(data, TrainConfig(max_epochs=E2E_EPOCHS, lambda_drift=0.0))
    secs = time.perf_counter() - t0
    assert drift_run.split == l1_run.split
    test = data.subset(drift_run.split[2])
    untrained = Generator(GeneratorSpec(), seed=drift_run.generator.seed)
    s0, _ = _score(untrained, test)
    sd, gd = _score(drift_run.generator, test)
    sl, gl = _score(l1_run.generator, test)
    ok = sd > s0 and sd >= sl - 0.02 and gd > gl and secs <= E2E_BUDGET_S
    report(
        "end-to-end phantom run",
        ok,
        f"{E2E_PAIRS} pairs 64x64, {E2E_EPOCHS} epochs x 2 runs in {secs:.0f} s (≤{E2E_BUDGET_S} s); "
        f"test SSIM drift {sd:.4f} vs untrained {s0:.4f} vs L1-only {sl:.4f}; "
        f"gradient energy drift {gd:.5f} vs L1-only {gl:.5f}",
    )
