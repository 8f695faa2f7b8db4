import numpy as np
import pytest

from driftsyn.toy import DenseGenerator, energy_distance, evaluate, sample_target, train_toy


def test_energy_distance_zero_for_same_sample():
    x = np.random.default_rng(0).normal(size=50)
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-15)


def test_energy_distance_against_loop_oracle():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=7), rng.normal(1.0, 2.0, size=5)
    xy = sum(abs(a - b) for a in x for b in y) / (7 * 5)
    xx = sum(abs(a - b) for a in x for b in x) / 49
    yy = sum(abs(a - b) for a in y for b in y) / 25
    assert energy_distance(x, y) == pytest.approx(2 * xy - xx - yy, rel=1e-12)


def test_energy_distance_grows_with_shift():
    rng = np.random.default_rng(2)
    x = rng.normal(size=200)
    assert 0 < energy_distance(x, x + 0.5) < energy_distance(x, x + 2.0)


def test_target_is_bimodal_around_sine():
    rng = np.random.default_rng(3)
    c = sample_target(np.array([0.5]), 4000, rng)[0]
    assert c.shape == (4000,)
    assert abs(c.mean() - np.sin(np.pi * 0.5)) < 0.05
    # two branches: almost no mass near the centre line
    assert np.mean(np.abs(c - 1.0) < 0.1) < 0.05


def test_dense_generator_shapes_and_counter():
    g = DenseGenerator(seed=0)
    out = g.sample(np.array([0.1, -0.3]), 8, np.random.default_rng(0))
    assert out.shape == (2, 8)
    assert g.forward_passes == 1


def test_short_drift_only_run_reduces_energy_distance():
    res = train_toy(steps=300, seed=1, eval_every=100)
    assert res.energy_after < res.energy_before
    assert [s for s, _ in res.history] == [0, 100, 200, 300]


def test_evaluate_is_seeded():
    g = DenseGenerator(seed=4)
    grid = np.linspace(-0.9, 0.9, 10)
    assert evaluate(g, grid, seed=5) == evaluate(g, grid, seed=5)
