import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from dcdebm import models


def _gelu(z):
    return z * ndtr(z)


def _forward_by_hand(model, x):
    h = x
    p = model.params
    n = len(p) // 2
    for k in range(n):
        h = h @ p[2 * k] + p[2 * k + 1]
        if k < n - 1:
            h = _gelu(h)
    return h[:, 0]


HALF_NORM = models.QuadraticEbm.isotropic(2, 1.0)


def test_quadratic_examples():
    x = np.array([[1.0, 2.0]])
    assert models.energy(HALF_NORM, x)[0] == -2.5
    np.testing.assert_array_equal(models.score(HALF_NORM, x), [[-1.0, -2.0]])
    np.testing.assert_allclose(models.laplacian_exact(HALF_NORM, np.random.default_rng(0).normal(size=(5, 2))), -2.0)
    a = models.QuadraticEbm(np.zeros(2), np.array([-1.0, -3.0]))
    np.testing.assert_allclose(models.laplacian_exact(a, np.random.default_rng(1).normal(size=(5, 2))), 4.0)


def test_zero_weight_model_returns_last_bias():
    m = models.init_params((2, 8, 8, 1), seed=0)
    params = [np.zeros_like(p) for p in m.params]
    params[-1] = np.array([0.37])
    z = m.with_params(params)
    np.testing.assert_array_equal(models.energy(z, np.random.default_rng(0).normal(size=(7, 2))), 0.37)
    np.testing.assert_array_equal(models.score(z, np.ones((3, 2))), 0.0)


def test_forward_matches_hand_computation():
    m = models.init_params((3, 16, 16, 1), seed=11)
    x = np.random.default_rng(2).normal(size=(50, 3))
    np.testing.assert_allclose(models.energy(m, x), _forward_by_hand(m, x), rtol=1e-13, atol=1e-14)


def test_param_count_and_shapes():
    m = models.init_params((2, 300, 300, 300, 1), seed=0)
    assert m.n_params == 2 * 300 + 300 + 2 * (300 * 300 + 300) + 300 + 1
    assert sum(np.size(p) for p in m.params) == m.n_params
    assert models.energy(m, np.zeros((4, 2))).shape == (4,)


def test_init_determinism_and_bounds():
    a = models.init_params((300, 20, 1), seed=4)
    b = models.init_params((300, 20, 1), seed=4)
    c = models.init_params((300, 20, 1), seed=5)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0], c.params[0])
    bound = math.sqrt(1 / 300)
    assert bound == pytest.approx(0.0577350, abs=1e-7)
    assert np.abs(a.params[0]).max() <= bound


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_score_matches_finite_differences(seed):
    m = models.init_params((2, 12, 12, 1), seed=seed)
    x = np.random.default_rng(seed).uniform(-2, 2, size=(4, 2))
    s = models.score(m, x)
    h = 1e-5
    fd = np.empty_like(x)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[:, i] = (models.energy(m, x + e) - models.energy(m, x - e)) / (2 * h)
    assert np.max(np.abs(s - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-6


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_laplacian_matches_second_differences(seed):
    m = models.init_params((3, 12, 12, 1), seed=seed)
    x = np.random.default_rng(seed).uniform(-2, 2, size=(4, 3))
    h = 1e-4
    fd = np.zeros(len(x))
    f0 = models.energy(m, x)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd += (models.energy(m, x + e) - 2 * f0 + models.energy(m, x - e)) / h ** 2
    lap = models.laplacian_exact(m, x)
    assert np.max(np.abs(lap - fd) / np.maximum(np.abs(lap), 1e-2)) < 1e-4


def test_constant_energy_has_zero_score_and_laplacian():
    const = models.QuadraticEbm(np.zeros(3), np.zeros(3), 1.5)
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(models.score(const, x), 0.0)
    np.testing.assert_array_equal(models.laplacian_exact(const, x), 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-50, 50))
def test_shift_invariance(seed, c):
    m = models.init_params((2, 10, 10, 1), seed=seed)
    s = models.shift_energy(m, c)
    x = np.random.default_rng(seed).normal(size=(8, 2))
    np.testing.assert_allclose(models.energy(s, x) - models.energy(m, x), c, atol=1e-12)
    np.testing.assert_allclose(models.score(s, x), models.score(m, x), atol=1e-12)
    np.testing.assert_allclose(models.laplacian_exact(s, x), models.laplacian_exact(m, x), atol=1e-12)


@pytest.mark.parametrize("feature", ["scalar", "sinusoidal"])
def test_time_model_conditioning(feature):
    m = models.init_time_ebm(2, (16, 16), seed=3, time_feature=feature)
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert not np.allclose(models.energy(m, x, 0.1), models.energy(m, x, 0.9))
    flat = m.zero_time_weights()
    np.testing.assert_array_equal(models.energy(flat, x, 0.1), models.energy(flat, x, 0.9))
    with pytest.raises(ValueError):
        models.energy(m, x)


def test_exact_laplacian_dimension_limit():
    big = models.QuadraticEbm.isotropic(models.MAX_EXACT_DIM + 1)
    with pytest.raises(ValueError):
        models.laplacian_exact(big, np.zeros((1, models.MAX_EXACT_DIM + 1)))


@pytest.mark.parametrize("model", [
    models.init_params((2, 8, 1), seed=1),
    models.init_time_ebm(2, (8,), seed=2, time_feature="sinusoidal", n_freq=3, t_max=2.0),
    models.QuadraticEbm(np.array([0.5, -1.0]), np.array([2.0, 0.5]), 0.25),
])
def test_checkpoint_roundtrip(tmp_path, model):
    path = models.save_checkpoint(model, tmp_path / "m.ckpt")
    back = models.load_checkpoint(path)
    assert type(back) is type(model) and back.arch == model.arch
    assert all(np.array_equal(p, q) for p, q in zip(back.params, model.params))


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        models.load_checkpoint(bad)
