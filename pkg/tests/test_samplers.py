import numpy as np
import pytest

from dcdebm import models
from dcdebm.samplers import (ChainDivergedError, LangevinConfig, ReplayBuffer, denoise, langevin_run,
                             pcd_negatives)


def test_zero_steps_returns_start():
    x = np.random.default_rng(0).normal(size=(6, 2))
    out = langevin_run(models.init_params((2, 4, 1)), x, LangevinConfig(n_steps=0), np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)


def test_noiseless_contraction_toward_mean():
    mu = np.array([0.5, -1.5])
    q = models.QuadraticEbm(mu, np.ones(2))
    eps, n = 0.1, 25
    x0 = np.array([[3.0, 2.0], [-1.0, 0.0]])
    out = langevin_run(q, x0, LangevinConfig(eps, n, noise_on=False))
    np.testing.assert_allclose(out - mu, (x0 - mu) * (1 - eps / 2) ** n, rtol=1e-12)


def test_gaussian_stationarity_moments():
    q = models.QuadraticEbm.isotropic(1, 1.0)
    rng = np.random.default_rng(5)
    x = langevin_run(q, rng.standard_normal((10 ** 5, 1)), LangevinConfig(0.001, 1000), rng)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1) < 0.05


def test_noise_requires_rng():
    with pytest.raises(ValueError):
        langevin_run(models.QuadraticEbm.isotropic(1), np.zeros((1, 1)), LangevinConfig())


def test_divergence_is_detected():
    # f = +x^2/2 * 1e6 pushes chains away at an exploding rate
    q = models.QuadraticEbm(np.zeros(1), np.array([-1e6]))
    with pytest.raises(ChainDivergedError) as err:
        langevin_run(q, np.ones((2, 1)), LangevinConfig(1.0, 200, noise_on=False))
    assert err.value.step > 0


def test_config_validation():
    with pytest.raises(ValueError):
        LangevinConfig(step_size=0.0)
    with pytest.raises(ValueError):
        LangevinConfig(n_steps=-1)


def _buffer(frac, data=None):
    data = np.random.default_rng(0).normal(size=(100, 2)) if data is None else data
    return ReplayBuffer.from_data(data, 50, frac)


def test_full_reinit_uses_box():
    buf = _buffer(1.0).with_samples(np.full((40, 2), 1e3))
    x, _ = pcd_negatives(models.QuadraticEbm.isotropic(2), buf, 20, LangevinConfig(n_steps=0), np.random.default_rng(1))
    assert np.all((x >= buf.low) & (x <= buf.high))


def test_identity_path_returns_buffer_rows():
    rows = np.arange(40.0).reshape(20, 2)
    buf = _buffer(0.0).with_samples(rows)
    x, _ = pcd_negatives(models.QuadraticEbm.isotropic(2), buf, 10, LangevinConfig(n_steps=0), np.random.default_rng(2))
    assert {tuple(r) for r in x} <= {tuple(r) for r in rows}
    assert len({tuple(r) for r in x}) == 10


def test_box_is_inflated_bounding_box():
    data = np.array([[0.0, -1.0], [2.0, 3.0]])
    buf = ReplayBuffer.from_data(data, 10)
    np.testing.assert_allclose(buf.low, [-0.2, -1.4])
    np.testing.assert_allclose(buf.high, [2.2, 3.4])


def test_occupancy_counts():
    buf = _buffer(0.05)
    rng = np.random.default_rng(3)
    q = models.QuadraticEbm.isotropic(2)
    for k in range(1, 9):
        _, buf = pcd_negatives(q, buf, 16, LangevinConfig(n_steps=1), rng)
        assert buf.inserted == 16 * k
        assert buf.size == min(buf.capacity, buf.inserted)


def test_buffer_drifts_to_model_mode():
    q = models.QuadraticEbm.isotropic(2)
    buf = ReplayBuffer(2000, np.array([2.0, 2.0]), np.array([4.0, 4.0]), 0.0)
    rng = np.random.default_rng(4)
    for _ in range(40):
        _, buf = pcd_negatives(q, buf, 500, LangevinConfig(0.05, 10), rng)
    assert np.all(np.abs(buf.samples[-500:].mean(axis=0)) < 0.5)


def test_denoise():
    mu = np.linspace(-1, 1, 16)
    q = models.QuadraticEbm(mu, np.ones(16))
    noisy = mu + 0.5 * np.random.default_rng(6).normal(size=(3, 16))
    errs = [np.sqrt(np.mean((denoise(q, noisy, LangevinConfig(0.1, n)) - mu) ** 2)) for n in range(6)]
    assert np.all(np.diff(errs) < 0)
    np.testing.assert_array_equal(denoise(q, noisy, LangevinConfig(0.1, 0)), noisy)
    const = models.QuadraticEbm(np.zeros(16), np.zeros(16))
    np.testing.assert_array_equal(denoise(const, noisy, LangevinConfig(0.1, 5)), noisy)
    np.testing.assert_array_equal(denoise(q, noisy, LangevinConfig(0.1, 4)), denoise(q, noisy, LangevinConfig(0.1, 4)))
