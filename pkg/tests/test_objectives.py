import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcdebm import models, objectives as obj, oracles
from dcdebm.diffusion import VeSchedule, perturb
from dcdebm.samplers import LangevinConfig, ReplayBuffer

CONST = VeSchedule("const", 1.0)
STD2 = models.QuadraticEbm.isotropic(2, 1.0)


def _const_mlp(dims=(2, 8, 8, 1), c=0.7):
    m = models.init_params(dims, seed=0)
    params = [np.zeros_like(p) for p in m.params]
    params[-1] = np.array([c])
    return m.with_params(params)


def _batch_means(fn, n_batches, rng):
    vals = np.array([fn(rng) for _ in range(n_batches)])
    return vals.mean(), vals.std(ddof=1) / np.sqrt(n_batches)


def test_dcd_population_loss_on_matched_gaussian():
    t = 0.01
    mean, se = _batch_means(
        lambda r: obj.dcd_ve_loss(STD2, r.standard_normal((10 ** 4, 2)), t, CONST, rng=r).value,
        100, np.random.default_rng(0))
    assert abs(mean - (t - 1)) < 3 * se


def test_dcd_components_on_quadratic():
    t = 0.05
    lv = obj.dcd_ve_loss(STD2, np.random.default_rng(1).standard_normal((2 * 10 ** 5, 2)), t, CONST,
                         rng=np.random.default_rng(2))
    assert lv.components["term1"] == pytest.approx(t, abs=0.01)
    assert lv.components["term2"] == pytest.approx(-1.0, abs=0.05)


def test_dcd_constant_energy_is_zero():
    x = np.random.default_rng(3).normal(size=(64, 2))
    assert obj.dcd_ve_loss(_const_mlp(), x, 0.0005, CONST, rng=np.random.default_rng(0)).value == 0.0
    assert obj.dcd_ve_loss(models.QuadraticEbm(np.zeros(2), np.zeros(2), 2.0), x, 0.1, CONST,
                           rng=np.random.default_rng(0)).value == 0.0


def _shift_pairs(loss_fn, m, c=3.7):
    a = loss_fn(m, np.random.default_rng(11))
    b = loss_fn(models.shift_energy(m, c), np.random.default_rng(11))
    return a, b


@pytest.mark.parametrize("kind", ["dcd", "cd", "pcd", "dcd_hutchinson"])
def test_additive_constant_invariance(kind):
    m = models.init_params((2, 16, 16, 1), seed=5)
    x = np.random.default_rng(6).normal(size=(128, 2))
    buf = ReplayBuffer.from_data(x, 500)
    cfg = LangevinConfig(0.01, 5)
    fns = {
        "dcd": lambda mm, r: obj.dcd_ve_loss(mm, x, 0.0005, CONST, rng=r),
        "dcd_hutchinson": lambda mm, r: obj.dcd_ve_loss(mm, x, 0.0005, CONST, ("hutchinson", 2), rng=r),
        "cd": lambda mm, r: obj.cd_loss(mm, x, cfg, r),
        "pcd": lambda mm, r: obj.pcd_loss(mm, x, buf, cfg, r)[0],
    }
    a, b = _shift_pairs(fns[kind], m)
    assert abs(a.value - b.value) < 1e-10
    for ga, gb in zip(a.gradient(), b.gradient()):
        np.testing.assert_allclose(ga, gb, atol=1e-10, rtol=0)


def test_cd_zero_steps_is_zero():
    x = np.random.default_rng(0).normal(size=(32, 2))
    lv = obj.cd_loss(models.init_params((2, 8, 1)), x, LangevinConfig(n_steps=0), np.random.default_rng(1))
    assert lv.value == 0.0


def test_cd_matched_gaussian_near_zero():
    q = models.QuadraticEbm.isotropic(2, 1.0)
    mean, se = _batch_means(
        lambda r: obj.cd_loss(q, r.standard_normal((10 ** 5, 2)), LangevinConfig(0.001, 10), r).value,
        10, np.random.default_rng(4))
    # O(eps) bias: the chain's stationary variance is 1/(1 - eps/4), shifting E f by about -eps/4
    assert abs(mean) < 3 * se + 0.001


def test_cd_gradient_ignores_chain():
    m = models.init_params((2, 8, 1), seed=2)
    x = np.random.default_rng(0).normal(size=(16, 2))
    lv = obj.cd_loss(m, x, LangevinConfig(0.01, 3), np.random.default_rng(1))
    inputs = [n for n in lv.graph.nodes if n.op == "input"]
    # negatives are bound values, not functions of the parameters
    assert {n.name for n in inputs} == {"pos", "neg"}
    neg = lv.bindings[[n.id for n in inputs if n.name == "neg"][0]]
    fixed = obj.contrast_loss(m, x, neg)
    for ga, gb in zip(lv.gradient(), fixed.gradient()):
        np.testing.assert_array_equal(ga, gb)


def test_pcd_identity_path_and_buffer():
    x = np.random.default_rng(0).normal(size=(20, 2))
    buf = ReplayBuffer.from_data(x, 100, 0.0).with_samples(x)
    lv, buf2 = obj.pcd_loss(models.init_params((2, 8, 1)), x, buf, LangevinConfig(n_steps=0),
                            np.random.default_rng(1))
    assert abs(lv.value) < 1e-15
    assert buf2.inserted == 40
    assert np.isfinite(lv.value)


def test_sm_eval_on_gaussian():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((10 ** 5, 2))
    rows = obj.sm_rows(STD2, x)
    assert abs(rows.mean() + 1.0) < 3 * rows.std(ddof=1) / np.sqrt(len(rows))
    assert obj.sm_eval_loss(_const_mlp(), x[:100]) == 0.0


def test_sm_exact_vs_hutchinson():
    m = models.init_params((2, 16, 16, 1), seed=8)
    x = np.random.default_rng(0).normal(size=(500, 2))
    exact = obj.sm_rows(m, x)
    hut = obj.sm_rows(m, x, ("hutchinson", 1000), np.random.default_rng(1))
    d = hut - exact
    assert abs(d.mean()) < 3 * d.std(ddof=1) / np.sqrt(len(d)) + 1e-12


def test_hutchinson_rademacher_exact_on_isotropic():
    for dim in (1, 3, 7):
        q = models.QuadraticEbm.isotropic(dim, 1.0)
        x = np.random.default_rng(dim).normal(size=(50, dim))
        for n in (1, 4):
            est = obj.hutchinson_laplacian(q, x, n, rng=np.random.default_rng(0))
            np.testing.assert_array_equal(est, -float(dim))


def test_hutchinson_gaussian_probes_diag_hessian():
    a = models.QuadraticEbm(np.zeros(2), np.array([-1.0, -3.0]))
    x = np.zeros((10 ** 5, 2))
    est = obj.hutchinson_laplacian(a, x, 1, "gaussian", np.random.default_rng(9))
    assert abs(est.mean() - 4.0) < 3 * est.std(ddof=1) / np.sqrt(len(est))


def test_hutchinson_unbiased_on_mlp():
    m = models.init_params((3, 16, 16, 1), seed=10)
    x = np.repeat(np.random.default_rng(0).normal(size=(1, 3)), 10 ** 4, axis=0)
    d = obj.hutchinson_laplacian(m, x, 1, rng=np.random.default_rng(1)) - models.laplacian_exact(m, x)
    assert abs(d.mean()) < 3 * d.std(ddof=1) / np.sqrt(len(d))


def test_hutchinson_variance_scales_inverse_probes():
    m = models.init_params((4, 16, 16, 1), seed=12)
    x = np.repeat(np.random.default_rng(0).normal(size=(1, 4)), 20000, axis=0)
    rng = np.random.default_rng(2)
    var = {n: obj.hutchinson_laplacian(m, x, n, "gaussian", rng).var() for n in (1, 4, 16)}
    ns = np.array(sorted(var))
    slope = np.polyfit(np.log(ns), np.log([var[n] for n in ns]), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.1)


def test_hutchinson_needs_probe():
    with pytest.raises(ValueError):
        obj.hutchinson_laplacian(STD2, np.zeros((1, 2)), 0)


@pytest.mark.parametrize("mode", ["exact", "hutchinson", "hutchinson:3", ("hutchinson", 2)])
def test_parse_modes(mode):
    kind, n = obj.parse_laplacian_mode(mode)
    assert kind in ("exact", "hutchinson")
    assert obj.laplacian_evals(2, mode) == (2 if kind == "exact" else n)


def test_bad_modes():
    for bad in ("trace", ("hutchinson", 0), 3):
        with pytest.raises(ValueError):
            obj.parse_laplacian_mode(bad)


# gradient integrity


def test_dcd_grad_check():
    m = models.init_params((2, 16, 16, 1), seed=13)
    x = np.random.default_rng(0).normal(size=(64, 2))
    rep = oracles.grad_check(lambda mm, xx, r: obj.dcd_ve_loss(mm, xx, 0.0005, CONST, rng=r), m, x)
    assert rep["max_rel_err"] < 1e-4


def test_sm_grad_check():
    m = models.init_params((2, 16, 16, 1), seed=14)
    x = np.random.default_rng(0).normal(size=(64, 2))
    rep = oracles.grad_check(lambda mm, xx, r: obj.sm_loss_value(mm, xx), m, x)
    assert rep["max_rel_err"] < 1e-4


def test_constant_model_gradients_vanish():
    m = _const_mlp()
    x = np.random.default_rng(0).normal(size=(32, 2))
    for fn in (lambda mm, xx, r: obj.dcd_ve_loss(mm, xx, 0.0005, CONST, rng=r),
               lambda mm, xx, r: obj.sm_loss_value(mm, xx)):
        rep = oracles.grad_check(fn, m, x)
        assert rep["max_abs_err"] < 1e-10
        assert np.all(np.abs(rep["autodiff"]) < 1e-10) and np.all(np.abs(rep["finite_diff"]) < 1e-10)


# time-conditioned loss


def test_time_grid_endpoints():
    grid = obj.time_grid(VeSchedule("const", 1.0, 6400.0), 18)
    assert len(grid) == 18
    assert np.sqrt(grid[0]) == pytest.approx(0.01) and np.sqrt(grid[-1]) == pytest.approx(80.0)
    assert np.all(np.diff(np.log(np.sqrt(grid))) == pytest.approx(np.log(8000) / 17))
    lin = obj.time_grid(VeSchedule("linear", t_max=10.0), 5, 0.1, 2.0)
    np.testing.assert_allclose(lin ** 3 / 3, np.geomspace(0.1, 2.0, 5) ** 2)
    with pytest.raises(ValueError):
        obj.time_grid(CONST, 4, 0.1, 2.0)


class _FrozenTime:
    """A time model pinned at one t, exposed as a plain energy."""

    def __init__(self, tm, t):
        self.tm, self.feat = tm, tm.features(t, 1)[0]
        self.input_dim, self.params = tm.x_dim, tm.params

    def forward(self, graph, x, params, tfeat=None):
        # a (batch, 1) column holding the scalar time feature
        col = graph.add(graph.scale(graph.slice(x, 0, 1), 0.0), graph.constant(self.feat))
        return self.tm.forward(graph, x, params, col)


def test_time_loss_single_level_reduces_to_dcd():
    sched = VeSchedule("const", 1.0, 1.0)
    tm = models.init_time_ebm(2, (8, 8), seed=1)
    x = np.random.default_rng(0).normal(size=(64, 2))
    t1 = 0.04
    a = obj.dcd_ve_time_loss(tm, x, sched, np.random.default_rng(5), np.array([t1]))
    b = obj.dcd_ve_loss(_FrozenTime(tm, t1), x, t1, sched, rng=np.random.default_rng(5))
    assert a.value == pytest.approx(b.value, rel=1e-12)
    assert a.components["level"] == 0 and a.components["t"] == t1


@pytest.mark.parametrize("level", [0, 3, 5])
def test_time_loss_with_zeroed_time_weights_matches_plain(level):
    sched = VeSchedule("const", 1.0, 2.0)
    grid = obj.time_grid(sched, 6, 0.1, 1.4)
    tm = models.init_time_ebm(2, (8, 8), seed=2).zero_time_weights()
    plain = models.MlpEbm((2, 8, 8, 1), (tm.params[0][:2],) + tuple(tm.params[1:]))
    x = np.random.default_rng(0).normal(size=(64, 2))
    a = obj.dcd_ve_time_loss(tm, x, sched, np.random.default_rng(7), grid, level=level)
    rng = np.random.default_rng(7)
    t_prev = 0.0 if level == 0 else grid[level - 1]
    x_lo = perturb(x, t_prev, sched, rng)
    b = obj.dcd_ve_loss(plain, x_lo, grid[level] - t_prev, sched, rng=rng)
    assert a.value == pytest.approx(b.value, rel=1e-12, abs=1e-12)


def test_level_constants_average_g2():
    lin = VeSchedule("linear", t_max=2.0)
    t_prev, t_i, c_rate, c_diff = obj.level_constants(lin, np.array([0.5, 1.0]), 1)
    assert (t_prev, t_i) == (0.5, 1.0)
    assert c_rate == pytest.approx(0.5 * (1 / 3 - 0.125 / 3) / 0.5)
    assert c_diff == pytest.approx(2.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_dcd_program_matches_loss_value(seed):
    m = models.init_params((2, 8, 8, 1), seed=seed)
    x = np.random.default_rng(seed).normal(size=(32, 2))
    lv = obj.dcd_ve_loss(m, x, 0.01, CONST, rng=np.random.default_rng(1))
    rng = np.random.default_rng(1)
    xt = perturb(x, 0.01, CONST, rng)
    loss, t1, t2, grads = obj.DcdProgram(m).run(m, x, xt, 0.5, 100.0, rng)
    assert loss == pytest.approx(lv.value, rel=1e-12, abs=1e-12)
    for ga, gb in zip(grads, lv.gradient()):
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-12)
