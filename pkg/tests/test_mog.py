import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from tica.errors import DegenerateInput
from tica.mog import MoGParams, fit_mog, mog_loglik, mog_logpdf, sample_mog


def test_single_component():
    x = np.random.default_rng(0).standard_normal(10000)
    p = fit_mog(x, 1)
    assert p.weights[0] == 1
    assert abs(p.means[0]) < 0.05 and abs(p.vars[0] - 1) < 0.1


def test_two_component_recovery():
    rng = np.random.default_rng(1)
    n = 20000
    big = rng.random(n) < 0.1
    x = np.where(big, 5 * rng.standard_normal(n), rng.standard_normal(n))
    p = fit_mog(x, 2)
    assert abs(p.weights[-1] - 0.1) < 0.05
    assert p.vars[-1] == p.vars.max()
    assert abs(p.weights.sum() - 1) < 1e-12


def test_nesting_and_monotone_em():
    x = np.random.default_rng(2).standard_t(3, size=3000)
    p3 = fit_mog(x, 3)
    assert mog_loglik(p3, x) >= mog_loglik(fit_mog(x, 1), x)
    tr = np.array(p3.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-10 * np.abs(tr[1:]))
    assert np.all(p3.vars >= p3.var_floor)


def test_too_few_samples():
    with pytest.raises(DegenerateInput):
        fit_mog(np.arange(20.0), 3)


def test_logpdf_examples():
    assert mog_logpdf(MoGParams([1.0], [0.0], [1.0]), 0.0) == pytest.approx(-0.5 * np.log(2 * np.pi))
    two = MoGParams([0.3, 0.7], [1.0, 1.0], [2.0, 2.0])
    xs = np.linspace(-3, 3, 11)
    np.testing.assert_allclose(mog_logpdf(two, xs), norm.logpdf(xs, 1, np.sqrt(2)), atol=1e-12)


def test_logpdf_integrates_to_one():
    rng = np.random.default_rng(3)
    for _ in range(5):
        w = rng.dirichlet(np.ones(3))
        p = MoGParams(w, rng.normal(0, 3, 3), rng.uniform(0.2, 4, 3))
        val, _ = quad(lambda t: np.exp(mog_logpdf(p, t)), -60, 60, limit=200)
        assert abs(val - 1) < 1e-4


def test_logpdf_far_tail_is_finite():
    p = MoGParams([0.5, 0.5], [0.0, 1.0], [1e-4, 1e-4])
    assert np.isfinite(mog_logpdf(p, 500.0))


def test_sampling():
    p = MoGParams([1.0], [5.0], [1e-8], 1e-8)
    s = sample_mog(p, 1000, seed=0)
    assert np.all(np.abs(s - 5) < 6 * 5 * np.sqrt(1e-8))
    half = MoGParams([0.5, 0.5], [-100.0, 100.0], [1.0, 1.0])
    s = sample_mog(half, 100000, seed=1)
    assert abs((s > 0).mean() - 0.5) < 0.01
    np.testing.assert_array_equal(sample_mog(half, 50, seed=2), sample_mog(half, 50, seed=2))
