"""Leapfrog reversibility, Metropolis bookkeeping replay, and stationary
moments of the chain on a standard Gaussian."""

import numpy as np
import pytest

from cfgdist.hmc import HmcConfig, HmcResult, hmc_chain, leapfrog


class StdGauss:
    """Unit Gaussian in d dimensions with the batch target interface."""

    def log_unnorm(self, x):
        return -0.5 * np.sum(np.asarray(x) ** 2, axis=1)

    def grad_log(self, x):
        return -np.asarray(x)


def test_leapfrog_time_reversible():
    rng = np.random.default_rng(0)
    grad = lambda x: -x
    for _ in range(10):
        d = int(rng.integers(1, 5))
        x0 = rng.normal(size=d)
        p0 = rng.normal(size=d)
        inv_mass = np.exp(rng.normal(scale=0.3, size=d))
        x1, p1, div = leapfrog(x0, p0, grad, 0.1, 25, inv_mass)
        assert not div
        x2, p2, div = leapfrog(x1, -p1, grad, 0.1, 25, inv_mass)
        assert not div
        np.testing.assert_allclose(x2, x0, atol=1e-8)
        np.testing.assert_allclose(p2, -p0, atol=1e-8)


def test_leapfrog_flags_nonfinite_gradient():
    def grad(x):
        return np.where(np.abs(x) > 1.0, np.nan, -x)

    _, _, div = leapfrog(np.array([0.9]), np.array([5.0]), grad, 0.5, 10, np.ones(1))
    assert div


def test_accept_bookkeeping_replays():
    cfg = HmcConfig(step_size=0.15, leapfrog_steps=10, samples=400, burn_in=50, seed=3)
    res = hmc_chain(StdGauss(), cfg, np.array([1.0]))
    assert isinstance(res, HmcResult)
    total = cfg.burn_in + cfg.samples
    assert res.accepted.shape == (total,)
    assert res.log_accept_prob.shape == (total,)
    assert res.uniforms.shape == (total,)
    # the decision is a pure function of the stored draws
    replay = np.log(res.uniforms) < res.log_accept_prob
    assert np.array_equal(replay, res.accepted)
    assert res.acceptance_rate == np.mean(res.accepted[cfg.burn_in:])
    assert res.runtime_s > 0.0


def test_standard_gaussian_moments():
    cfg = HmcConfig(step_size=0.15, leapfrog_steps=10, samples=5000, burn_in=200, seed=0)
    res = hmc_chain(StdGauss(), cfg, np.array([1.5]))
    assert res.samples.shape == (5000, 1)
    s = res.samples[:, 0]
    assert abs(s.mean()) < 0.05
    assert abs(s.var() - 1.0) < 0.1
    assert 0.5 < res.acceptance_rate <= 1.0


def test_coarse_detailed_balance():
    # in stationarity the flow between coarse bins is symmetric; count
    # transitions across {(-inf,-.5), [-.5,.5), [.5,inf)} and compare both
    # directions
    cfg = HmcConfig(step_size=0.15, leapfrog_steps=10, samples=5000, burn_in=200, seed=2)
    res = hmc_chain(StdGauss(), cfg, np.array([0.0]))
    bins = np.digitize(res.samples[:, 0], [-0.5, 0.5])
    counts = np.zeros((3, 3))
    for a, b in zip(bins[:-1], bins[1:]):
        counts[a, b] += 1
    asym = np.abs(counts - counts.T) / counts.sum()
    assert asym.max() < 5e-2


def test_determinism_and_mass_matrix():
    cfg = HmcConfig(step_size=0.1, leapfrog_steps=8, samples=200, burn_in=20,
                    seed=7, mass_diag=np.array([2.0, 0.5]), kernel_std=1.3)
    a = hmc_chain(StdGauss(), cfg, np.zeros(2))
    b = hmc_chain(StdGauss(), cfg, np.zeros(2))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.acceptance_rate == b.acceptance_rate


def test_oversized_step_aborts_in_burn_in():
    cfg = HmcConfig(step_size=1e4, leapfrog_steps=10, samples=50, burn_in=30, seed=0)
    with pytest.raises(ValueError, match="burn-in"):
        hmc_chain(StdGauss(), cfg, np.array([0.5]))


def test_config_validation():
    with pytest.raises(ValueError, match="step_size"):
        HmcConfig(step_size=0.0)
    with pytest.raises(ValueError, match="leapfrog_steps"):
        HmcConfig(leapfrog_steps=0)
    with pytest.raises(ValueError):
        HmcConfig(samples=0)
    with pytest.raises(ValueError, match="kernel_std"):
        HmcConfig(kernel_std=-1.0)
    with pytest.raises(ValueError, match="mass_diag"):
        HmcConfig(mass_diag=np.array([1.0, 0.0]))
