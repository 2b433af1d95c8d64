"""Likelihood-gradient identities with a matched proposal, importance
normalizer versus grid quadrature, mask enforcement, and a short
ascent run that must raise the data log likelihood."""

import numpy as np
import pytest

from cfgdist.chains import KinematicChain
from cfgdist.elbo import TrainConfig
from cfgdist.experts import Bmf, CdfLessEqual, FkOrientation, JointSubset, Mvn, PoeTarget
from cfgdist.families import GaussianComponent, MixtureParams
from cfgdist.learning import (Dataset, LearnConfig, estimate_log_normalizer,
                              learn_poe, poe_param_gradient)
from cfgdist.metrics import GridSpec, normalize_on_grid

ONE_JOINT = KinematicChain.planar((1.0,), joint_limits=((-8.0, 8.0),))


def _gauss_target(mean, scale):
    return PoeTarget(ONE_JOINT, ((JointSubset((0,)),
                                  Mvn(np.atleast_1d(mean), np.atleast_2d(scale))),))


def _single(mean, scale):
    return MixtureParams((GaussianComponent(np.atleast_1d(mean),
                                            np.atleast_2d(scale)),), np.zeros(1))


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(12, 3)))
    path = tmp_path / "demos.csv"
    ds.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "q0,q1,q2"
    assert len(lines) == 13
    back = Dataset.from_csv(path)
    np.testing.assert_allclose(back.configs, ds.configs, rtol=1e-8)
    assert back.size == 12 and back.dim == 3


def test_dataset_validation():
    with pytest.raises(ValueError, match="empty"):
        Dataset(np.zeros((0, 2)))
    # a flat vector is one configuration
    assert Dataset(np.array([1.0, 2.0])).configs.shape == (1, 2)


def test_mask_validation():
    target = PoeTarget(ONE_JOINT, (
        (JointSubset((0,)), Mvn(np.zeros(1), np.eye(1))),
        (FkOrientation(0), Bmf(np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)))),
    ))
    ds = Dataset(np.zeros((4, 1)))
    q = _single(0.0, 1.0)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="target has 2"):
        poe_param_gradient(target, ds, q, {5: ("mean",)}, 32, rng)
    with pytest.raises(ValueError, match="no .*learnable"):
        poe_param_gradient(target, ds, q, {1: ("mean",)}, 32, rng)
    with pytest.raises(ValueError, match="unknown learnable"):
        poe_param_gradient(target, ds, q, {0: ("margin",)}, 32, rng)
    with pytest.raises(ValueError, match="dimension"):
        poe_param_gradient(target, Dataset(np.zeros((4, 2))), q, {0: ("mean",)},
                           32, rng)


def test_matched_proposal_gradient_is_moment_difference():
    # with q identical to the normalized target the importance weights are
    # uniform and the mean gradient reduces to prec * (data mean - mu) minus
    # a zero-mean Monte Carlo term
    target = _gauss_target(0.3, 0.5)
    q = _single(0.3, 0.5)
    data = np.random.default_rng(42).normal(0.45, 0.4, size=(300, 1))
    n = 4096
    g = poe_param_gradient(target, Dataset(data), q, {0: ("mean",)}, n,
                           np.random.default_rng(0))
    np.testing.assert_allclose(g.ess, n, rtol=1e-9)
    assert not g.degenerate
    analytic = (data.mean() - 0.3) / 0.25
    stderr = 1.0 / (0.5 * np.sqrt(n))
    assert abs(g.grads[(0, "mean")][0] - analytic) < 3.0 * stderr


def test_log_normalizer_matches_grid():
    target = _gauss_target(0.3, 0.5)
    q = _single(0.25, 0.6)
    grid = GridSpec(np.array([-8.0]), np.array([8.0]), 2000)
    _, log_c = normalize_on_grid(target.log_unnorm, grid)
    est = estimate_log_normalizer(target, q, 20000, np.random.default_rng(1))
    # the estimated constant itself stays within 5 percent
    assert abs(est - log_c) < np.log(1.05)


def test_degenerate_proposal_warns():
    target = _gauss_target(0.0, 0.02)
    q = _single(50.0, 0.02)
    ds = Dataset(np.zeros((4, 1)))
    with pytest.warns(RuntimeWarning, match="degenerate"):
        g = poe_param_gradient(target, ds, q, {0: ("mean",)}, 200,
                               np.random.default_rng(0))
    assert g.degenerate


def test_learn_raises_likelihood_and_respects_masks():
    guess = PoeTarget(ONE_JOINT, (
        (JointSubset((0,)), Mvn(np.array([-0.5]), np.array([[0.5]]))),
        (JointSubset((0,)), CdfLessEqual(8.0, 0.05)),
    ))
    data = np.random.default_rng(3).normal(0.3, 0.2, size=(400, 1))
    q0 = MixtureParams((GaussianComponent(np.array([0.0]), 0.8 * np.eye(1)),
                        GaussianComponent(np.array([1.0]), 0.8 * np.eye(1))),
                       np.zeros(2))
    cfg = LearnConfig(masks={0: ("mean",)}, outer_iters=8,
                      inner=TrainConfig(steps=300, learning_rate=0.02, seed=0),
                      refit_steps=60, negative_samples=512, theta_lr=0.08, seed=0)
    res = learn_poe(guess, Dataset(data), q0, cfg)
    assert res.log_likelihood.shape == (8,)
    assert res.ess.shape == (8,)
    assert res.log_likelihood[-1] > res.log_likelihood[0] + 0.2
    # the mean ascends toward the data
    assert res.target.experts[0][1].mean[0] > -0.2
    # everything outside the mask is byte-identical
    np.testing.assert_array_equal(res.target.experts[0][1].scale,
                                  np.array([[0.5]]))
    assert res.target.experts[1][1].bound == 8.0
    assert res.target.experts[1][1].margin == 0.05
    assert np.all(res.ess > 0)


def test_learn_is_deterministic():
    guess = _gauss_target(-0.3, 0.6)
    data = np.random.default_rng(5).normal(0.2, 0.3, size=(100, 1))
    q0 = _single(0.0, 0.8)
    cfg = LearnConfig(masks={0: ("mean",)}, outer_iters=3,
                      inner=TrainConfig(steps=150, seed=0), refit_steps=40,
                      negative_samples=128, seed=9)
    a = learn_poe(guess, Dataset(data), q0, cfg)
    b = learn_poe(guess, Dataset(data), q0, cfg)
    np.testing.assert_array_equal(a.log_likelihood, b.log_likelihood)
    np.testing.assert_array_equal(a.target.experts[0][1].mean,
                                  b.target.experts[0][1].mean)
