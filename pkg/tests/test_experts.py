"""Expert densities and the product target: hand oracles for each expert's
log, finite-difference checks on the product's configuration gradient, the
density floor, priority projection and task-combination ranking."""

import math

import numpy as np
import pytest
from scipy.special import log_ndtr
from scipy.stats import norm

from cfgdist.chains import KinematicChain, fk_jacobian, nullspace_projector
from cfgdist.elbo import TrainConfig
from cfgdist.experts import (Binding, Bmf, CdfLessEqual, CoM,
                             ConditionalPoeTarget, FkOrientation, FkPosition,
                             IkProjected, JointSubset, Mvn, PoeTarget,
                             RelativeDistances, UniGauss,
                             rank_task_combinations)
from cfgdist.families import init_mixture
from cfgdist.metrics import GridSpec, normalize_on_grid

TWO_LINK = KinematicChain.planar((1.0, 1.0))


# --- individual experts ---------------------------------------------------

def test_mvn_log_hand_value():
    # Sigma = diag(4, 1), residual (2, 1): -(1 + 1) / 2 = -1
    dens = Mvn(np.zeros(2), np.diag([2.0, 1.0]))
    np.testing.assert_allclose(dens.log(np.array([[2.0, 1.0]])), [-1.0])
    np.testing.assert_allclose(dens.log(np.zeros((1, 2))), [0.0])


def test_mvn_grad_is_negative_whitened_residual():
    rng = np.random.default_rng(0)
    low = np.tril(rng.normal(size=(3, 3)))
    np.fill_diagonal(low, np.abs(np.diag(low)) + 0.4)
    dens = Mvn(rng.normal(size=3), low)
    v = rng.normal(size=(6, 3))
    sigma = low @ low.T
    expect = -np.linalg.solve(sigma, (v - dens.mean).T).T
    np.testing.assert_allclose(dens.grad(v), expect, atol=1e-10)


def test_mvn_rejects_bad_scale():
    with pytest.raises(ValueError):
        Mvn(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))  # upper entry
    with pytest.raises(ValueError):
        Mvn(np.zeros(2), np.diag([1.0, -1.0]))


def test_bmf_log_hand_values():
    eye = np.eye(2)
    # linear term only: tr(C^T R) with C = I, R = I
    assert Bmf(np.zeros((2, 2)), np.zeros((2, 2)), eye).log(eye[None])[0] == 2.0
    # quadratic term only: tr(B R^T A R) = tr(A) at R = I
    a = np.diag([0.7, -0.2])
    got = Bmf(a, eye, np.zeros((2, 2))).log(eye[None])[0]
    np.testing.assert_allclose(got, 0.5)


def test_bmf_grad_matrix_vs_finite_differences():
    rng = np.random.default_rng(1)
    dens = Bmf(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
               rng.normal(size=(2, 2)))
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    grad = dens.grad_matrix(rot[None])[0]
    h = 1e-6
    for i in range(2):
        for j in range(2):
            e = np.zeros((2, 2))
            e[i, j] = h
            fd = (dens.log((rot + e)[None])[0] - dens.log((rot - e)[None])[0]) / (2 * h)
            np.testing.assert_allclose(grad[i, j], fd, atol=1e-6)


def test_cdf_less_equal_hand_values():
    dens = CdfLessEqual(bound=1.0, margin=0.5)
    np.testing.assert_allclose(dens.log(np.array([[1.0]])), math.log(0.5), atol=1e-12)
    np.testing.assert_allclose(dens.log(np.array([[1.5]])), log_ndtr(-1.0), atol=1e-12)
    # sign=-1 encodes "value >= -bound"
    lower = CdfLessEqual(bound=1.0, margin=0.5, sign=-1)
    np.testing.assert_allclose(lower.log(np.array([[-1.0]])), math.log(0.5), atol=1e-12)
    np.testing.assert_allclose(lower.log(np.array([[-1.5]])), log_ndtr(-1.0), atol=1e-12)


def test_cdf_less_equal_far_tail_still_finite():
    dens = CdfLessEqual(bound=0.0, margin=0.05)
    val = dens.log(np.array([[3.0]]))  # 60 sigma out
    assert np.isfinite(val[0]) and val[0] < -1000
    assert np.isfinite(dens.grad(np.array([[3.0]]))[0, 0])


def test_cdf_grad_vs_finite_differences():
    dens = CdfLessEqual(bound=0.3, margin=0.2, sign=-1)
    h = 1e-6
    for t in (-0.5, 0.0, 0.3, 0.8):
        fd = (dens.log(np.array([[t + h]])) - dens.log(np.array([[t - h]]))) / (2 * h)
        np.testing.assert_allclose(dens.grad(np.array([[t]]))[0, 0], fd[0], atol=1e-5)


def test_cdf_validation():
    with pytest.raises(ValueError):
        CdfLessEqual(bound=0.0, margin=0.0)
    with pytest.raises(ValueError):
        CdfLessEqual(bound=0.0, margin=0.1, sign=2)


def test_uni_gauss_blends_branches():
    inner = Mvn(np.zeros(1), np.eye(1))
    dens = UniGauss(inner, task_prob=0.5, log_level=-3.0)
    v = np.array([[np.sqrt(2.0)]])  # inner log = -1
    expect = math.log(0.5 * math.exp(-1.0) + 0.5 * math.exp(-3.0))
    np.testing.assert_allclose(dens.log(v), expect, atol=1e-12)


def test_uni_gauss_pins():
    inner = Mvn(np.zeros(1), np.eye(1))
    on = UniGauss(inner, task_prob=0.3, log_level=-2.0, pin="on")
    off = UniGauss(inner, task_prob=0.3, log_level=-2.0, pin="off")
    v = np.array([[1.0], [2.0]])
    np.testing.assert_allclose(on.log(v), math.log(0.3) + inner.log(v), atol=1e-12)
    np.testing.assert_allclose(off.log(v), math.log(0.7) - 2.0, atol=1e-12)
    assert off.log(v).shape == (2,)
    np.testing.assert_array_equal(off.grad(v), 0.0)


def test_uni_gauss_anneal_widens_off_branch():
    inner = Mvn(np.zeros(1), np.eye(1))
    dens = UniGauss(inner, task_prob=0.5, log_level=-3.0)
    v = np.array([[np.sqrt(2.0)]])
    # anneal=1: off branch becomes log_level + inner/9
    expect = np.logaddexp(math.log(0.5) - 1.0, math.log(0.5) - 3.0 - 1.0 / 9.0)
    np.testing.assert_allclose(dens.log(v, anneal=1.0), expect, atol=1e-12)


def test_uni_gauss_validation():
    inner = Mvn(np.zeros(1), np.eye(1))
    with pytest.raises(ValueError):
        UniGauss(inner, task_prob=1.5, log_level=0.0)
    with pytest.raises(ValueError):
        UniGauss(inner, task_prob=0.5, log_level=0.0, pin="maybe")


# --- transformations ------------------------------------------------------

def test_joint_subset_and_coords():
    x = np.array([[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_array_equal(JointSubset((1,)).value(TWO_LINK, x), [[0.2], [0.4]])
    tip_y = FkPosition(1, coords=(1,)).value(TWO_LINK, x)
    full = FkPosition(1).value(TWO_LINK, x)
    np.testing.assert_allclose(tip_y, full[:, 1:2])


def test_relative_distances():
    trans = RelativeDistances(((1, (0.0, 0.0)), (0, (0.0, 2.0))))
    x = np.array([[np.pi / 2, -np.pi / 2]])
    # tips at (1,1) and (0,1): distances sqrt(2) to origin, 1 to (0,2)
    np.testing.assert_allclose(trans.value(TWO_LINK, x), [[np.sqrt(2.0), 1.0]],
                               atol=1e-12)


def test_ik_projected_lands_on_target():
    trans = IkProjected(np.array([1.2, 0.7]), steps=60, frame=1)
    x = np.array([[0.2, 0.4], [-0.5, 1.0]])
    np.testing.assert_allclose(trans.value(TWO_LINK, x),
                               np.tile([1.2, 0.7], (2, 1)), atol=1e-6)


# --- the product target ---------------------------------------------------

def _line_target(sigma=0.1):
    experts = [(FkPosition(1, coords=(1,)), Mvn(np.array([1.0]),
                                                np.array([[sigma]])))]
    for j in range(2):
        experts.append((JointSubset((j,)), CdfLessEqual(np.pi, 0.05, 1)))
        experts.append((JointSubset((j,)), CdfLessEqual(np.pi, 0.05, -1)))
    return PoeTarget(TWO_LINK, tuple(experts))


def test_poe_log_is_sum_of_expert_logs():
    target = _line_target()
    rng = np.random.default_rng(2)
    x = rng.uniform(-2.0, 2.0, size=(9, 2))
    logs = target.expert_logs(x)
    assert logs.shape == (9, 5)
    np.testing.assert_allclose(target.log_unnorm(x), logs.sum(axis=1), atol=1e-12)


def test_poe_grad_vs_finite_differences():
    target = _line_target()
    rng = np.random.default_rng(3)
    x = rng.uniform(-2.0, 2.0, size=(6, 2))
    grad = target.grad_log(x)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (target.log_unnorm(x + e[None]) - target.log_unnorm(x - e[None])) / (2 * h)
        np.testing.assert_allclose(grad[:, j], fd, atol=1e-5)


def test_poe_grad_all_transformations():
    chain = KinematicChain.planar((0.6, 0.5, 0.4), link_masses=(2.0, 1.0, 1.0))
    experts = (
        (FkPosition(2), Mvn(np.array([0.5, 0.5]), 0.3 * np.eye(2))),
        (FkOrientation(2), Bmf(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))),
        (CoM((0,)), CdfLessEqual(0.2, 0.1, 1)),
        (RelativeDistances(((2, (0.2, -0.1)),)), Mvn(np.array([0.7]),
                                                     np.array([[0.2]]))),
        (JointSubset((0, 1)), Mvn(np.zeros(2), np.eye(2))),
    )
    target = PoeTarget(chain, experts)
    rng = np.random.default_rng(4)
    x = rng.uniform(-1.5, 1.5, size=(4, 3))
    grad = target.grad_log(x)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (target.log_unnorm(x + e[None]) - target.log_unnorm(x - e[None])) / (2 * h)
        np.testing.assert_allclose(grad[:, j], fd, atol=1e-4)


def test_log_and_grad_agree_with_parts():
    target = _line_target()
    x = np.random.default_rng(5).uniform(-2, 2, size=(5, 2))
    logs, grad = target.log_and_grad(x)
    np.testing.assert_allclose(logs, target.log_unnorm(x), atol=1e-12)
    np.testing.assert_allclose(grad, target.grad_log(x), atol=1e-12)


def test_dim_and_expert_names():
    target = _line_target()
    assert target.dim == 2
    names = target.expert_names()
    assert len(names) == 5
    assert len(set(names)) == 5  # unique, indexable


def test_priority_projection_kills_primary_direction():
    experts = (
        (FkPosition(4), Mvn(np.array([1.0, 0.6]), 0.05 * np.eye(2))),
        (FkPosition(2), Mvn(np.array([0.0, 1.1]), 0.05 * np.eye(2))),
    )
    chain = KinematicChain.planar((0.4,) * 5)
    plain = PoeTarget(chain, experts)
    filtered = PoeTarget(chain, experts, priority=((0, 1),))
    primary_only = PoeTarget(chain, experts[:1])
    rng = np.random.default_rng(6)
    x = rng.uniform(-2.0, 2.0, size=(8, 5))
    # value is untouched, only the gradient is filtered
    np.testing.assert_allclose(filtered.log_unnorm(x), plain.log_unnorm(x), atol=1e-12)
    # what remains after the primary's own pull lies in the primary nullspace
    secondary_part = filtered.grad_log(x) - primary_only.grad_log(x)
    for b in range(8):
        jac = fk_jacobian(chain, x[b], 4)
        np.testing.assert_allclose(jac @ secondary_part[b], 0.0, atol=1e-10)
        proj = nullspace_projector(jac)
        np.testing.assert_allclose(jac @ proj, 0.0, atol=1e-12)


def test_priority_cycle_rejected():
    experts = (
        (FkPosition(1), Mvn(np.zeros(2), np.eye(2))),
        (FkPosition(0), Mvn(np.zeros(2), np.eye(2))),
    )
    with pytest.raises(ValueError):
        PoeTarget(TWO_LINK, experts, priority=((0, 1), (1, 0)))
    with pytest.raises(ValueError):
        PoeTarget(TWO_LINK, experts, priority=((0, 5),))


def test_conditional_target_shifts_expert():
    base = _line_target(sigma=0.05)
    cond = ConditionalPoeTarget(base, (Binding(0, "mean", np.array([[1.0]]),
                                               np.array([0.0])),), task_dim=1)
    y = np.array([0.7])
    shifted = cond.target_for(y)
    assert isinstance(shifted.experts[0][1], Mvn)
    np.testing.assert_allclose(shifted.experts[0][1].mean, [0.7])
    # other experts untouched
    assert shifted.experts[1][1] is base.experts[1][1]


def test_conditional_binding_validation():
    base = _line_target()
    with pytest.raises(ValueError):
        ConditionalPoeTarget(base, (Binding(99, "mean", np.array([[1.0]]),
                                            np.array([0.0])),), task_dim=1)


# --- task-combination ranking ----------------------------------------------

def test_rank_task_combinations_toy():
    """A droppable expert pulling far away: 'off' must win, and the ranked
    log masses must reproduce the pinned targets' true log normalizers."""
    inner = Mvn(np.array([2.5]), np.array([[0.05]]))  # conflicts with the prior
    experts = (
        (JointSubset((0,)), Mvn(np.zeros(1), np.array([[0.3]]))),
        (JointSubset((1,)), UniGauss(inner, task_prob=0.5, log_level=math.log(0.2))),
        (JointSubset((1,)), Mvn(np.zeros(1), np.array([[0.5]]))),
    )
    target = PoeTarget(TWO_LINK, experts)
    cfg = TrainConfig(steps=1500, learning_rate=0.02, seed=0,
                      allocation="uniform", entropy_weight=2.0,
                      entropy_weight_final=1.0)
    initial = init_mixture([-np.pi, -np.pi], [np.pi, np.pi], "gaussian", 4,
                           np.random.default_rng(0))
    ranked = rank_task_combinations(target, initial, cfg, mass_samples=4096)
    assert len(ranked) == 2
    assert ranked[0].log_mass >= ranked[1].log_mass
    assert ranked[0].assignment == (False,)  # off wins

    grid = GridSpec(np.array([-np.pi, -np.pi]), np.array([np.pi, np.pi]), 160)
    for combo in ranked:
        pin = "on" if combo.assignment[0] else "off"
        pinned = PoeTarget(TWO_LINK, (
            experts[0],
            (experts[1][0], UniGauss(inner, 0.5, math.log(0.2), pin=pin)),
            experts[2],
        ))
        _, log_c = normalize_on_grid(lambda pts: pinned.log_unnorm(pts), grid)
        # ELBO-based mass is a lower bound; a short fit sits a few nats under
        assert combo.log_mass <= log_c + 0.05
        assert combo.log_mass >= log_c - 3.0
