"""Shipped scenario integrity, strict parse errors, deterministic initial
parameters, and task sampler behavior."""

import copy
import json

import numpy as np
import pytest

from cfgdist.families import MixtureParams, MoEParams
from cfgdist.scenarios import (ScenarioError, TaskSampler, load_shipped,
                               parse_scenario, scenario_to_dict,
                               shipped_scenarios)

EXPECTED_SHIPPED = {
    "line2dof_gva_k1",
    "line2dof_gaussian_k5", "line2dof_gaussian_k10", "line2dof_gaussian_k15",
    "line2dof_gaussian_k20",
    "line2dof_banana_k1", "line2dof_banana_k5", "line2dof_banana_k10",
    "line2dof_banana_k15", "line2dof_banana_k20",
    "arm7dof_gaussian_k1", "arm7dof_gaussian_k10", "arm7dof_gaussian_k100",
    "arm7dof_banana_k1", "arm7dof_banana_k10", "arm7dof_banana_k100",
    "bimanual5dof_nullspace_off", "bimanual5dof_nullspace_on",
    "planar_humanoid_unigauss_flat", "planar_humanoid_unigauss_hier",
    "cond2dof_moe",
    "learn2dof_fk_target",
}


def _doc():
    """Minimal valid scenario document, copied fresh per test."""
    return copy.deepcopy({
        "name": "toy",
        "chain": {"kind": "planar", "link_lengths": [1.0, 1.0],
                  "joint_limits": [[-3.0, 3.0], [-3.0, 3.0]]},
        "experts": [
            {"transformation": {"kind": "fk_position", "frame": 1, "coords": [1]},
             "density": {"kind": "mvn", "mean": [1.0], "std": [0.1]}},
        ],
        "family": {"kind": "gaussian", "components": 2},
    })


def test_shipped_set_and_round_trips():
    names = shipped_scenarios()
    assert set(names) == EXPECTED_SHIPPED
    assert names == sorted(names)
    for name in names:
        scenario = load_shipped(name)
        assert scenario.name == name
        doc = scenario_to_dict(scenario)
        again = scenario_to_dict(parse_scenario(json.loads(json.dumps(doc))))
        assert doc == again, name


def test_shipped_initial_params_match_family():
    for name in shipped_scenarios():
        scenario = load_shipped(name)
        params = scenario.initial_params()
        if scenario.conditional:
            assert isinstance(params, MoEParams)
            assert params.task_dim == scenario.sampler.dim
        else:
            assert isinstance(params, MixtureParams)
            assert params.family == scenario.family
        assert params.n_components == scenario.components
        # same seed, same start
        again = scenario.initial_params()
        if not scenario.conditional:
            for a, b in zip(params.components, again.components):
                np.testing.assert_array_equal(a.mean, b.mean)


def test_unknown_shipped_name():
    with pytest.raises(ScenarioError, match="unknown shipped scenario"):
        load_shipped("does_not_exist")


def test_missing_and_unknown_fields():
    doc = _doc()
    del doc["experts"]
    with pytest.raises(ScenarioError, match="missing field scenario.experts"):
        parse_scenario(doc)
    doc = _doc()
    doc["surprise"] = 1
    with pytest.raises(ScenarioError, match="unknown field scenario.surprise"):
        parse_scenario(doc)
    doc = _doc()
    doc["experts"][0]["density"].pop("mean")
    with pytest.raises(ScenarioError, match=r"missing field experts\[0\]"):
        parse_scenario(doc)


def test_bad_chain_and_frame():
    doc = _doc()
    doc["chain"]["kind"] = "hovercraft"
    with pytest.raises(ScenarioError, match="planar"):
        parse_scenario(doc)
    doc = _doc()
    doc["experts"][0]["transformation"]["frame"] = 7
    with pytest.raises(ScenarioError, match="frame"):
        parse_scenario(doc)


def test_scale_spec_is_exactly_one_of():
    doc = _doc()
    doc["experts"][0]["density"]["scale"] = [[0.1]]
    with pytest.raises(ScenarioError, match="exactly one of 'std' or 'scale'"):
        parse_scenario(doc)
    doc = _doc()
    del doc["experts"][0]["density"]["std"]
    with pytest.raises(ScenarioError, match="exactly one of 'std' or 'scale'"):
        parse_scenario(doc)


def test_unknown_kinds():
    doc = _doc()
    doc["experts"][0]["density"]["kind"] = "cauchy"
    with pytest.raises(ScenarioError, match="unknown density kind"):
        parse_scenario(doc)
    doc = _doc()
    doc["experts"][0]["transformation"]["kind"] = "teleport"
    with pytest.raises(ScenarioError, match="unknown transformation kind"):
        parse_scenario(doc)


def test_family_validation():
    doc = _doc()
    doc["family"]["kind"] = "cauchy"
    with pytest.raises(ScenarioError, match="gaussian.*banana"):
        parse_scenario(doc)
    doc = _doc()
    doc["family"]["components"] = 0
    with pytest.raises(ScenarioError, match="positive integer"):
        parse_scenario(doc)
    doc = _doc()
    doc["family"]["curve_axis"] = 5
    with pytest.raises(ScenarioError, match="curve_axis"):
        parse_scenario(doc)


def test_moe_requires_gaussian_family():
    doc = _doc()
    doc["family"] = {"kind": "banana", "components": 2}
    doc["moe"] = {
        "sampler": {"kind": "uniform", "lower": [0.5], "upper": [1.5]},
        "bindings": [{"expert": 0, "param": "mean", "weights": [[1.0]],
                      "offset": [0.0]}],
    }
    with pytest.raises(ScenarioError, match="gaussian"):
        parse_scenario(doc)
    doc["family"] = {"kind": "gaussian", "components": 2}
    doc["moe"]["sampler"]["kind"] = "zipf"
    with pytest.raises(ScenarioError, match="unknown sampler kind"):
        parse_scenario(doc)


def test_priority_and_grid_validation():
    doc = _doc()
    doc["priority"] = [[0]]
    with pytest.raises(ScenarioError, match="priority"):
        parse_scenario(doc)
    doc = _doc()
    doc["grid"] = {"lower": [-3.0, -3.0], "upper": [3.0, 3.0], "bins": 8}
    with pytest.raises(ScenarioError, match="invalid grid"):
        parse_scenario(doc)


def test_train_config_passthrough():
    doc = _doc()
    doc["train"] = {"steps": 123, "learning_rate": 0.02, "seed": 4}
    scenario = parse_scenario(doc)
    assert scenario.train.steps == 123
    assert scenario.train.learning_rate == 0.02
    assert scenario.train.seed == 4
    doc["train"]["momentum"] = 0.9
    with pytest.raises(ScenarioError, match="unknown field train.momentum"):
        parse_scenario(doc)


def test_learn_masks_collected():
    scenario = load_shipped("learn2dof_fk_target")
    assert scenario.masks == {0: ("mean",)}
    assert scenario.learn_options["outer_iters"] == 30


def test_task_sampler_behavior():
    uniform = TaskSampler("uniform", np.array([0.5]), np.array([1.5]))
    a = uniform(np.random.default_rng(0), 100)
    b = uniform(np.random.default_rng(0), 100)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (100, 1)
    assert np.all((a >= 0.5) & (a < 1.5))
    assert uniform.to_dict() == {"kind": "uniform", "lower": [0.5], "upper": [1.5]}

    gauss = TaskSampler("gaussian", np.array([1.0, -1.0]), np.array([0.1, 0.2]))
    draws = gauss(np.random.default_rng(1), 4000)
    np.testing.assert_allclose(draws.mean(axis=0), [1.0, -1.0], atol=0.02)
    assert gauss.to_dict()["std"] == [0.1, 0.2]

    point = TaskSampler("point", np.array([2.0]), None)
    np.testing.assert_array_equal(point(np.random.default_rng(2), 3),
                                  np.full((3, 1), 2.0))
    assert point.to_dict() == {"kind": "point", "value": [2.0]}
