"""Declarative experiment descriptions.

A scenario is one JSON document naming a kinematic chain, the experts whose
product defines the target density, the variational family used to fit it,
and optional training, grid, HMC, task-conditioning, and learning blocks.
Parsing is strict: unknown kinds and malformed blocks raise ScenarioError
with the offending field in the message. ``scenario_to_dict`` inverts the
parse up to semantic content, so parse -> serialize -> parse is stable.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np

from .chains import KinematicChain
from .elbo import TrainConfig
from .experts import (Bmf, Binding, CdfLessEqual, CoM, ConditionalPoeTarget,
                      FkOrientation, FkPosition, IkProjected, JointSubset, Mvn,
                      PoeTarget, RelativeDistances, UniGauss)
from .families import MixtureParams, MoEParams, init_mixture, init_moe
from .hmc import HmcConfig
from .metrics import GridSpec


class ScenarioError(ValueError):
    """Scenario document failed validation; the message names the field."""


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ScenarioError(f"missing field {path}.{key}")
    return doc[key]


def _array(doc, key, path, required=True, default=None):
    if key not in doc:
        if required:
            raise ScenarioError(f"missing field {path}.{key}")
        return default
    try:
        return np.asarray(doc[key], dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"field {path}.{key} is not numeric") from None


def _check_keys(doc: dict, allowed, path: str):
    for key in doc:
        if key not in allowed:
            raise ScenarioError(f"unknown field {path}.{key}")


def _parse_chain(doc: dict, path="chain") -> KinematicChain:
    kind = _require(doc, "kind", path)
    if kind == "planar":
        _check_keys(doc, {"kind", "link_lengths", "link_masses", "joint_limits"}, path)
        lengths = _array(doc, "link_lengths", path)
        masses = _array(doc, "link_masses", path, required=False)
        limits = _array(doc, "joint_limits", path)
        maker = KinematicChain.planar
    elif kind == "serial3d":
        _check_keys(doc, {"kind", "axes", "offsets", "link_masses", "joint_limits"}, path)
        axes = _array(doc, "axes", path)
        offsets = _array(doc, "offsets", path)
        masses = _array(doc, "link_masses", path, required=False)
        limits = _array(doc, "joint_limits", path)
        maker = None
    else:
        raise ScenarioError(f"field {path}.kind must be 'planar' or 'serial3d', "
                            f"got {kind!r}")
    if limits.ndim != 2 or limits.shape[1] != 2:
        raise ScenarioError(f"field {path}.joint_limits must be a list of "
                            "[lower, upper] pairs")
    try:
        if kind == "planar":
            return maker(lengths, link_masses=masses, joint_limits=limits)
        return KinematicChain.serial3d(axes, offsets, link_masses=masses,
                                       joint_limits=limits)
    except ValueError as err:
        raise ScenarioError(f"invalid {path}: {err}") from None


def _parse_transformation(doc: dict, chain: KinematicChain, path: str):
    kind = _require(doc, "kind", path)
    n = chain.joint_count

    def frame_of():
        frame = _require(doc, "frame", path)
        if not isinstance(frame, int) or not 0 <= frame < n:
            raise ScenarioError(f"field {path}.frame must be an integer in "
                                f"[0, {n - 1}], got {frame!r}")
        return frame

    def coords_of():
        coords = doc.get("coords")
        if coords is None:
            return None
        if not all(isinstance(c, int) and 0 <= c < chain.task_dim for c in coords):
            raise ScenarioError(f"field {path}.coords must index the "
                                f"{chain.task_dim}-dimensional task space")
        return tuple(coords)

    if kind == "fk_position":
        _check_keys(doc, {"kind", "frame", "coords"}, path)
        return FkPosition(frame_of(), coords_of())
    if kind == "fk_orientation":
        _check_keys(doc, {"kind", "frame"}, path)
        return FkOrientation(frame_of())
    if kind == "com":
        _check_keys(doc, {"kind", "coords"}, path)
        return CoM(coords_of())
    if kind == "joint_subset":
        _check_keys(doc, {"kind", "indices"}, path)
        indices = _require(doc, "indices", path)
        if not all(isinstance(i, int) and 0 <= i < n for i in indices):
            raise ScenarioError(f"field {path}.indices must be joint indices in "
                                f"[0, {n - 1}]")
        return JointSubset(tuple(indices))
    if kind == "relative_distances":
        _check_keys(doc, {"kind", "pairs"}, path)
        pairs = _require(doc, "pairs", path)
        for pair in pairs:
            if len(pair) != 2 or not all(isinstance(f, int) and 0 <= f < n for f in pair):
                raise ScenarioError(f"field {path}.pairs must hold [frame, frame] "
                                    f"pairs in [0, {n - 1}]")
        return RelativeDistances(tuple(tuple(p) for p in pairs))
    if kind == "ik_projected":
        _check_keys(doc, {"kind", "target", "steps", "frame"}, path)
        target = _array(doc, "target", path)
        steps = _require(doc, "steps", path)
        if not isinstance(steps, int) or steps < 0:
            raise ScenarioError(f"field {path}.steps must be a non-negative integer")
        return IkProjected(target, steps, frame_of())
    raise ScenarioError(f"unknown transformation kind {kind!r} at {path}.kind")


def _parse_scale(doc: dict, dim: int, path: str):
    """Either a diagonal 'std' vector or an explicit lower-triangular 'scale'."""
    if ("std" in doc) == ("scale" in doc):
        raise ScenarioError(f"{path} needs exactly one of 'std' or 'scale'")
    if "std" in doc:
        std = _array(doc, "std", path)
        if std.shape == ():
            std = np.full(dim, float(std))
        if std.shape != (dim,):
            raise ScenarioError(f"field {path}.std must have {dim} entries")
        return np.diag(std)
    scale = _array(doc, "scale", path)
    if scale.shape != (dim, dim):
        raise ScenarioError(f"field {path}.scale must be {dim}x{dim}")
    return scale


def _parse_mvn(doc: dict, path: str) -> Mvn:
    mean = _array(doc, "mean", path)
    if mean.ndim != 1:
        raise ScenarioError(f"field {path}.mean must be a vector")
    try:
        return Mvn(mean, _parse_scale(doc, mean.shape[0], path))
    except ValueError as err:
        raise ScenarioError(f"invalid {path}: {err}") from None


def _parse_density(doc: dict, path: str):
    kind = _require(doc, "kind", path)
    if kind == "mvn":
        _check_keys(doc, {"kind", "mean", "std", "scale"}, path)
        return _parse_mvn(doc, path)
    if kind == "bmf":
        _check_keys(doc, {"kind", "a", "b", "c"}, path)
        try:
            return Bmf(_array(doc, "a", path), _array(doc, "b", path),
                       _array(doc, "c", path))
        except ValueError as err:
            raise ScenarioError(f"invalid {path}: {err}") from None
    if kind == "cdf_less_equal":
        _check_keys(doc, {"kind", "bound", "margin", "sign"}, path)
        try:
            return CdfLessEqual(float(_require(doc, "bound", path)),
                                float(_require(doc, "margin", path)),
                                int(doc.get("sign", 1)))
        except ValueError as err:
            raise ScenarioError(f"invalid {path}: {err}") from None
    if kind == "uni_gauss":
        _check_keys(doc, {"kind", "task_prob", "log_level", "inner", "pin"}, path)
        inner_doc = _require(doc, "inner", path)
        _check_keys(inner_doc, {"mean", "std", "scale"}, f"{path}.inner")
        try:
            return UniGauss(_parse_mvn(inner_doc, f"{path}.inner"),
                            float(_require(doc, "task_prob", path)),
                            float(_require(doc, "log_level", path)),
                            doc.get("pin"))
        except ValueError as err:
            raise ScenarioError(f"invalid {path}: {err}") from None
    raise ScenarioError(f"unknown density kind {kind!r} at {path}.kind")


def _parse_sampler(doc: dict, path: str) -> "TaskSampler":
    kind = _require(doc, "kind", path)
    if kind == "uniform":
        _check_keys(doc, {"kind", "lower", "upper"}, path)
        lower = np.atleast_1d(_array(doc, "lower", path))
        upper = np.atleast_1d(_array(doc, "upper", path))
        if lower.shape != upper.shape or np.any(lower >= upper):
            raise ScenarioError(f"{path}: lower must lie strictly below upper")
        return TaskSampler("uniform", lower, upper)
    if kind == "gaussian":
        _check_keys(doc, {"kind", "mean", "std"}, path)
        mean = np.atleast_1d(_array(doc, "mean", path))
        std = np.atleast_1d(_array(doc, "std", path))
        if std.shape != mean.shape or np.any(std <= 0.0):
            raise ScenarioError(f"field {path}.std must be positive and match mean")
        return TaskSampler("gaussian", mean, std)
    if kind == "point":
        _check_keys(doc, {"kind", "value"}, path)
        return TaskSampler("point", np.atleast_1d(_array(doc, "value", path)), None)
    raise ScenarioError(f"unknown sampler kind {kind!r} at {path}.kind")


@dataclass(frozen=True)
class TaskSampler:
    """Task-parameter distribution; calling it draws a (count, dim) batch."""

    kind: str
    loc: np.ndarray
    spread: np.ndarray | None

    @property
    def dim(self) -> int:
        return self.loc.shape[0]

    def __call__(self, rng, count: int):
        if self.kind == "uniform":
            return rng.uniform(self.loc, self.spread, size=(count, self.dim))
        if self.kind == "gaussian":
            return self.loc + self.spread * rng.standard_normal((count, self.dim))
        return np.tile(self.loc, (count, 1))

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "lower": self.loc.tolist(),
                    "upper": self.spread.tolist()}
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": self.loc.tolist(),
                    "std": self.spread.tolist()}
        return {"kind": "point", "value": self.loc.tolist()}


_TRAIN_KEYS = {"samples_per_step", "steps", "learning_rate", "beta1", "beta2",
               "epsilon", "seed", "allocation", "anneal_steps", "entropy_weight",
               "entropy_weight_final", "task_samples_per_step"}
_HMC_KEYS = {"step_size", "leapfrog_steps", "samples", "burn_in", "mass_diag",
             "kernel_std", "seed"}
_LEARN_KEYS = {"outer_iters", "refit_steps", "negative_samples", "use_importance",
               "theta_lr", "seed"}


def _parse_config(doc: dict, keys, ctor, path: str):
    _check_keys(doc, keys, path)
    try:
        return ctor(**doc)
    except (TypeError, ValueError) as err:
        raise ScenarioError(f"invalid {path}: {err}") from None


@dataclass
class Scenario:
    """A parsed experiment: chain, product target, family, and run settings."""

    name: str
    chain: KinematicChain
    target: PoeTarget | ConditionalPoeTarget
    family: str
    components: int
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSpec | None = None
    hmc: HmcConfig | None = None
    sampler: TaskSampler | None = None
    masks: dict = field(default_factory=dict)
    learn_options: dict = field(default_factory=dict)
    out_dir: str | None = None
    curve_axis: int = 0
    scale_fraction: float = 0.25

    @property
    def conditional(self) -> bool:
        return isinstance(self.target, ConditionalPoeTarget)

    @property
    def base_target(self) -> PoeTarget:
        return self.target.base if self.conditional else self.target

    def initial_params(self):
        """Deterministic initial variational parameters for this scenario."""
        rng = np.random.default_rng(self.train.seed)
        limits = self.chain.joint_limits
        if self.conditional:
            return init_moe(limits[:, 0], limits[:, 1], self.target.task_dim,
                            self.components, rng, self.scale_fraction)
        return init_mixture(limits[:, 0], limits[:, 1], self.family,
                            self.components, rng, self.scale_fraction,
                            self.curve_axis)


_TOP_KEYS = {"name", "chain", "experts", "priority", "family", "train", "grid",
             "hmc", "moe", "learn", "out_dir"}


def parse_scenario(doc: dict) -> Scenario:
    _check_keys(doc, _TOP_KEYS, "scenario")
    name = _require(doc, "name", "scenario")
    chain = _parse_chain(_require(doc, "chain", "scenario"))

    expert_docs = _require(doc, "experts", "scenario")
    if not expert_docs:
        raise ScenarioError("field experts must name at least one expert")
    experts = []
    masks = {}
    for m, entry in enumerate(expert_docs):
        path = f"experts[{m}]"
        _check_keys(entry, {"transformation", "density", "learn"}, path)
        trans = _parse_transformation(_require(entry, "transformation", path),
                                      chain, f"{path}.transformation")
        dens = _parse_density(_require(entry, "density", path), f"{path}.density")
        experts.append((trans, dens))
        if "learn" in entry:
            masks[m] = tuple(entry["learn"])

    priority = tuple(tuple(p) for p in doc.get("priority", ()))
    for pair in priority:
        if len(pair) != 2:
            raise ScenarioError("field priority must hold [primary, secondary] pairs")
    try:
        target = PoeTarget(chain, tuple(experts), priority)
    except ValueError as err:
        raise ScenarioError(f"invalid experts/priority: {err}") from None

    fam_doc = _require(doc, "family", "scenario")
    _check_keys(fam_doc, {"kind", "components", "curve_axis", "scale_fraction"},
                "family")
    family = _require(fam_doc, "kind", "family")
    if family not in ("gaussian", "banana"):
        raise ScenarioError(f"field family.kind must be 'gaussian' or 'banana', "
                            f"got {family!r}")
    components = _require(fam_doc, "components", "family")
    if not isinstance(components, int) or components < 1:
        raise ScenarioError("field family.components must be a positive integer")
    curve_axis = fam_doc.get("curve_axis", 0)
    if not 0 <= curve_axis < chain.joint_count:
        raise ScenarioError(f"field family.curve_axis out of range for "
                            f"{chain.joint_count} joints")
    scale_fraction = float(fam_doc.get("scale_fraction", 0.25))

    train = _parse_config(doc.get("train", {}), _TRAIN_KEYS, TrainConfig, "train")
    hmc = None
    if "hmc" in doc:
        hmc = _parse_config(doc["hmc"], _HMC_KEYS, HmcConfig, "hmc")
    grid = None
    if "grid" in doc:
        grid_doc = doc["grid"]
        _check_keys(grid_doc, {"lower", "upper", "bins"}, "grid")
        try:
            grid = GridSpec(_array(grid_doc, "lower", "grid"),
                            _array(grid_doc, "upper", "grid"),
                            _require(grid_doc, "bins", "grid"))
        except ValueError as err:
            raise ScenarioError(f"invalid grid: {err}") from None

    sampler = None
    if "moe" in doc:
        moe_doc = doc["moe"]
        _check_keys(moe_doc, {"sampler", "bindings"}, "moe")
        if family != "gaussian":
            raise ScenarioError("field family.kind must be 'gaussian' when a "
                                "moe block is present")
        sampler = _parse_sampler(_require(moe_doc, "sampler", "moe"), "moe.sampler")
        bindings = []
        for i, b_doc in enumerate(_require(moe_doc, "bindings", "moe")):
            path = f"moe.bindings[{i}]"
            _check_keys(b_doc, {"expert", "param", "weights", "offset"}, path)
            bindings.append(Binding(_require(b_doc, "expert", path),
                                    _require(b_doc, "param", path),
                                    _array(b_doc, "weights", path),
                                    _array(b_doc, "offset", path)))
        try:
            target = ConditionalPoeTarget(target, tuple(bindings), sampler.dim)
        except ValueError as err:
            raise ScenarioError(f"invalid moe.bindings: {err}") from None

    learn_options = {}
    if "learn" in doc:
        _check_keys(doc["learn"], _LEARN_KEYS, "learn")
        learn_options = dict(doc["learn"])

    return Scenario(name=name, chain=chain, target=target, family=family,
                    components=components, train=train, grid=grid, hmc=hmc,
                    sampler=sampler, masks=masks, learn_options=learn_options,
                    out_dir=doc.get("out_dir"), curve_axis=curve_axis,
                    scale_fraction=scale_fraction)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return parse_scenario(json.load(fh))


def _chain_to_dict(chain: KinematicChain) -> dict:
    doc = {"kind": chain.kind, "joint_limits": chain.joint_limits.tolist(),
           "link_masses": chain.link_masses.tolist()}
    if chain.kind == "planar":
        doc["link_lengths"] = chain.link_lengths.tolist()
    else:
        doc["axes"] = chain.axes.tolist()
        doc["offsets"] = chain.offsets.tolist()
    return doc


def _transformation_to_dict(trans) -> dict:
    if isinstance(trans, FkPosition):
        doc = {"kind": "fk_position", "frame": trans.frame}
        if trans.coords is not None:
            doc["coords"] = list(trans.coords)
        return doc
    if isinstance(trans, FkOrientation):
        return {"kind": "fk_orientation", "frame": trans.frame}
    if isinstance(trans, CoM):
        doc = {"kind": "com"}
        if trans.coords is not None:
            doc["coords"] = list(trans.coords)
        return doc
    if isinstance(trans, JointSubset):
        return {"kind": "joint_subset", "indices": list(trans.indices)}
    if isinstance(trans, RelativeDistances):
        return {"kind": "relative_distances", "pairs": [list(p) for p in trans.pairs]}
    return {"kind": "ik_projected", "target": trans.target.tolist(),
            "steps": trans.steps, "frame": trans.frame}


def _density_to_dict(dens) -> dict:
    if isinstance(dens, Mvn):
        return {"kind": "mvn", "mean": dens.mean.tolist(),
                "scale": dens.scale.tolist()}
    if isinstance(dens, Bmf):
        return {"kind": "bmf", "a": dens.a.tolist(), "b": dens.b.tolist(),
                "c": dens.c.tolist()}
    if isinstance(dens, CdfLessEqual):
        return {"kind": "cdf_less_equal", "bound": dens.bound,
                "margin": dens.margin, "sign": dens.sign}
    doc = {"kind": "uni_gauss", "task_prob": dens.task_prob,
           "log_level": dens.log_level,
           "inner": {"mean": dens.inner.mean.tolist(),
                     "scale": dens.inner.scale.tolist()}}
    if dens.pin is not None:
        doc["pin"] = dens.pin
    return doc


def _config_to_dict(config, defaults) -> dict:
    doc = {}
    for key in sorted(vars(defaults)):
        value = getattr(config, key)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        default = getattr(defaults, key)
        if isinstance(default, np.ndarray):
            default = default.tolist()
        if value != default:
            doc[key] = value
    return doc


def scenario_to_dict(scenario: Scenario) -> dict:
    """Rebuild the JSON document; inverse of parse_scenario up to formatting."""
    base = scenario.base_target
    experts = []
    for m, (trans, dens) in enumerate(base.experts):
        entry = {"transformation": _transformation_to_dict(trans),
                 "density": _density_to_dict(dens)}
        if m in scenario.masks:
            entry["learn"] = list(scenario.masks[m])
        experts.append(entry)
    fam = {"kind": scenario.family, "components": scenario.components}
    if scenario.curve_axis != 0:
        fam["curve_axis"] = scenario.curve_axis
    if scenario.scale_fraction != 0.25:
        fam["scale_fraction"] = scenario.scale_fraction
    doc = {"name": scenario.name, "chain": _chain_to_dict(scenario.chain),
           "experts": experts, "family": fam,
           "train": _config_to_dict(scenario.train, TrainConfig())}
    if base.priority:
        doc["priority"] = [list(p) for p in base.priority]
    if scenario.grid is not None:
        doc["grid"] = {"lower": scenario.grid.lower.tolist(),
                       "upper": scenario.grid.upper.tolist(),
                       "bins": int(scenario.grid.bins[0])}
    if scenario.hmc is not None:
        doc["hmc"] = _config_to_dict(scenario.hmc, HmcConfig())
    if scenario.conditional:
        doc["moe"] = {"sampler": scenario.sampler.to_dict(),
                      "bindings": [{"expert": b.expert, "param": b.param,
                                    "weights": b.weights.tolist(),
                                    "offset": b.offset.tolist()}
                                   for b in scenario.target.bindings]}
    if scenario.learn_options:
        doc["learn"] = dict(scenario.learn_options)
    if scenario.out_dir is not None:
        doc["out_dir"] = scenario.out_dir
    return doc


def shipped_scenarios() -> list:
    """Names of the scenario files installed with the package."""
    root = importlib.resources.files("cfgdist") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_shipped(name: str) -> Scenario:
    root = importlib.resources.files("cfgdist") / "scenarios"
    path = root / f"{name}.json"
    if not path.is_file():
        raise ScenarioError(f"unknown shipped scenario {name!r}; "
                            f"available: {', '.join(shipped_scenarios())}")
    return parse_scenario(json.loads(path.read_text()))
