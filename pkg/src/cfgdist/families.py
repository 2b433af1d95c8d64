"""Variational families over configuration space.

Full-covariance Gaussian components, banana components (a Gaussian pushed
through a curvature map with unit Jacobian determinant, so densities stay
closed form), finite mixtures of either, and a conditional mixture whose
component weights and means are affine in a task parameter.

Scale matrices are lower triangular with positive diagonal throughout;
``LL^T`` is the covariance. Batched arguments follow the ``(B, d)``
convention used across the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, softmax

LOG_2PI = float(np.log(2.0 * np.pi))


class UnsupportedFamilyError(ValueError):
    """Raised when closed-form Gaussian algebra is asked of a non-Gaussian family."""


def _check_scale(scale, d, what="scale"):
    scale = np.asarray(scale, dtype=float)
    if scale.shape != (d, d):
        raise ValueError(f"{what} must have shape ({d}, {d}), got {scale.shape}")
    if np.any(np.triu(scale, 1) != 0.0):
        raise ValueError(f"{what} must be lower triangular")
    if np.any(np.diag(scale) <= 0.0):
        raise ValueError(f"{what} must have a positive diagonal")
    return scale


def _gauss_logpdf(resid, scale):
    """log N(resid; 0, scale scale^T) for resid (B, d)."""
    y = solve_triangular(scale, resid.T, lower=True).T
    half_logdet = np.sum(np.log(np.diag(scale)))
    return -0.5 * np.sum(y * y, axis=1) - half_logdet - 0.5 * resid.shape[1] * LOG_2PI


@dataclass(frozen=True)
class GaussianComponent:
    """Full-covariance Gaussian, mean and lower-triangular scale factor."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", _check_scale(self.scale, mean.shape[0]))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, eta):
        """Reparametrized draw mean + scale @ eta for eta (B, d) or (d,)."""
        eta = np.asarray(eta, dtype=float)
        return self.mean + eta @ self.scale.T

    def logpdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = _gauss_logpdf(x - self.mean, self.scale)
        return out[0] if np.asarray(x).ndim == 1 else out

    def logpdf_grad(self, x):
        """d log N / dx, batched."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = solve_triangular(self.scale, (x - self.mean).T, lower=True)
        return -solve_triangular(self.scale.T, y, lower=False).T


def banana_forward(comp: "BananaComponent", z):
    """Curvature map: adds sum_i k_i z_i^2 (off-axis coordinates) to the axis one.

    Triangular with unit diagonal, so the Jacobian determinant is one and
    pushforward densities need no volume correction.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    off = [i for i in range(z.shape[1]) if i != comp.axis]
    out = z.copy()
    out[:, comp.axis] += np.sum(comp.curvature[None, :] * z[:, off] ** 2, axis=1)
    return out[0] if single else out


def banana_inverse(comp: "BananaComponent", x):
    """Exact inverse of :func:`banana_forward`."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    off = [i for i in range(x.shape[1]) if i != comp.axis]
    out = x.copy()
    out[:, comp.axis] -= np.sum(comp.curvature[None, :] * x[:, off] ** 2, axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class BananaComponent:
    """Gaussian pushed through the curvature map, optionally after a fixed rotation.

    Sampling: x = forward(rotation @ (mean + scale @ eta)). The density is the
    base Gaussian evaluated at rotation^T inverse(x); both maps have unit
    absolute Jacobian determinant. The rotation is a fixed modelling choice,
    not a fitted parameter.
    """

    mean: np.ndarray
    scale: np.ndarray
    curvature: np.ndarray
    axis: int = 0
    rotation: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        d = mean.shape[0]
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", _check_scale(self.scale, d))
        curvature = np.asarray(self.curvature, dtype=float)
        if curvature.shape != (d - 1,):
            raise ValueError(f"curvature must have shape ({d - 1},), got {curvature.shape}")
        object.__setattr__(self, "curvature", curvature)
        if not 0 <= self.axis < d:
            raise ValueError(f"axis {self.axis} out of range for dimension {d}")
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=float)
            if rot.shape != (d, d) or not np.allclose(rot @ rot.T, np.eye(d), atol=1e-9):
                raise ValueError("rotation must be orthonormal")
            object.__setattr__(self, "rotation", rot)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, eta):
        eta = np.asarray(eta, dtype=float)
        z = self.mean + eta @ self.scale.T
        if self.rotation is not None:
            z = z @ self.rotation.T
        return banana_forward(self, z)

    def logpdf(self, x):
        single = np.asarray(x).ndim == 1
        z = np.atleast_2d(banana_inverse(self, x))
        if self.rotation is not None:
            z = z @ self.rotation
        out = _gauss_logpdf(z - self.mean, self.scale)
        return out[0] if single else out

    def logpdf_grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = banana_inverse(self, x)
        if self.rotation is not None:
            z = z @ self.rotation
        y = solve_triangular(self.scale, (z - self.mean).T, lower=True)
        gz = -solve_triangular(self.scale.T, y, lower=False).T
        if self.rotation is not None:
            gz = gz @ self.rotation.T
        # chain through the inverse map: axis row feeds back into off-axis coords
        out = gz.copy()
        off = [i for i in range(x.shape[1]) if i != self.axis]
        out[:, off] += gz[:, self.axis, None] * (-2.0 * self.curvature[None, :] * x[:, off])
        return out


Component = GaussianComponent | BananaComponent


@dataclass(frozen=True)
class MixtureParams:
    """Finite mixture with softmax-parametrized weights."""

    components: tuple
    weight_logits: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        kinds = {type(c) for c in comps}
        if len(kinds) > 1:
            raise ValueError("mixture components must share one family")
        dims = {c.dim for c in comps}
        if len(dims) > 1:
            raise ValueError("mixture components must share one dimension")
        logits = np.asarray(self.weight_logits, dtype=float)
        if logits.shape != (len(comps),):
            raise ValueError(f"weight_logits must have shape ({len(comps)},), got {logits.shape}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weight_logits", logits)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def family(self) -> str:
        return "banana" if isinstance(self.components[0], BananaComponent) else "gaussian"

    def weights(self):
        return softmax(self.weight_logits)

    def component_logpdfs(self, x):
        """Per-component log densities, (B, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([c.logpdf(x) for c in self.components], axis=1)

    def logpdf(self, x):
        single = np.asarray(x).ndim == 1
        ll = self.component_logpdfs(x)
        out = logsumexp(ll + np.log(self.weights())[None, :], axis=1)
        return out[0] if single else out

    def logpdf_grad(self, x):
        """Score function of the mixture density, (B, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ll = self.component_logpdfs(x) + np.log(self.weights())[None, :]
        resp = softmax(ll, axis=1)
        grads = np.stack([c.logpdf_grad(x) for c in self.components], axis=1)
        return np.einsum("bk,bkd->bd", resp, grads)

    def sample(self, rng):
        """One draw; returns (x, component index)."""
        k = int(rng.choice(self.n_components, p=self.weights()))
        eta = rng.standard_normal(self.dim)
        return self.components[k].sample(eta), k

    def sample_n(self, rng, count: int):
        """Vectorized draws; returns (X (count, d), indices (count,))."""
        ks = rng.choice(self.n_components, size=count, p=self.weights())
        eta = rng.standard_normal((count, self.dim))
        x = np.empty((count, self.dim))
        for k in range(self.n_components):
            mask = ks == k
            if np.any(mask):
                x[mask] = self.components[k].sample(eta[mask])
        return x, ks

    def to_dict(self) -> dict:
        doc = {
            "family": self.family,
            "dim": self.dim,
            "components": self.n_components,
            "weight_logits": self.weight_logits.tolist(),
            "means": [c.mean.tolist() for c in self.components],
            "scales": [c.scale.tolist() for c in self.components],
        }
        if self.family == "banana":
            doc["curvatures"] = [c.curvature.tolist() for c in self.components]
            doc["curve_axis"] = self.components[0].axis
            rotations = [c.rotation.tolist() if c.rotation is not None else None
                         for c in self.components]
            if any(r is not None for r in rotations):
                doc["rotations"] = rotations
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureParams":
        family = doc["family"]
        means = doc["means"]
        scales = doc["scales"]
        if family == "gaussian":
            comps = tuple(GaussianComponent(m, s) for m, s in zip(means, scales))
        elif family == "banana":
            rotations = doc.get("rotations") or [None] * len(means)
            axis = int(doc.get("curve_axis", 0))
            comps = tuple(
                BananaComponent(m, s, k, axis=axis, rotation=r)
                for m, s, k, r in zip(means, scales, doc["curvatures"], rotations)
            )
        else:
            raise ValueError(f"unknown mixture family {family!r}")
        return cls(comps, np.asarray(doc["weight_logits"], dtype=float))


@dataclass(frozen=True)
class MoEParams:
    """Conditional mixture: softmax-linear gate, affine component means.

    Gate logit k is gate_weights[k] . y + gate_offsets[k]; component k draws
    x = maps[k] @ y + offsets[k] + scales[k] @ eta.
    """

    gate_weights: np.ndarray
    gate_offsets: np.ndarray
    maps: np.ndarray
    offsets: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        gw = np.asarray(self.gate_weights, dtype=float)
        go = np.asarray(self.gate_offsets, dtype=float)
        w = np.asarray(self.maps, dtype=float)
        c = np.asarray(self.offsets, dtype=float)
        s = np.asarray(self.scales, dtype=float)
        k, dy = gw.shape
        d = c.shape[1]
        if go.shape != (k,):
            raise ValueError(f"gate_offsets must have shape ({k},), got {go.shape}")
        if w.shape != (k, d, dy):
            raise ValueError(f"maps must have shape ({k}, {d}, {dy}), got {w.shape}")
        if c.shape != (k, d):
            raise ValueError(f"offsets must have shape ({k}, {d}), got {c.shape}")
        if s.shape != (k, d, d):
            raise ValueError(f"scales must have shape ({k}, {d}, {d}), got {s.shape}")
        for i in range(k):
            _check_scale(s[i], d, what=f"scales[{i}]")
        for name, arr in (("gate_weights", gw), ("gate_offsets", go), ("maps", w),
                          ("offsets", c), ("scales", s)):
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.gate_weights.shape[0]

    @property
    def task_dim(self) -> int:
        return self.gate_weights.shape[1]

    @property
    def dim(self) -> int:
        return self.offsets.shape[1]

    def gate(self, y):
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        y = np.atleast_2d(y)
        logits = y @ self.gate_weights.T + self.gate_offsets[None, :]
        out = softmax(logits, axis=1)
        return out[0] if single else out

    def component_means(self, y):
        """Means of all components at task y, (K, d)."""
        y = np.asarray(y, dtype=float)
        return np.einsum("kdy,y->kd", self.maps, y) + self.offsets

    def conditional(self, y) -> MixtureParams:
        """The mixture q(x | y) as explicit mixture parameters."""
        means = self.component_means(y)
        comps = tuple(GaussianComponent(means[k], self.scales[k])
                      for k in range(self.n_components))
        return MixtureParams(comps, np.log(np.maximum(self.gate(y), 1e-300)))

    def sample(self, y, rng):
        """One conditional draw; returns (x, component index)."""
        h = self.gate(y)
        k = int(rng.choice(self.n_components, p=h))
        eta = rng.standard_normal(self.dim)
        x = self.component_means(np.asarray(y, dtype=float))[k] + self.scales[k] @ eta
        return x, k

    def logpdf(self, y, x):
        return self.conditional(y).logpdf(x)

    def to_dict(self) -> dict:
        return {
            "family": "moe",
            "dim": self.dim,
            "task_dim": self.task_dim,
            "components": self.n_components,
            "gate_weights": self.gate_weights.tolist(),
            "gate_offsets": self.gate_offsets.tolist(),
            "maps": self.maps.tolist(),
            "offsets": self.offsets.tolist(),
            "scales": self.scales.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MoEParams":
        return cls(doc["gate_weights"], doc["gate_offsets"], doc["maps"],
                   doc["offsets"], doc["scales"])


def params_to_json(params, path) -> None:
    """Serialize mixture or conditional-mixture parameters; stable key order."""
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def params_from_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("family") == "moe":
        return MoEParams.from_dict(doc)
    return MixtureParams.from_dict(doc)


def init_mixture(lower, upper, family: str, n_components: int, rng,
                 scale_fraction: float = 0.25, curve_axis: int = 0) -> MixtureParams:
    """Spread component means uniformly inside a box; diagonal initial scales.

    Initial standard deviations are ``scale_fraction`` of each box extent,
    curvatures start at zero, and weights start uniform.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.shape[0]
    if n_components < 1:
        raise ValueError("n_components must be at least 1")
    if family not in ("gaussian", "banana"):
        raise ValueError(f"unknown mixture family {family!r}")
    scale = np.diag(scale_fraction * (upper - lower))
    comps = []
    for _ in range(n_components):
        mean = rng.uniform(lower, upper)
        if family == "gaussian":
            comps.append(GaussianComponent(mean, scale))
        else:
            comps.append(BananaComponent(mean, scale, np.zeros(d - 1), axis=curve_axis))
    return MixtureParams(tuple(comps), np.zeros(n_components))


def init_moe(lower, upper, task_dim: int, n_components: int, rng,
             scale_fraction: float = 0.25) -> MoEParams:
    """Zero gate and zero task maps; offsets spread uniformly inside the box."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = lower.shape[0]
    if n_components < 1:
        raise ValueError("n_components must be at least 1")
    scale = np.diag(scale_fraction * (upper - lower))
    return MoEParams(
        gate_weights=np.zeros((n_components, task_dim)),
        gate_offsets=np.zeros(n_components),
        maps=np.zeros((n_components, d, task_dim)),
        offsets=np.stack([rng.uniform(lower, upper) for _ in range(n_components)]),
        scales=np.tile(scale, (n_components, 1, 1)),
    )
