"""Maximum-likelihood learning of expert parameters from demonstrations.

For a product target p(x) = prod_m p_m(T_m(x)) / C(theta), the gradient of
the average data log likelihood splits into a positive phase, the data
average of the unnormalized per-expert score, minus a negative phase, the
same score averaged under the model. The negative phase is estimated with
draws from a fitted variational mixture, optionally importance-reweighted by
p / q with self-normalized weights; the normalizer itself never needs to be
computed. Learning alternates gradient ascent on the expert parameters with
warm-started refits of the mixture.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, logsumexp, softmax

from . import elbo
from .elbo import TrainConfig, adam_init, adam_step
from .experts import CdfLessEqual, Mvn, PoeTarget
from .families import MixtureParams

DEGENERATE_ESS_FRACTION = 0.05

_LEARNABLE = {Mvn: ("mean", "scale"), CdfLessEqual: ("bound",)}


@dataclass(frozen=True)
class Dataset:
    """Demonstrated configurations, one per row."""

    configs: np.ndarray

    def __post_init__(self):
        configs = np.atleast_2d(np.asarray(self.configs, dtype=float))
        if configs.shape[0] == 0:
            raise ValueError("dataset is empty")
        object.__setattr__(self, "configs", configs)

    @property
    def size(self) -> int:
        return self.configs.shape[0]

    @property
    def dim(self) -> int:
        return self.configs.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(f"q{i}" for i in range(self.dim)) + "\n")
            for row in self.configs:
                fh.write(",".join(f"{v:.9g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(rows)


@dataclass(frozen=True)
class LearnConfig:
    """Outer-loop settings; ``inner`` controls the first variational fit."""

    masks: dict
    outer_iters: int = 40
    inner: TrainConfig = field(default_factory=TrainConfig)
    refit_steps: int = 200
    negative_samples: int = 256
    use_importance: bool = True
    theta_lr: float = 0.05
    seed: int = 0


@dataclass
class PoeGradient:
    """Per-parameter likelihood gradients plus proposal diagnostics."""

    grads: dict
    ess: float
    degenerate: bool


@dataclass
class LearnResult:
    target: PoeTarget
    proposal: MixtureParams
    log_likelihood: np.ndarray
    ess: np.ndarray


def _check_masks(target: PoeTarget, masks: dict):
    for idx, params in masks.items():
        if not 0 <= idx < len(target.experts):
            raise ValueError(f"mask names expert {idx}, target has {len(target.experts)}")
        density = target.experts[idx][1]
        allowed = _LEARNABLE.get(type(density))
        if allowed is None:
            raise ValueError(f"expert {idx} ({type(density).__name__}) has no "
                             "learnable parameters")
        for p in params:
            if p not in allowed:
                raise ValueError(f"expert {idx}: unknown learnable parameter {p!r}; "
                                 f"choose from {allowed}")


def _expert_scores(density, values, param):
    """Per-sample derivative of the unnormalized expert log density.

    Scale derivatives are in packed lower-triangular coordinates with the
    diagonal differentiated through its logarithm, matching the packing used
    for updates.
    """
    if isinstance(density, Mvn):
        resid = values - density.mean
        y = solve_triangular(density.scale, resid.T, lower=True).T
        alpha = solve_triangular(density.scale.T, y.T, lower=False).T
        if param == "mean":
            return alpha
        rows, cols = np.tril_indices(density.dim)
        scores = alpha[:, rows] * y[:, cols]
        diag = rows == cols
        scores[:, diag] *= np.diag(density.scale)[None, :]
        return scores
    if isinstance(density, CdfLessEqual):
        u = (density.bound - density.sign * values[:, 0]) / density.margin
        log_pdf = -0.5 * u * u - 0.5 * np.log(2.0 * np.pi)
        ratio = np.exp(log_pdf - log_ndtr(u))
        return (ratio / density.margin)[:, None]
    raise ValueError(f"no scores for {type(density).__name__}")


def _negative_weights(target: PoeTarget, q: MixtureParams, n: int, rng,
                      use_importance: bool):
    x, _ = q.sample_n(rng, n)
    if not use_importance:
        return x, np.full(n, 1.0 / n), float(n)
    log_w = target.log_unnorm(x) - q.logpdf(x)
    w = softmax(log_w)
    ess = 1.0 / float(np.sum(w * w))
    return x, w, ess


def poe_param_gradient(target: PoeTarget, dataset: Dataset, q: MixtureParams,
                       masks: dict, n_negative: int, rng,
                       use_importance: bool = True) -> PoeGradient:
    """Positive phase minus negative phase for every masked parameter."""
    _check_masks(target, masks)
    if dataset.dim != target.dim:
        raise ValueError(f"dataset dimension {dataset.dim} does not match "
                         f"target dimension {target.dim}")
    neg_x, neg_w, ess = _negative_weights(target, q, n_negative, rng, use_importance)
    degenerate = ess < DEGENERATE_ESS_FRACTION * n_negative
    if degenerate:
        warnings.warn("negative-phase proposal is nearly degenerate "
                      f"(ESS {ess:.1f} of {n_negative}); gradients may be biased",
                      RuntimeWarning)
    grads = {}
    for idx in sorted(masks):
        trans, density = target.experts[idx]
        pos_vals = trans.value(target.chain, dataset.configs)
        neg_vals = trans.value(target.chain, neg_x)
        for param in masks[idx]:
            pos = _expert_scores(density, pos_vals, param).mean(axis=0)
            neg = neg_w @ _expert_scores(density, neg_vals, param)
            grads[(idx, param)] = pos - neg
    return PoeGradient(grads, ess, degenerate)


def estimate_log_normalizer(target: PoeTarget, q: MixtureParams, n: int, rng) -> float:
    """Importance estimate log C = log mean p(x) / q(x) under x ~ q."""
    x, _ = q.sample_n(rng, n)
    log_w = target.log_unnorm(x) - q.logpdf(x)
    return float(logsumexp(log_w) - np.log(n))


def _pack_theta(target: PoeTarget, masks: dict):
    slots = []
    parts = []
    for idx in sorted(masks):
        density = target.experts[idx][1]
        for param in masks[idx]:
            if param == "mean":
                vec = density.mean
            elif param == "scale":
                vec = elbo._pack_scale(density.scale)
            else:
                vec = np.array([density.bound])
            slots.append((idx, param, vec.shape[0]))
            parts.append(vec)
    return slots, np.concatenate(parts)


def _apply_theta(target: PoeTarget, slots, theta) -> PoeTarget:
    experts = list(target.experts)
    offset = 0
    for idx, param, size in slots:
        vec = theta[offset:offset + size]
        offset += size
        trans, density = experts[idx]
        if param == "mean":
            density = replace(density, mean=vec.copy())
        elif param == "scale":
            density = replace(density, scale=elbo._unpack_scale(vec, density.dim))
        else:
            density = replace(density, bound=float(vec[0]))
        experts[idx] = (trans, density)
    return PoeTarget(target.chain, tuple(experts), target.priority)


def _grad_vector(slots, grads):
    return np.concatenate([grads[(idx, param)] for idx, param, _ in slots])


def learn_poe(target: PoeTarget, dataset: Dataset, initial_q: MixtureParams,
              config: LearnConfig) -> LearnResult:
    """Alternate expert-parameter ascent with warm-started variational refits.

    Per outer iteration: estimate the likelihood gradient with the current
    mixture as negative-phase proposal, take one Adam ascent step on the
    masked parameters, refit the mixture to the moved target, and record the
    estimated average data log likelihood. Masked-out parameters are never
    touched.
    """
    _check_masks(target, masks=config.masks)
    rng = np.random.default_rng(config.seed)
    slots, theta = _pack_theta(target, config.masks)
    state = adam_init(theta.shape[0])
    theta_cfg = replace(config.inner, learning_rate=config.theta_lr)
    q, _ = elbo.fit(initial_q, target, config.inner)
    loglik = np.empty(config.outer_iters)
    ess_hist = np.empty(config.outer_iters)
    for it in range(config.outer_iters):
        grad = poe_param_gradient(target, dataset, q, config.masks,
                                  config.negative_samples, rng,
                                  config.use_importance)
        ess_hist[it] = grad.ess
        theta, state = adam_step(theta, -_grad_vector(slots, grad.grads), state,
                                 theta_cfg)
        target = _apply_theta(target, slots, theta)
        refit = replace(config.inner, steps=config.refit_steps,
                        seed=int(rng.integers(2**62)))
        q, _ = elbo.fit(q, target, refit)
        log_c = estimate_log_normalizer(target, q, config.negative_samples, rng)
        loglik[it] = float(np.mean(target.log_unnorm(dataset.configs))) - log_c
    return LearnResult(target, q, loglik, ess_hist)
