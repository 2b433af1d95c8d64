"""Stochastic variational fitting of mixtures to unnormalized targets.

The objective is the negative evidence lower bound

    L = sum_k pi_k E_{q_k}[ log q(x) - log p(x) ],

estimated with reparametrized draws: each component receives its own block
of standard-normal draws, mapped through the component's sample path, and
each term is weighted by pi_k over the component's draw count, which keeps
the estimator unbiased for any per-component allocation. Minimizing L in
this direction (mass-covering, zero-avoiding) penalizes q mass wherever the
target has none.

Gradients are exact pathwise derivatives of the estimator at fixed noise:
the sample paths are differentiated through the component parameters, the
mixture log density is differentiated both at fixed samples and through the
paths, and the softmax weights receive the allocation-weighting term plus
the responsibility term. The same holds for the conditional (task-gated)
family. Finite differences under common random numbers reproduce these
gradients to first order, which the test suite checks block by block.

Target log densities are clamped below at LOG_DENSITY_FLOOR before they
enter the objective; clamped samples contribute no target gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, softmax

from .families import (BananaComponent, GaussianComponent, MixtureParams, MoEParams,
                       banana_forward, banana_inverse)

LOG_DENSITY_FLOOR = -1e8
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by the unconditional and conditional fits."""

    samples_per_step: int = 64
    steps: int = 5000
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    allocation: str = "proportional"
    anneal_steps: int | None = None
    entropy_weight: float = 1.0
    entropy_weight_final: float | None = None
    task_samples_per_step: int = 16


@dataclass
class FitTrace:
    """Per-step objective value, gradient norm, and elapsed wall-clock seconds."""

    elbo: np.ndarray
    grad_norm: np.ndarray
    seconds: np.ndarray

    def to_csv(self, path) -> None:
        # seconds stay out of the file so fixed-seed runs are byte-reproducible
        with open(path, "w") as fh:
            fh.write("step,elbo,grad_norm\n")
            for i in range(self.elbo.shape[0]):
                fh.write(f"{i},{self.elbo[i]:.9g},{self.grad_norm[i]:.9g}\n")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_init(n: int) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; pure, returns (new params, new state)."""
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# parameter packing
#
# Mixtures pack as [weight logits | means | scales | curvatures]; scale
# factors pack their lower triangle row by row with the diagonal stored as
# its logarithm, so every packed vector is unconstrained.


def _pack_scale(scale):
    d = scale.shape[0]
    rows, cols = np.tril_indices(d)
    vals = scale[rows, cols].copy()
    diag = rows == cols
    vals[diag] = np.log(vals[diag])
    return vals


def _unpack_scale(vals, d):
    rows, cols = np.tril_indices(d)
    scale = np.zeros((d, d))
    scale[rows, cols] = vals
    idx = np.arange(d)
    scale[idx, idx] = np.exp(scale[idx, idx])
    return scale


def mixture_blocks(q: MixtureParams) -> dict:
    """Named slices of the packed parameter vector."""
    k, d = q.n_components, q.dim
    t = d * (d + 1) // 2
    blocks = {"logits": slice(0, k), "means": slice(k, k + k * d),
              "scales": slice(k + k * d, k + k * d + k * t)}
    if q.family == "banana":
        start = k + k * d + k * t
        blocks["curvatures"] = slice(start, start + k * (d - 1))
    return blocks


def pack_mixture(q: MixtureParams) -> np.ndarray:
    parts = [q.weight_logits]
    parts.extend(c.mean for c in q.components)
    parts.extend(_pack_scale(c.scale) for c in q.components)
    if q.family == "banana":
        parts.extend(c.curvature for c in q.components)
    return np.concatenate(parts)


def unpack_mixture(template: MixtureParams, vec) -> MixtureParams:
    k, d = template.n_components, template.dim
    t = d * (d + 1) // 2
    logits = vec[:k]
    means = vec[k:k + k * d].reshape(k, d)
    scales = vec[k + k * d:k + k * d + k * t].reshape(k, t)
    comps = []
    if template.family == "banana":
        curv = vec[k + k * d + k * t:].reshape(k, d - 1)
        for j, c in enumerate(template.components):
            comps.append(BananaComponent(means[j], _unpack_scale(scales[j], d), curv[j],
                                         axis=c.axis, rotation=c.rotation))
    else:
        for j in range(k):
            comps.append(GaussianComponent(means[j], _unpack_scale(scales[j], d)))
    return MixtureParams(tuple(comps), logits.copy())


def moe_blocks(p: MoEParams) -> dict:
    k, d, dy = p.n_components, p.dim, p.task_dim
    t = d * (d + 1) // 2
    gate = k * dy + k
    return {
        "gate": slice(0, gate),
        "maps": slice(gate, gate + k * d * dy),
        "offsets": slice(gate + k * d * dy, gate + k * d * dy + k * d),
        "scales": slice(gate + k * d * dy + k * d, gate + k * d * dy + k * d + k * t),
    }


def pack_moe(p: MoEParams) -> np.ndarray:
    parts = [p.gate_weights.ravel(), p.gate_offsets, p.maps.ravel(), p.offsets.ravel()]
    parts.extend(_pack_scale(p.scales[j]) for j in range(p.n_components))
    return np.concatenate(parts)


def unpack_moe(template: MoEParams, vec) -> MoEParams:
    k, d, dy = template.n_components, template.dim, template.task_dim
    t = d * (d + 1) // 2
    b = moe_blocks(template)
    gate = vec[b["gate"]]
    scales = vec[b["scales"]].reshape(k, t)
    return MoEParams(
        gate_weights=gate[:k * dy].reshape(k, dy),
        gate_offsets=gate[k * dy:].copy(),
        maps=vec[b["maps"]].reshape(k, d, dy),
        offsets=vec[b["offsets"]].reshape(k, d),
        scales=np.stack([_unpack_scale(scales[j], d) for j in range(k)]),
    )


# ---------------------------------------------------------------------------
# sampling and per-component density work


def _allocate(weights, total, rule):
    if rule == "proportional":
        return np.ceil(weights * total).astype(int)
    if rule == "uniform":
        return np.full(weights.shape[0], int(np.ceil(total / weights.shape[0])))
    raise ValueError(f"unknown allocation rule {rule!r}")


def _eta_counts(q, eta):
    """Explicit noise fixes the sample plan; sizes come from the blocks."""
    if len(eta) != q.n_components:
        raise ValueError(f"expected {q.n_components} noise blocks, got {len(eta)}")
    return np.array([np.asarray(e).shape[0] for e in eta], dtype=int)


def _draw_paths(q, counts, rng, eta):
    """Reparametrized draws per component.

    Returns (x (B, d), comp (B,), etas, bends) where bends holds the
    pre-curvature points of banana draws (None for Gaussian components).
    """
    if eta is None and rng is None:
        raise ValueError("provide either an rng or explicit noise blocks")
    xs, comps, etas, bends = [], [], [], []
    for k, comp in enumerate(q.components):
        e = eta[k] if eta is not None else rng.standard_normal((counts[k], q.dim))
        if e.shape != (counts[k], q.dim):
            raise ValueError(f"noise block {k} must have shape ({counts[k]}, {q.dim})")
        etas.append(e)
        if isinstance(comp, BananaComponent):
            z = comp.mean + e @ comp.scale.T
            w = z @ comp.rotation.T if comp.rotation is not None else z
            xs.append(banana_forward(comp, w))
            bends.append(w)
        else:
            xs.append(comp.sample(e))
            bends.append(None)
        comps.append(np.full(counts[k], k, dtype=int))
    return np.concatenate(xs), np.concatenate(comps), etas, bends


class _ComponentTerms:
    """Per-component Gaussian residual work at a fixed sample batch.

    For component j with base residual y = L^-1 (z(x) - mu):
    ll holds log densities, ys the residuals, alphas L^-T y, and score_x
    the gradient of the component log density at fixed parameters.
    """

    def __init__(self, q, x):
        b = x.shape[0]
        k, d = q.n_components, q.dim
        self.ll = np.empty((b, k))
        self.ys = []
        self.alphas = []
        self.score_x = []
        self.rot_alphas = []
        for j, comp in enumerate(q.components):
            banana = isinstance(comp, BananaComponent)
            if banana:
                z = banana_inverse(comp, x)
                if comp.rotation is not None:
                    z = z @ comp.rotation
            else:
                z = x
            y = solve_triangular(comp.scale, (z - comp.mean).T, lower=True).T
            alpha = solve_triangular(comp.scale.T, y.T, lower=False).T
            self.ll[:, j] = (-0.5 * np.sum(y * y, axis=1)
                             - np.sum(np.log(np.diag(comp.scale)))
                             - 0.5 * d * LOG_2PI)
            self.ys.append(y)
            self.alphas.append(alpha)
            if banana:
                ra = alpha @ comp.rotation.T if comp.rotation is not None else alpha
                self.rot_alphas.append(ra)
                off = [i for i in range(d) if i != comp.axis]
                score = -ra.copy()
                score[:, off] += 2.0 * comp.curvature[None, :] * x[:, off] * ra[:, comp.axis:comp.axis + 1]
                self.score_x.append(score)
            else:
                self.rot_alphas.append(alpha)
                self.score_x.append(-alpha)


def _target_log_and_grad(target, x, anneal, want_grad):
    if want_grad:
        if getattr(target, "supports_annealing", False):
            lp, gp = target.log_and_grad(x, anneal)
        else:
            lp, gp = target.log_and_grad(x)
    else:
        if getattr(target, "supports_annealing", False):
            lp = target.log_unnorm(x, anneal)
        else:
            lp = target.log_unnorm(x)
        gp = None
    lp = np.asarray(lp, dtype=float)
    if np.any(np.isnan(lp)):
        _raise_non_finite(target, x, np.isnan(lp))
    clamped = lp < LOG_DENSITY_FLOOR
    if np.any(clamped):
        lp = np.maximum(lp, LOG_DENSITY_FLOOR)
        if gp is not None:
            gp = np.where(clamped[:, None], 0.0, gp)
    return lp, gp


def _raise_non_finite(target, x, bad):
    detail = ""
    logs = getattr(target, "expert_logs", None)
    if logs is not None:
        per_expert = np.asarray(logs(x[bad][:1]))
        names = target.expert_names()
        culprits = [names[m] for m in range(per_expert.shape[1])
                    if not np.isfinite(per_expert[0, m])]
        if culprits:
            detail = f": {', '.join(culprits)}"
    raise ValueError(f"target log density is not finite{detail}")


def elbo_estimate(q: MixtureParams, target, n_samples: int, rng=None, eta=None,
                  anneal: float = 0.0, entropy_weight: float = 1.0,
                  allocation: str = "proportional") -> float:
    """Monte Carlo estimate of E_q[log q - log p], the quantity fit minimizes."""
    weights = q.weights()
    counts = _eta_counts(q, eta) if eta is not None else \
        _allocate(weights, n_samples, allocation)
    x, comp, _, _ = _draw_paths(q, counts, rng, eta)
    terms = _ComponentTerms(q, x)
    log_q = logsumexp(terms.ll + np.log(weights)[None, :], axis=1)
    lp, _ = _target_log_and_grad(target, x, anneal, want_grad=False)
    coef = weights[comp] / counts[comp]
    value = float(np.sum(coef * (entropy_weight * log_q - lp)))
    if not np.isfinite(value):
        raise ValueError("objective is not finite; variational scales may have collapsed")
    return value


def elbo_and_gradient(q: MixtureParams, target, n_samples: int, rng=None, eta=None,
                      anneal: float = 0.0, entropy_weight: float = 1.0,
                      allocation: str = "proportional"):
    """Objective estimate and its pathwise gradient in packed coordinates."""
    k, d = q.n_components, q.dim
    weights = q.weights()
    counts = _eta_counts(q, eta) if eta is not None else \
        _allocate(weights, n_samples, allocation)
    x, comp, etas, bends = _draw_paths(q, counts, rng, eta)
    b = x.shape[0]
    terms = _ComponentTerms(q, x)
    log_weights = np.log(weights)
    log_q = logsumexp(terms.ll + log_weights[None, :], axis=1)
    resp = softmax(terms.ll + log_weights[None, :], axis=1)
    lp, gp = _target_log_and_grad(target, x, anneal, want_grad=True)

    coef = weights[comp] / counts[comp]
    phi = entropy_weight * log_q - lp
    value = float(np.sum(coef * phi))
    if not np.isfinite(value):
        raise ValueError("objective is not finite; variational scales may have collapsed")

    # mixture score at the samples, then the downstream path gradient
    score = sum(resp[:, j:j + 1] * terms.score_x[j] for j in range(k))
    upstream = (entropy_weight * score - gp) * coef[:, None]

    grad_logits = np.empty(k)
    grad_means = np.zeros((k, d))
    grad_scales_mat = np.zeros((k, d, d))
    grad_diag_extra = np.zeros(k)
    banana = q.family == "banana"
    grad_curv = np.zeros((k, d - 1)) if banana and d > 1 else None

    comp_mean_phi = np.bincount(comp, weights=coef * phi, minlength=k) / weights
    # value = sum_k pi_k * comp_mean_phi[k]; reweighting term of the softmax
    grad_logits = weights * (comp_mean_phi - value)
    grad_logits += entropy_weight * (coef @ (resp - weights[None, :]))

    den_w = coef[:, None] * resp * entropy_weight
    for j, c in enumerate(q.components):
        # density terms: every sample sees component j through log q
        wj = den_w[:, j]
        grad_means[j] = wj @ terms.alphas[j]
        grad_scales_mat[j] = terms.alphas[j].T @ (wj[:, None] * terms.ys[j])
        grad_diag_extra[j] = -np.sum(wj)
        if banana:
            off = [i for i in range(d) if i != c.axis]
            grad_curv[j] = (wj * terms.rot_alphas[j][:, c.axis]) @ (x[:, off] ** 2)

        # path terms: only component j's own draws move with its parameters
        rows = comp == j
        u = upstream[rows]
        e = etas[j]
        if isinstance(c, BananaComponent):
            w = bends[j]
            off = [i for i in range(d) if i != c.axis]
            pulled = u.copy()
            pulled[:, off] += 2.0 * c.curvature[None, :] * w[:, off] * u[:, c.axis:c.axis + 1]
            if c.rotation is not None:
                pulled = pulled @ c.rotation
            grad_curv[j] += u[:, c.axis] @ (w[:, off] ** 2)
        else:
            pulled = u
        grad_means[j] += pulled.sum(axis=0)
        grad_scales_mat[j] += pulled.T @ e

    # lower-triangular packing with log-diagonal reparametrization
    rows_idx, cols_idx = np.tril_indices(d)
    diag_mask = rows_idx == cols_idx
    grad_scales = np.empty((k, rows_idx.shape[0]))
    for j, c in enumerate(q.components):
        vals = grad_scales_mat[j][rows_idx, cols_idx]
        vals[diag_mask] = vals[diag_mask] * np.diag(c.scale) + grad_diag_extra[j]
        grad_scales[j] = vals

    parts = [grad_logits, grad_means.ravel(), grad_scales.ravel()]
    if banana:
        parts.append(grad_curv.ravel())
    return value, np.concatenate(parts)


# ---------------------------------------------------------------------------
# conditional (task-gated) objective


def _moe_draw(p: MoEParams, ys, draws, rng, eta):
    n_y = ys.shape[0]
    k, d = p.n_components, p.dim
    if eta is None:
        if rng is None:
            raise ValueError("provide either an rng or explicit noise blocks")
        eta = rng.standard_normal((n_y, k, draws, d))
    elif eta.shape != (n_y, k, draws, d):
        raise ValueError(f"noise must have shape ({n_y}, {k}, {draws}, {d})")
    means = np.einsum("kdy,by->bkd", p.maps, ys) + p.offsets[None, :, :]
    x = means[:, :, None, :] + np.einsum("kde,bkne->bknd", p.scales, eta)
    return x, means, eta


def conditional_elbo_and_gradient(p: MoEParams, target, ys, draws_per_component: int = 1,
                                  rng=None, eta=None, anneal: float = 0.0,
                                  entropy_weight: float = 1.0):
    """Doubly stochastic objective for the task-conditioned mixture.

    ``ys`` is a fixed batch of task draws; every component contributes
    ``draws_per_component`` reparametrized samples per task, weighted by its
    gate probability, so the value is unbiased for
    E_y sum_k h_k(y) E_{q_k(.|y)}[log q(x|y) - log p(x|y)].
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n_y = ys.shape[0]
    k, d, dy = p.n_components, p.dim, p.task_dim
    x, means, eta = _moe_draw(p, ys, draws_per_component, rng, eta)
    gate = p.gate(ys)

    lp = np.empty((n_y, k, draws_per_component))
    gp = np.empty((n_y, k, draws_per_component, d))
    for iy in range(n_y):
        flat = x[iy].reshape(k * draws_per_component, d)
        if getattr(target, "supports_annealing", False):
            lpi, gpi = target.log_and_grad(flat, ys[iy], anneal)
        else:
            lpi, gpi = target.log_and_grad(flat, ys[iy])
        lpi = np.asarray(lpi, dtype=float)
        if np.any(np.isnan(lpi)):
            _raise_non_finite(target.target_for(ys[iy]) if hasattr(target, "target_for")
                              else target, flat, np.isnan(lpi))
        clamped = lpi < LOG_DENSITY_FLOOR
        lpi = np.maximum(lpi, LOG_DENSITY_FLOOR)
        gpi = np.where(clamped[:, None], 0.0, gpi)
        lp[iy] = lpi.reshape(k, draws_per_component)
        gp[iy] = gpi.reshape(k, draws_per_component, d)

    # log q(x | y) and responsibilities for every sample against every component
    resid = x[:, :, :, None, :] - means[:, None, None, :, :]
    ll = np.empty((n_y, k, draws_per_component, k))
    alphas = np.empty((n_y, k, draws_per_component, k, d))
    for j in range(k):
        r = resid[:, :, :, j, :].reshape(-1, d)
        y_res = solve_triangular(p.scales[j], r.T, lower=True).T
        alpha = solve_triangular(p.scales[j].T, y_res.T, lower=False).T
        ll[:, :, :, j] = (-0.5 * np.sum(y_res * y_res, axis=1)
                          - np.sum(np.log(np.diag(p.scales[j])))
                          - 0.5 * d * LOG_2PI).reshape(n_y, k, draws_per_component)
        alphas[:, :, :, j, :] = alpha.reshape(n_y, k, draws_per_component, d)
    log_gate = np.log(np.maximum(gate, 1e-300))
    log_q = logsumexp(ll + log_gate[:, None, None, :], axis=3)
    resp = softmax(ll + log_gate[:, None, None, :], axis=3)

    coef = gate[:, :, None] / (n_y * draws_per_component)
    phi = entropy_weight * log_q - lp
    value = float(np.sum(coef * phi))
    if not np.isfinite(value):
        raise ValueError("objective is not finite; variational scales may have collapsed")

    score = -np.einsum("bknj,bknjd->bknd", resp, alphas)
    upstream = (entropy_weight * score - gp) * coef[..., None]

    # gate block: reweighting plus responsibility terms per task draw
    mean_phi = phi.mean(axis=2)
    bbar = np.sum(gate * mean_phi, axis=1)
    dt = gate * (mean_phi - bbar[:, None]) / n_y
    dt += entropy_weight * np.sum(coef[..., None] * (resp - gate[:, None, None, :]), axis=(1, 2))
    grad_gate_w = dt.T @ ys
    grad_gate_b = dt.sum(axis=0)

    grad_maps = np.zeros((k, d, dy))
    grad_offsets = np.zeros((k, d))
    grad_scales_mat = np.zeros((k, d, d))
    grad_diag_extra = np.zeros(k)
    t_idx = np.tril_indices(d)
    diag_mask = t_idx[0] == t_idx[1]
    for j in range(k):
        wj = entropy_weight * coef * resp[:, :, :, j]
        wa = wj[..., None] * alphas[:, :, :, j, :]
        grad_offsets[j] = wa.sum(axis=(0, 1, 2))
        grad_maps[j] = np.einsum("bknd,by->dy", wa, ys)
        y_res = np.einsum("de,bkne->bknd", p.scales[j].T, alphas[:, :, :, j, :])
        grad_scales_mat[j] = np.einsum("bknd,bkne->de",
                                       wj[..., None] * alphas[:, :, :, j, :], y_res)
        grad_diag_extra[j] = -np.sum(wj)

        u = upstream[:, j, :, :]
        grad_offsets[j] += u.sum(axis=(0, 1))
        grad_maps[j] += np.einsum("bnd,by->dy", u, ys)
        grad_scales_mat[j] += np.einsum("bnd,bne->de", u, eta[:, j, :, :])

    grad_scales = np.empty((k, t_idx[0].shape[0]))
    for j in range(k):
        vals = grad_scales_mat[j][t_idx]
        vals[diag_mask] = vals[diag_mask] * np.diag(p.scales[j]) + grad_diag_extra[j]
        grad_scales[j] = vals

    grad = np.concatenate([grad_gate_w.ravel(), grad_gate_b, grad_maps.ravel(),
                           grad_offsets.ravel(), grad_scales.ravel()])
    return value, grad


def conditional_elbo_estimate(p: MoEParams, target, ys, draws_per_component: int = 1,
                              rng=None, eta=None, anneal: float = 0.0,
                              entropy_weight: float = 1.0) -> float:
    value, _ = conditional_elbo_and_gradient(p, target, ys, draws_per_component,
                                             rng, eta, anneal, entropy_weight)
    return value


# ---------------------------------------------------------------------------
# fit loops


def _entropy_weight(config, step):
    if config.entropy_weight_final is None or config.steps <= 1:
        return config.entropy_weight
    frac = step / (config.steps - 1)
    return config.entropy_weight + frac * (config.entropy_weight_final - config.entropy_weight)


def _anneal_strength(config, step):
    horizon = config.anneal_steps if config.anneal_steps is not None else config.steps // 2
    if horizon <= 0:
        return 0.0
    return max(0.0, 1.0 - step / horizon)


def fit(initial: MixtureParams, target, config: TrainConfig):
    """Minimize the objective with Adam; deterministic given config.seed.

    Returns (fitted mixture, FitTrace).
    """
    rng = np.random.default_rng(config.seed)
    params = pack_mixture(initial)
    state = adam_init(params.shape[0])
    elbo_hist = np.empty(config.steps)
    norm_hist = np.empty(config.steps)
    sec_hist = np.empty(config.steps)
    start = time.perf_counter()
    q = initial
    for step in range(config.steps):
        value, grad = elbo_and_gradient(
            q, target, config.samples_per_step, rng,
            anneal=_anneal_strength(config, step),
            entropy_weight=_entropy_weight(config, step),
            allocation=config.allocation)
        params, state = adam_step(params, grad, state, config)
        q = unpack_mixture(initial, params)
        elbo_hist[step] = value
        norm_hist[step] = np.linalg.norm(grad)
        sec_hist[step] = time.perf_counter() - start
    return q, FitTrace(elbo_hist, norm_hist, sec_hist)


def fit_conditional(initial: MoEParams, target, task_sampler, config: TrainConfig):
    """Doubly stochastic fit of the task-conditioned mixture.

    ``task_sampler(rng, n)`` must return an (n, task_dim) batch of task
    draws; each step uses config.task_samples_per_step of them with one
    reparametrized draw per component per task.
    """
    rng = np.random.default_rng(config.seed)
    params = pack_moe(initial)
    state = adam_init(params.shape[0])
    elbo_hist = np.empty(config.steps)
    norm_hist = np.empty(config.steps)
    sec_hist = np.empty(config.steps)
    start = time.perf_counter()
    p = initial
    for step in range(config.steps):
        ys = np.atleast_2d(task_sampler(rng, config.task_samples_per_step))
        value, grad = conditional_elbo_and_gradient(
            p, target, ys, rng=rng,
            anneal=_anneal_strength(config, step),
            entropy_weight=_entropy_weight(config, step))
        params, state = adam_step(params, grad, state, config)
        p = unpack_moe(initial, params)
        elbo_hist[step] = value
        norm_hist[step] = np.linalg.norm(grad)
        sec_hist[step] = time.perf_counter() - start
    return p, FitTrace(elbo_hist, norm_hist, sec_hist)
