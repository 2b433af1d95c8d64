"""Hamiltonian Monte Carlo baseline sampler.

Standard HMC with a leapfrog integrator and Metropolis correction. The
momentum proposal is N(0, kernel_std^2 * diag(mass)); trajectories that
leave the support or produce non-finite energies count as rejected rather
than aborting the chain. Runs are sequential and deterministic given the
seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.05
    leapfrog_steps: int = 20
    samples: int = 1000
    burn_in: int = 100
    mass_diag: np.ndarray | None = None
    kernel_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.leapfrog_steps < 1:
            raise ValueError(f"leapfrog_steps must be at least 1, got {self.leapfrog_steps}")
        if self.samples < 1 or self.burn_in < 0:
            raise ValueError("samples must be positive and burn_in non-negative")
        if self.kernel_std <= 0.0:
            raise ValueError(f"kernel_std must be positive, got {self.kernel_std}")
        if self.mass_diag is not None:
            mass = np.asarray(self.mass_diag, dtype=float)
            if np.any(mass <= 0.0):
                raise ValueError("mass_diag entries must be positive")
            object.__setattr__(self, "mass_diag", mass)


@dataclass
class HmcResult:
    samples: np.ndarray
    acceptance_rate: float
    accepted: np.ndarray
    log_accept_prob: np.ndarray
    uniforms: np.ndarray
    runtime_s: float


def leapfrog(x, p, grad_log_density, step_size: float, n_steps: int, inv_mass):
    """Integrate Hamiltonian dynamics for the potential -log density.

    Returns (x, p, diverged); diverged flags non-finite states, which the
    caller treats as a rejection. The integrator is time reversible:
    negating the final momentum and integrating again returns to the start.
    """
    x = np.array(x, dtype=float)
    p = np.array(p, dtype=float)
    g = grad_log_density(x)
    if not np.all(np.isfinite(g)):
        return x, p, True
    p = p + 0.5 * step_size * g
    for step in range(n_steps):
        x = x + step_size * inv_mass * p
        g = grad_log_density(x)
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(x)):
            return x, p, True
        p = p + (step_size if step < n_steps - 1 else 0.5 * step_size) * g
    return x, p, False


def hmc_chain(target, config: HmcConfig, x0) -> HmcResult:
    """Sample the unnormalized target; returns post-burn-in draws.

    ``target`` needs log_unnorm(x) and grad_log(x) for single
    configurations. Raises if no proposal is accepted during burn-in, which
    almost always means the step size is too large.
    """
    rng = np.random.default_rng(config.seed)
    x = np.asarray(x0, dtype=float).copy()
    dim = x.shape[0]
    mass = config.mass_diag if config.mass_diag is not None else np.ones(dim)
    mass = mass * config.kernel_std**2
    inv_mass = 1.0 / mass

    def log_u(q):
        return float(np.asarray(target.log_unnorm(q[None, :])).reshape(-1)[0])

    def grad_u(q):
        return np.asarray(target.grad_log(q[None, :])).reshape(dim)

    total = config.burn_in + config.samples
    out = np.empty((config.samples, dim))
    accepted = np.zeros(total, dtype=bool)
    log_alpha = np.full(total, -np.inf)
    uniforms = np.empty(total)
    current_log = log_u(x)
    start = time.perf_counter()
    for it in range(total):
        p = rng.standard_normal(dim) * np.sqrt(mass)
        h0 = -current_log + 0.5 * np.sum(p * p * inv_mass)
        x_new, p_new, diverged = leapfrog(x, p, grad_u, config.step_size,
                                          config.leapfrog_steps, inv_mass)
        uniforms[it] = rng.uniform()
        if not diverged:
            new_log = log_u(x_new)
            h1 = -new_log + 0.5 * np.sum(p_new * p_new * inv_mass)
            if np.isfinite(h1):
                log_alpha[it] = min(0.0, h0 - h1)
                if np.log(uniforms[it]) < log_alpha[it]:
                    x = x_new
                    current_log = new_log
                    accepted[it] = True
        if it == config.burn_in - 1 and not np.any(accepted[:config.burn_in]):
            raise ValueError("no proposal accepted during burn-in; "
                             "reduce step_size or leapfrog_steps")
        if it >= config.burn_in:
            out[it - config.burn_in] = x
    rate = float(np.mean(accepted[config.burn_in:]))
    return HmcResult(out, rate, accepted, log_alpha, uniforms,
                     time.perf_counter() - start)
