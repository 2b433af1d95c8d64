"""Closed-form algebra on Gaussian mixtures.

The product of two Gaussian mixture densities is again an unnormalized
Gaussian mixture over all component pairs; this module renormalizes it into
proper mixture parameters.
"""

from __future__ import annotations

import numpy as np

from .families import GaussianComponent, MixtureParams, UnsupportedFamilyError
from .metrics import gaussian_overlap


def gmm_product(a: MixtureParams, b: MixtureParams, weight_floor: float = 0.0) -> MixtureParams:
    """Normalized mixture proportional to the pointwise product a(x) b(x).

    Pair (k, l) combines precisions additively; its weight is the product of
    the parent weights times the overlap integral of the parent components.
    Pairs whose renormalized weight falls below ``weight_floor`` are dropped.
    """
    for m in (a, b):
        if m.family != "gaussian":
            raise UnsupportedFamilyError("gmm_product requires Gaussian mixtures")
    if a.dim != b.dim:
        raise ValueError(f"mixture dimensions differ, {a.dim} vs {b.dim}")
    d = a.dim
    wa, wb = a.weights(), b.weights()
    comps = []
    weights = []
    for k, ca in enumerate(a.components):
        prec_a = np.linalg.inv(ca.scale @ ca.scale.T)
        for l, cb in enumerate(b.components):
            prec_b = np.linalg.inv(cb.scale @ cb.scale.T)
            prec = prec_a + prec_b
            cov = np.linalg.inv(prec)
            cov = 0.5 * (cov + cov.T)
            mean = cov @ (prec_a @ ca.mean + prec_b @ cb.mean)
            comps.append(GaussianComponent(mean, np.linalg.cholesky(cov)))
            weights.append(wa[k] * wb[l] * gaussian_overlap(ca, cb))
    weights = np.asarray(weights)
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("product mixture has zero mass; component pairs do not overlap")
    weights = weights / total
    if weight_floor > 0.0:
        keep = weights >= weight_floor
        if not np.any(keep):
            raise ValueError(f"weight_floor {weight_floor} removes every component")
        comps = [c for c, k_ in zip(comps, keep) if k_]
        weights = weights[keep] / weights[keep].sum()
    return MixtureParams(tuple(comps), np.log(weights))
