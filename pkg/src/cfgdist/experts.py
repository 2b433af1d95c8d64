"""Product-of-experts targets over robot configurations.

A target is a product of expert densities, each evaluated on a task-space
transformation of the configuration: p(x) ~ prod_m p_m(T_m(x)). Experts may
be unnormalized; all log densities here drop constant terms. The gradient of
the log product is assembled expert by expert through analytic task-space
Jacobians, with optional strict task priorities: the gradient term of a
secondary expert is projected into the nullspace of its primary's Jacobian,
which shapes the gradient field only and leaves the scalar density alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_ndtr, logsumexp

from . import chains
from .chains import KinematicChain

# Scale inflation of the relaxed branch of a hierarchical expert while the
# relaxation is annealed (see UniGauss.log).
RELAXED_BRANCH_WIDENING = 3.0


# ---------------------------------------------------------------------------
# transformations


@dataclass(frozen=True)
class FkPosition:
    """Tip position of one link, optionally restricted to a coordinate subset."""

    frame: int
    coords: tuple | None = None

    kind = "vector"

    def __post_init__(self):
        if self.coords is not None:
            object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    def output_dim(self, chain) -> int:
        return chain.task_dim if self.coords is None else len(self.coords)

    def value(self, chain, x):
        p = chains.fk_position(chain, x, self.frame)
        return p if self.coords is None else p[:, list(self.coords)]

    def jacobian(self, chain, x):
        j = chains.fk_jacobian(chain, x, self.frame, "position")
        return j if self.coords is None else j[:, list(self.coords), :]


@dataclass(frozen=True)
class FkOrientation:
    """Rotation matrix of one link."""

    frame: int

    kind = "rotation"

    def output_dim(self, chain) -> int:
        return chain.task_dim

    def value(self, chain, x):
        return chains.fk_orientation(chain, x, self.frame)

    def grad_config(self, chain, x, grad_matrix):
        """Pull a d(log p)/dR matrix back to configuration space."""
        b, n = x.shape
        out = np.zeros((b, n))
        rot = chains.fk_orientation(chain, x, self.frame)
        if chain.kind == "planar":
            # dR/dphi, shared by every joint at or before the frame
            drot = np.empty_like(rot)
            drot[:, 0, 0] = -rot[:, 1, 0]
            drot[:, 0, 1] = -rot[:, 0, 0]
            drot[:, 1, 0] = rot[:, 0, 0]
            drot[:, 1, 1] = -rot[:, 1, 0]
            dot = np.einsum("bij,bij->b", grad_matrix, drot)
            out[:, : self.frame + 1] = dot[:, None]
        else:
            axes_w = chains.fk_jacobian(chain, x, self.frame, "orientation")
            for c in range(self.frame + 1):
                w = axes_w[:, :, c]
                skew = np.zeros((b, 3, 3))
                skew[:, 0, 1] = -w[:, 2]
                skew[:, 0, 2] = w[:, 1]
                skew[:, 1, 0] = w[:, 2]
                skew[:, 1, 2] = -w[:, 0]
                skew[:, 2, 0] = -w[:, 1]
                skew[:, 2, 1] = w[:, 0]
                out[:, c] = np.einsum("bij,bij->b", grad_matrix, skew @ rot)
        return out


@dataclass(frozen=True)
class CoM:
    """Centre of mass, optionally restricted to a coordinate subset."""

    coords: tuple | None = None

    kind = "vector"

    def __post_init__(self):
        if self.coords is not None:
            object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    def output_dim(self, chain) -> int:
        return chain.task_dim if self.coords is None else len(self.coords)

    def value(self, chain, x):
        p = chains.com(chain, x)
        return p if self.coords is None else p[:, list(self.coords)]

    def jacobian(self, chain, x):
        j = chains.com_jacobian(chain, x)
        return j if self.coords is None else j[:, list(self.coords), :]


@dataclass(frozen=True)
class JointSubset:
    """Selected joint coordinates, unchanged."""

    indices: tuple

    kind = "vector"

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def output_dim(self, chain) -> int:
        return len(self.indices)

    def value(self, chain, x):
        return x[:, list(self.indices)]

    def jacobian(self, chain, x):
        b, n = x.shape
        j = np.zeros((b, len(self.indices), n))
        for row, idx in enumerate(self.indices):
            j[:, row, idx] = 1.0
    # selection matrix, constant in x
        return j


@dataclass(frozen=True)
class RelativeDistances:
    """Euclidean distances from link tips to fixed world points.

    ``pairs`` is a sequence of (frame, world point).
    """

    pairs: tuple

    kind = "vector"

    def __post_init__(self):
        pairs = tuple((int(f), np.asarray(p, dtype=float)) for f, p in self.pairs)
        object.__setattr__(self, "pairs", pairs)

    def output_dim(self, chain) -> int:
        return len(self.pairs)

    def value(self, chain, x):
        out = np.empty((x.shape[0], len(self.pairs)))
        for i, (frame, point) in enumerate(self.pairs):
            diff = chains.fk_position(chain, x, frame) - point[None, :]
            out[:, i] = np.linalg.norm(diff, axis=1)
        return out

    def jacobian(self, chain, x):
        b, n = x.shape
        out = np.empty((b, len(self.pairs), n))
        for i, (frame, point) in enumerate(self.pairs):
            diff = chains.fk_position(chain, x, frame) - point[None, :]
            dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
            j = chains.fk_jacobian(chain, x, frame, "position")
            out[:, i, :] = np.einsum("bd,bdn->bn", diff / dist[:, None], j)
        return out


@dataclass(frozen=True)
class IkProjected:
    """Task position after a fixed number of damped Newton projection steps.

    The output is F(P_N(x)) where P is one step of
    x <- x + pinv(J) (target - F(x)). Its Jacobian is computed by central
    finite differences of the full N-step composition; the iteration is
    piecewise smooth, so difference quotients are reliable away from the
    step-clipping boundary.
    """

    target: np.ndarray
    steps: int
    frame: int

    kind = "vector"
    fd_step = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")

    def output_dim(self, chain) -> int:
        return chain.task_dim

    def value(self, chain, x):
        q = chains.ik_project(chain, x, self.target, self.steps, self.frame)
        return chains.fk_position(chain, q, self.frame)

    def jacobian(self, chain, x):
        b, n = x.shape
        out = np.empty((b, chain.task_dim, n))
        h = self.fd_step
        for i in range(n):
            shift = np.zeros(n)
            shift[i] = h
            hi = self.value(chain, x + shift[None, :])
            lo = self.value(chain, x - shift[None, :])
            out[:, :, i] = (hi - lo) / (2.0 * h)
        return out


# ---------------------------------------------------------------------------
# expert densities


@dataclass(frozen=True)
class Mvn:
    """Unnormalized Gaussian expert, -(v - mean)^T Sigma^-1 (v - mean) / 2."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        d = mean.shape[0]
        if scale.shape != (d, d):
            raise ValueError(f"scale must have shape ({d}, {d}), got {scale.shape}")
        if np.any(np.triu(scale, 1) != 0.0) or np.any(np.diag(scale) <= 0.0):
            raise ValueError("scale must be lower triangular with positive diagonal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log(self, v):
        y = np.linalg.solve(self.scale, (v - self.mean).T).T
        return -0.5 * np.sum(y * y, axis=1)

    def grad(self, v):
        y = np.linalg.solve(self.scale, (v - self.mean).T)
        return -np.linalg.solve(self.scale.T, y).T


@dataclass(frozen=True)
class Bmf:
    """Matrix Bingham-von Mises-Fisher expert on rotation matrices.

    log p(R) = tr(C^T R + B R^T A R), up to the normalizer.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        for name in ("a", "b", "c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.a.shape == self.b.shape == self.c.shape) or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("a, b, c must be square matrices of one shape")

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def log(self, rot):
        linear = np.einsum("ij,bij->b", self.c, rot)
        quad = np.einsum("bji,jk,bkl,li->b", rot, self.a, rot, self.b)
        return linear + quad

    def grad_matrix(self, rot):
        """d log p / dR, shape (B, r, r)."""
        return (self.c[None, :, :]
                + np.einsum("ij,bjk,kl->bil", self.a, rot, self.b)
                + np.einsum("ji,bjk,lk->bil", self.a, rot, self.b))


@dataclass(frozen=True)
class CdfLessEqual:
    """Probability that a noisy copy of a scalar feature stays below a bound.

    log p(t) = log Phi((bound - sign * t) / margin); sign=-1 turns the
    constraint into a lower bound. The log CDF is evaluated with an
    asymptotic-safe routine, so far tails keep accurate values and gradients.
    """

    bound: float
    margin: float
    sign: int = 1

    def __post_init__(self):
        if self.margin <= 0.0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")

    @property
    def dim(self) -> int:
        return 1

    def _u(self, v):
        return (self.bound - self.sign * v[:, 0]) / self.margin

    def log(self, v):
        return log_ndtr(self._u(v))

    def grad(self, v):
        u = self._u(v)
        log_pdf = -0.5 * u * u - 0.5 * np.log(2.0 * np.pi)
        ratio = np.exp(log_pdf - log_ndtr(u))
        return (-self.sign / self.margin) * ratio[:, None]


@dataclass(frozen=True)
class UniGauss:
    """Two-branch expert: the task holds with probability task_prob, else a flat level.

    log p(t) = log(task_prob * exp(inner_log(t)) + (1 - task_prob) * level)
    with level = exp(log_level). During fitting the flat branch may be
    annealed: with anneal strength g in [0, 1], the level is replaced by the
    inner density widened by a factor of RELAXED_BRANCH_WIDENING in scale and
    raised to g, i.e. log level + g * inner_log(t) / widening^2. That keeps a
    useful pull toward the task region early on and flattens back to the
    plain level as g goes to 0.

    ``pin`` freezes the branch choice ("on" or "off") together with its prior
    mass; used when ranking task combinations.
    """

    inner: Mvn
    task_prob: float
    log_level: float
    pin: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.task_prob <= 1.0:
            raise ValueError(f"task_prob must lie in [0, 1], got {self.task_prob}")
        if self.pin not in (None, "on", "off"):
            raise ValueError(f"pin must be None, 'on' or 'off', got {self.pin!r}")

    @property
    def dim(self) -> int:
        return self.inner.dim

    def _branch_logs(self, v, anneal):
        inner_log = self.inner.log(v)
        with np.errstate(divide="ignore"):
            log_on = np.log(self.task_prob) + inner_log
            log_off = np.full_like(inner_log,
                                   np.log1p(-self.task_prob) + self.log_level)
        if anneal > 0.0:
            log_off += anneal * inner_log / RELAXED_BRANCH_WIDENING**2
        return inner_log, log_on, log_off

    def log(self, v, anneal: float = 0.0):
        inner_log, log_on, log_off = self._branch_logs(v, anneal)
        if self.pin == "on":
            return log_on
        if self.pin == "off":
            return log_off
        return np.logaddexp(log_on, log_off)

    def grad(self, v, anneal: float = 0.0):
        inner_grad = self.inner.grad(v)
        relax_factor = anneal / RELAXED_BRANCH_WIDENING**2
        if self.pin == "on":
            return inner_grad
        if self.pin == "off":
            return relax_factor * inner_grad
        _, log_on, log_off = self._branch_logs(v, anneal)
        total = np.logaddexp(log_on, log_off)
        w_on = np.exp(log_on - total)
        factor = w_on + (1.0 - w_on) * relax_factor
        return factor[:, None] * inner_grad


# ---------------------------------------------------------------------------
# the product target


def _expert_name(index, transformation, density):
    return f"expert {index} ({type(density).__name__} on {type(transformation).__name__})"


@dataclass(frozen=True)
class PoeTarget:
    """Unnormalized product of experts over one kinematic chain.

    ``experts`` is an ordered tuple of (transformation, density) pairs.
    ``priority`` lists (primary, secondary) expert index pairs; each
    secondary's gradient term is projected into the nullspace of its
    primary's task Jacobian.
    """

    chain: KinematicChain
    experts: tuple
    priority: tuple = ()

    supports_annealing = True

    def __post_init__(self):
        experts = tuple((t, d) for t, d in self.experts)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "priority", tuple((int(a), int(b)) for a, b in self.priority))
        if not experts:
            raise ValueError("target needs at least one expert")
        for m, (trans, dens) in enumerate(experts):
            out_dim = trans.output_dim(self.chain)
            if trans.kind == "rotation":
                if not isinstance(dens, Bmf):
                    raise ValueError(f"expert {m}: rotation-valued transformations "
                                     f"require a Bmf density, got {type(dens).__name__}")
                if dens.dim != out_dim:
                    raise ValueError(f"expert {m}: Bmf matrices are {dens.dim}x{dens.dim}, "
                                     f"rotation output is {out_dim}x{out_dim}")
            else:
                if isinstance(dens, Bmf):
                    raise ValueError(f"expert {m}: Bmf requires a rotation-valued "
                                     "transformation")
                if dens.dim != out_dim:
                    raise ValueError(f"expert {m}: density dimension {dens.dim} does not "
                                     f"match transformation output {out_dim}")
            if isinstance(trans, JointSubset):
                bad = [i for i in trans.indices if not 0 <= i < self.chain.joint_count]
                if bad:
                    raise ValueError(f"expert {m}: joint indices {bad} out of range")
        seen_secondary = set()
        for a, b in self.priority:
            if not (0 <= a < len(experts) and 0 <= b < len(experts)) or a == b:
                raise ValueError(f"priority pair ({a}, {b}) is not a valid expert pair")
            if experts[a][0].kind != "vector":
                raise ValueError(f"priority primary {a} must have a vector-valued "
                                 "transformation")
            if b in seen_secondary:
                raise ValueError(f"expert {b} appears as secondary in more than one pair")
            seen_secondary.add(b)
        if self._has_priority_cycle():
            raise ValueError("priority pairs must be acyclic")

    def _has_priority_cycle(self):
        succ = {}
        for a, b in self.priority:
            succ.setdefault(a, []).append(b)
        state = {}

        def visit(node):
            state[node] = 1
            for nxt in succ.get(node, ()):
                if state.get(nxt) == 1:
                    return True
                if state.get(nxt) is None and visit(nxt):
                    return True
            state[node] = 2
            return False

        return any(state.get(n) is None and visit(n) for n in succ)

    @property
    def dim(self) -> int:
        return self.chain.joint_count

    def expert_names(self):
        return [_expert_name(m, t, d) for m, (t, d) in enumerate(self.experts)]

    def _density_log(self, density, value, anneal):
        if isinstance(density, UniGauss):
            return density.log(value, anneal)
        if isinstance(density, Bmf):
            return density.log(value)
        return density.log(value)

    def expert_logs(self, x, anneal: float = 0.0):
        """Per-expert log densities, (B, M); diagnostic surface."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        for trans, dens in self.experts:
            cols.append(self._density_log(dens, trans.value(self.chain, x), anneal))
        return np.stack(cols, axis=1)

    def log_unnorm(self, x, anneal: float = 0.0):
        single = np.asarray(x).ndim == 1
        out = self.expert_logs(x, anneal).sum(axis=1)
        return out[0] if single else out

    def grad_log(self, x, anneal: float = 0.0):
        return self.log_and_grad(x, anneal)[1]

    def log_and_grad(self, x, anneal: float = 0.0):
        """Log density and its configuration-space gradient, sharing FK work."""
        single = np.asarray(x).ndim == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b, n = x.shape
        total_log = np.zeros(b)
        terms = []
        for trans, dens in self.experts:
            value = trans.value(self.chain, x)
            if trans.kind == "rotation":
                total_log += dens.log(value)
                terms.append(trans.grad_config(self.chain, x, dens.grad_matrix(value)))
            else:
                if isinstance(dens, UniGauss):
                    total_log += dens.log(value, anneal)
                    gv = dens.grad(value, anneal)
                else:
                    total_log += dens.log(value)
                    gv = dens.grad(value)
                terms.append(np.einsum("bd,bdn->bn", gv, trans.jacobian(self.chain, x)))
        if self.priority:
            projectors = {}
            for primary, _ in self.priority:
                if primary not in projectors:
                    jac = self.experts[primary][0].jacobian(self.chain, x)
                    projectors[primary] = chains.nullspace_projector(jac)
            for primary, secondary in self.priority:
                terms[secondary] = np.einsum("bn,bnm->bm", terms[secondary],
                                             projectors[primary])
        grad = np.sum(terms, axis=0)
        if single:
            return total_log[0], grad[0]
        return total_log, grad


# ---------------------------------------------------------------------------
# conditional targets


@dataclass(frozen=True)
class Binding:
    """Affine dependence of one scalar or vector expert parameter on the task.

    The bound parameter becomes weights @ y + offset.
    """

    expert: int
    param: str
    weights: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.atleast_2d(np.asarray(self.weights, dtype=float)))
        object.__setattr__(self, "offset", np.atleast_1d(np.asarray(self.offset, dtype=float)))
        if self.param not in ("mean", "bound"):
            raise ValueError(f"binding param must be 'mean' or 'bound', got {self.param!r}")
        if self.weights.shape[0] != self.offset.shape[0]:
            raise ValueError("binding weights and offset disagree on output size")


@dataclass(frozen=True)
class ConditionalPoeTarget:
    """A product target whose bound expert parameters are affine in a task y."""

    base: PoeTarget
    bindings: tuple
    task_dim: int

    supports_annealing = True

    def __post_init__(self):
        bindings = tuple(self.bindings)
        object.__setattr__(self, "bindings", bindings)
        if not bindings:
            raise ValueError("conditional target needs at least one binding")
        for binding in bindings:
            if not 0 <= binding.expert < len(self.base.experts):
                raise ValueError(f"binding expert {binding.expert} out of range")
            density = self.base.experts[binding.expert][1]
            if binding.weights.shape[1] != self.task_dim:
                raise ValueError(f"binding weights must have {self.task_dim} columns")
            if binding.param == "mean":
                inner = density.inner if isinstance(density, UniGauss) else density
                if not isinstance(inner, Mvn):
                    raise ValueError(f"binding 'mean' needs an Mvn expert, got "
                                     f"{type(density).__name__}")
                if binding.offset.shape[0] != inner.dim:
                    raise ValueError("binding output size does not match expert mean")
            else:
                if not isinstance(density, CdfLessEqual):
                    raise ValueError(f"binding 'bound' needs a CdfLessEqual expert, got "
                                     f"{type(density).__name__}")
                if binding.offset.shape[0] != 1:
                    raise ValueError("binding to a bound must produce one value")

    @property
    def dim(self) -> int:
        return self.base.dim

    def target_for(self, y) -> PoeTarget:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.task_dim,):
            raise ValueError(f"task parameter must have shape ({self.task_dim},), got {y.shape}")
        experts = list(self.base.experts)
        for binding in self.bindings:
            trans, dens = experts[binding.expert]
            bound_value = binding.weights @ y + binding.offset
            if binding.param == "mean":
                if isinstance(dens, UniGauss):
                    dens = replace(dens, inner=replace(dens.inner, mean=bound_value))
                else:
                    dens = replace(dens, mean=bound_value)
            else:
                dens = replace(dens, bound=float(bound_value[0]))
            experts[binding.expert] = (trans, dens)
        return PoeTarget(self.base.chain, tuple(experts), self.base.priority)

    def log_and_grad(self, x, y, anneal: float = 0.0):
        return self.target_for(y).log_and_grad(x, anneal)

    def log_unnorm(self, x, y, anneal: float = 0.0):
        return self.target_for(y).log_unnorm(x, anneal)


# ---------------------------------------------------------------------------
# ranking task combinations


@dataclass(frozen=True)
class RankedCombination:
    assignment: tuple
    log_mass: float
    params: object | None


def rank_task_combinations(target: PoeTarget, initial, config,
                           mass_samples: int = 2048):
    """Fit every on/off assignment of the hierarchical experts and rank by mass.

    Each UniGauss expert is pinned to one branch (keeping its prior mass
    factor), a mixture is fitted to the resulting product, and the negated
    final objective estimates the assignment's log normalizer. Returns
    RankedCombination entries sorted by decreasing estimated log mass.
    Assignments with zero prior mass are reported with -inf and not fitted.
    """
    from . import elbo

    uni_indices = [m for m, (_, dens) in enumerate(target.experts)
                   if isinstance(dens, UniGauss)]
    if not uni_indices:
        raise ValueError("target has no hierarchical (UniGauss) experts to rank")
    results = []
    for assignment in itertools.product((True, False), repeat=len(uni_indices)):
        experts = list(target.experts)
        impossible = False
        for on, m in zip(assignment, uni_indices):
            trans, dens = experts[m]
            if (on and dens.task_prob == 0.0) or (not on and dens.task_prob == 1.0):
                impossible = True
            experts[m] = (trans, replace(dens, pin="on" if on else "off"))
        if impossible:
            results.append(RankedCombination(assignment, -np.inf, None))
            continue
        pinned = PoeTarget(target.chain, tuple(experts), target.priority)
        fitted, _ = elbo.fit(initial, pinned, config)
        rng = np.random.default_rng(config.seed)
        loss = elbo.elbo_estimate(fitted, pinned, mass_samples, rng)
        results.append(RankedCombination(assignment, -loss, fitted))
    results.sort(key=lambda r: r.log_mass, reverse=True)
    return results
