"""Planar and serial-3D kinematic chains.

Forward kinematics, analytic Jacobians, centre of mass, and a damped
pseudo-inverse projection toward task-space targets. Every operation accepts
a single configuration ``(n,)`` or a batch ``(B, n)`` and returns matching
shapes. Nothing mutates its inputs.

Conventions: the base sits at the origin. Planar joints rotate about z, with
each link of length ``l_i`` along the local x axis. Serial-3D joints rotate
about a per-joint unit axis expressed in the parent frame, followed by a
fixed translation offset expressed in the rotated frame. Link masses are
lumped at link tips.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PINV_DAMPING = 1e-8
# Per-iteration bound on joint updates. Keeps the projection finite when the
# Jacobian loses rank; well-conditioned steps stay below it.
MAX_PROJECTION_STEP = 0.5


@dataclass(frozen=True)
class KinematicChain:
    """Serial robot with revolute joints."""

    link_lengths: np.ndarray
    link_masses: np.ndarray
    joint_limits: np.ndarray
    kind: str = "planar"
    axes: np.ndarray | None = None
    offsets: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", np.asarray(self.link_lengths, dtype=float))
        object.__setattr__(self, "link_masses", np.asarray(self.link_masses, dtype=float))
        object.__setattr__(self, "joint_limits", np.asarray(self.joint_limits, dtype=float))
        n = self.link_lengths.shape[0]
        if self.kind not in ("planar", "serial3d"):
            raise ValueError(f"kind must be 'planar' or 'serial3d', got {self.kind!r}")
        if n == 0:
            raise ValueError("chain needs at least one joint")
        if np.any(self.link_lengths <= 0.0):
            raise ValueError("link_lengths must be positive")
        if self.link_masses.shape != (n,):
            raise ValueError(f"link_masses must have length {n}, got {self.link_masses.shape}")
        if np.any(self.link_masses < 0.0):
            raise ValueError("link_masses must be non-negative")
        if self.joint_limits.shape != (n, 2):
            raise ValueError(f"joint_limits must have shape ({n}, 2), got {self.joint_limits.shape}")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint_limits must satisfy lower < upper")
        if self.kind == "serial3d":
            if self.axes is None or self.offsets is None:
                raise ValueError("serial3d chains need axes and offsets")
            object.__setattr__(self, "axes", np.asarray(self.axes, dtype=float))
            object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float))
            if self.axes.shape != (n, 3) or self.offsets.shape != (n, 3):
                raise ValueError(f"axes and offsets must have shape ({n}, 3)")
            norms = np.linalg.norm(self.axes, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("rotation axes must be unit vectors")

    @classmethod
    def planar(cls, link_lengths, link_masses=None, joint_limits=None) -> "KinematicChain":
        link_lengths = np.asarray(link_lengths, dtype=float)
        n = link_lengths.shape[0]
        if link_masses is None:
            link_masses = np.ones(n)
        if joint_limits is None:
            joint_limits = np.tile([-np.pi, np.pi], (n, 1))
        return cls(link_lengths, link_masses, joint_limits, kind="planar")

    @classmethod
    def serial3d(cls, axes, offsets, link_masses=None, joint_limits=None) -> "KinematicChain":
        offsets = np.asarray(offsets, dtype=float)
        lengths = np.linalg.norm(offsets, axis=1)
        n = offsets.shape[0]
        if link_masses is None:
            link_masses = np.ones(n)
        if joint_limits is None:
            joint_limits = np.tile([-np.pi, np.pi], (n, 1))
        return cls(lengths, link_masses, joint_limits, kind="serial3d", axes=axes, offsets=offsets)

    @property
    def joint_count(self) -> int:
        return self.link_lengths.shape[0]

    @property
    def task_dim(self) -> int:
        return 2 if self.kind == "planar" else 3


def _as_batch(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != n:
            raise ValueError(f"configuration has {x.shape[0]} joints, chain has {n}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"configuration batch must have shape (B, {n}), got {x.shape}")
    return x, False


def _check_frame(chain, frame):
    if not 0 <= frame < chain.joint_count:
        raise ValueError(f"frame {frame} out of range for {chain.joint_count}-joint chain")


def _rodrigues(axis, angles):
    """Batched rotation matrices about a fixed unit axis. angles: (B,) -> (B, 3, 3)."""
    c = np.cos(angles)
    s = np.sin(angles)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    eye = np.eye(3)
    outer = np.outer(axis, axis)
    return (c[:, None, None] * eye
            + s[:, None, None] * k
            + (1.0 - c)[:, None, None] * outer)


def _serial3d_frames(chain, x):
    """World rotation, joint origin, joint axis, and link tip for every joint.

    Returns (rots (B,n,3,3), origins (B,n,3), axes_w (B,n,3), tips (B,n,3)).
    """
    b, n = x.shape
    rot = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
    pos = np.zeros((b, 3))
    rots = np.empty((b, n, 3, 3))
    origins = np.empty((b, n, 3))
    axes_w = np.empty((b, n, 3))
    tips = np.empty((b, n, 3))
    for i in range(n):
        axes_w[:, i] = rot @ chain.axes[i]
        origins[:, i] = pos
        rot = rot @ _rodrigues(chain.axes[i], x[:, i])
        pos = pos + np.einsum("bij,j->bi", rot, chain.offsets[i])
        rots[:, i] = rot
        tips[:, i] = pos
    return rots, origins, axes_w, tips


def _planar_tips(chain, x):
    """Cumulative link-tip positions, (B, n, 2)."""
    phi = np.cumsum(x, axis=1)
    seg = chain.link_lengths[None, :, None] * np.stack([np.cos(phi), np.sin(phi)], axis=2)
    return np.cumsum(seg, axis=1), phi


def fk_position(chain: KinematicChain, x, frame: int):
    """Cartesian position of the tip of link ``frame``."""
    _check_frame(chain, frame)
    x, single = _as_batch(x, chain.joint_count)
    if chain.kind == "planar":
        tips, _ = _planar_tips(chain, x)
    else:
        _, _, _, tips = _serial3d_frames(chain, x)
    out = tips[:, frame]
    return out[0] if single else out


def fk_orientation(chain: KinematicChain, x, frame: int):
    """Rotation matrix of link ``frame`` (2x2 planar, 3x3 serial-3D)."""
    _check_frame(chain, frame)
    x, single = _as_batch(x, chain.joint_count)
    if chain.kind == "planar":
        phi = np.cumsum(x, axis=1)[:, frame]
        c, s = np.cos(phi), np.sin(phi)
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = c
        out[:, 0, 1] = -s
        out[:, 1, 0] = s
        out[:, 1, 1] = c
    else:
        rots, _, _, _ = _serial3d_frames(chain, x)
        out = rots[:, frame]
    return out[0] if single else out


def fk_jacobian(chain: KinematicChain, x, frame: int, kind: str = "position"):
    """Analytic Jacobian of the FK map at ``x``.

    ``kind='position'`` gives d(tip position)/dq. ``kind='orientation'`` gives
    the angular velocity map: one row of ones up to ``frame`` for planar
    chains, world-frame joint axes for serial-3D. Joints beyond ``frame``
    contribute exactly zero columns.
    """
    _check_frame(chain, frame)
    if kind not in ("position", "orientation"):
        raise ValueError(f"kind must be 'position' or 'orientation', got {kind!r}")
    x, single = _as_batch(x, chain.joint_count)
    b, n = x.shape
    if chain.kind == "planar":
        if kind == "orientation":
            jac = np.zeros((b, 1, n))
            jac[:, 0, : frame + 1] = 1.0
        else:
            _, phi = _planar_tips(chain, x)
            sx = -chain.link_lengths[None, :] * np.sin(phi)
            sy = chain.link_lengths[None, :] * np.cos(phi)
            jac = np.zeros((b, 2, n))
            # column c sums link derivatives c..frame (reverse cumulative sum)
            jac[:, 0, : frame + 1] = np.cumsum(sx[:, frame::-1], axis=1)[:, ::-1]
            jac[:, 1, : frame + 1] = np.cumsum(sy[:, frame::-1], axis=1)[:, ::-1]
    else:
        _, origins, axes_w, tips = _serial3d_frames(chain, x)
        if kind == "orientation":
            jac = np.zeros((b, 3, n))
            jac[:, :, : frame + 1] = np.swapaxes(axes_w[:, : frame + 1], 1, 2)
        else:
            jac = np.zeros((b, 3, n))
            arm = tips[:, frame, None, :] - origins[:, : frame + 1]
            jac[:, :, : frame + 1] = np.swapaxes(np.cross(axes_w[:, : frame + 1], arm), 1, 2)
    return jac[0] if single else jac


def com(chain: KinematicChain, x):
    """Centre of mass: mass-weighted average of link tip positions."""
    total = chain.link_masses.sum()
    if total <= 0.0:
        raise ValueError("total mass must be positive for centre-of-mass queries")
    x, single = _as_batch(x, chain.joint_count)
    if chain.kind == "planar":
        tips, _ = _planar_tips(chain, x)
    else:
        _, _, _, tips = _serial3d_frames(chain, x)
    out = np.einsum("i,bid->bd", chain.link_masses, tips) / total
    return out[0] if single else out


def com_jacobian(chain: KinematicChain, x):
    """d(com)/dq, the mass-weighted average of per-link position Jacobians."""
    total = chain.link_masses.sum()
    if total <= 0.0:
        raise ValueError("total mass must be positive for centre-of-mass queries")
    x, single = _as_batch(x, chain.joint_count)
    n = chain.joint_count
    out = None
    for i in range(n):
        ji = fk_jacobian(chain, x, i, "position")
        contrib = chain.link_masses[i] * ji
        out = contrib if out is None else out + contrib
    out = out / total
    return out[0] if single else out


def damped_pinv(jac, damping: float = PINV_DAMPING):
    """Tikhonov-regularized pseudo-inverse J^T (J J^T + damping I)^-1.

    Accepts (d, n) or batched (B, d, n); finite for rank-deficient J.
    """
    jac = np.asarray(jac, dtype=float)
    single = jac.ndim == 2
    if single:
        jac = jac[None]
    d = jac.shape[1]
    gram = jac @ np.swapaxes(jac, 1, 2) + damping * np.eye(d)
    pinv = np.swapaxes(np.linalg.solve(gram, jac), 1, 2)
    return pinv[0] if single else pinv


def nullspace_projector(jac):
    """Exact projector onto the nullspace of J, I - pinv(J) J.

    Uses the SVD pseudo-inverse so J @ projector vanishes to machine
    precision even at rank-deficient configurations.
    """
    jac = np.asarray(jac, dtype=float)
    single = jac.ndim == 2
    if single:
        jac = jac[None]
    n = jac.shape[2]
    proj = np.eye(n) - np.linalg.pinv(jac) @ jac
    return proj[0] if single else proj


def ik_project(chain: KinematicChain, x, target, steps: int, frame: int):
    """Iterate x <- x + pinv(J) (target - F(x)) for ``steps`` Newton steps.

    Joint updates are clipped to MAX_PROJECTION_STEP per coordinate so the
    iteration stays bounded near singular configurations. ``steps=0`` returns
    x unchanged.
    """
    _check_frame(chain, frame)
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    x, single = _as_batch(x, chain.joint_count)
    target = np.asarray(target, dtype=float)
    if target.shape != (chain.task_dim,):
        raise ValueError(f"target must have shape ({chain.task_dim},), got {target.shape}")
    q = x.copy()
    for _ in range(steps):
        resid = target[None, :] - fk_position(chain, q, frame)
        jac = fk_jacobian(chain, q, frame, "position")
        step = np.einsum("bnd,bd->bn", damped_pinv(jac), resid)
        step = np.clip(step, -MAX_PROJECTION_STEP, MAX_PROJECTION_STEP)
        q = q + step
    return q[0] if single else q
