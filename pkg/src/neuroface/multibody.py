"""Articulated rigid-body dynamics for the cervical spine and skull.

The chain is a base link followed by movable links, each attached to its
parent by a 3-DOF rotational joint parameterized with intrinsic XYZ Euler
angles.  Everything below is computed in world coordinates:

* ``mass_matrix``  -- composite rigid body algorithm,
* ``bias_forces``  -- recursive Newton-Euler with zero joint acceleration
  (Coriolis/centrifugal + gravity),
* ``step_dynamics`` -- semi-implicit Euler on
  ``M(q) qdd + C(q, qd) + Ks (q - q0) + Kd qd = P f_m + J^T f_ext``.

Frame convention used by the bundled data: x towards the subject's left,
y up, z anterior.  With that convention the three joint angles are pitch,
yaw and roll in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numba import njit

from .config import ConfigError, data_path, load_yaml, require

DEFAULT_LIMIT_DEG = 60.0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoneLink:
    name: str
    mass: float
    inertia: np.ndarray
    com_offset: np.ndarray
    parent_index: int
    joint_origin: np.ndarray


@dataclass(frozen=True)
class JointSpring:
    k_s: np.ndarray
    k_d: np.ndarray
    q0: np.ndarray


@dataclass
class GeneralizedState:
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray | None = None

    def copy(self) -> "GeneralizedState":
        return GeneralizedState(
            self.q.copy(),
            self.qdot.copy(),
            None if self.qddot is None else self.qddot.copy(),
        )


@dataclass(frozen=True)
class SpineModel:
    """Immutable skeleton description plus packed arrays for the kernels."""

    links: tuple[BoneLink, ...]
    springs: tuple[JointSpring, ...]
    gravity: np.ndarray
    joint_limits: np.ndarray
    # packed copies, filled in __post_init__
    parent: np.ndarray = field(init=False, repr=False)
    masses: np.ndarray = field(init=False, repr=False)
    inertias: np.ndarray = field(init=False, repr=False)
    coms: np.ndarray = field(init=False, repr=False)
    origins: np.ndarray = field(init=False, repr=False)
    subtree: np.ndarray = field(init=False, repr=False)
    k_s: np.ndarray = field(init=False, repr=False)
    k_d: np.ndarray = field(init=False, repr=False)
    q0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.links)
        packed = {
            "parent": np.array([lk.parent_index for lk in self.links], dtype=np.int64),
            "masses": np.array([lk.mass for lk in self.links], dtype=float),
            "inertias": np.array([lk.inertia for lk in self.links], dtype=float),
            "coms": np.array([lk.com_offset for lk in self.links], dtype=float),
            "origins": np.array([lk.joint_origin for lk in self.links], dtype=float),
            "k_s": np.concatenate([s.k_s for s in self.springs]).astype(float),
            "k_d": np.concatenate([s.k_d for s in self.springs]).astype(float),
            "q0": np.concatenate([s.q0 for s in self.springs]).astype(float),
        }
        sub = np.zeros((n, n), dtype=np.bool_)
        for k in range(n):
            j = k
            while j >= 0:
                sub[j, k] = True
                j = self.links[j].parent_index
        packed["subtree"] = sub
        for name, arr in packed.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def ndof(self) -> int:
        return 3 * (len(self.links) - 1)

    def link_index(self, name: str) -> int:
        for i, lk in enumerate(self.links):
            if lk.name == name:
                return i
        raise KeyError(f"no link named {name!r}")

    def rest_state(self) -> GeneralizedState:
        return GeneralizedState(self.q0.copy(), np.zeros(self.ndof))


@dataclass
class Pose:
    """World-frame kinematics of every link at one instant."""

    R: np.ndarray  # (n, 3, 3) link orientations
    p: np.ndarray  # (n, 3) joint points
    com: np.ndarray  # (n, 3) centers of mass
    axes: np.ndarray  # (n, 3, 3) joint axes, axes[i, k] is axis k of joint i
    omega: np.ndarray  # (n, 3) angular velocities
    vp: np.ndarray  # (n, 3) joint point velocities

    def link_point(self, link: int, local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = self.R[link] @ local
        x = self.p[link] + r
        v = self.vp[link] + np.cross(self.omega[link], r)
        return x, v


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _vec3(value: Any, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: expected a finite 3-vector, got {value!r}")
    return arr


def _inertia(value: Any, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == (3,):
        arr = np.diag(arr)
    if arr.shape != (3, 3):
        raise ConfigError(f"{where}: inertia must be 3 diagonal entries or a 3x3 matrix")
    if not np.allclose(arr, arr.T, atol=1e-15):
        raise ConfigError(f"{where}: inertia is not symmetric")
    if np.any(np.linalg.eigvalsh(arr) <= 0.0):
        raise ConfigError(f"{where}: inertia is not positive definite")
    return arr


def _per_axis(value: Any, where: str, default: float | None = None) -> np.ndarray:
    if value is None:
        if default is None:
            raise ConfigError(f"{where}: missing value")
        value = default
    arr = np.asarray(value, dtype=float)
    if arr.shape == ():
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise ConfigError(f"{where}: expected scalar or 3 values")
    return arr


def build_spine(config: dict[str, Any] | str | Path) -> SpineModel:
    """Build and validate a :class:`SpineModel` from a spine definition document.

    ``config`` is either the parsed mapping or a path to the YAML file.  The
    first link is the immobile base; every following link names its parent,
    and the parents must form a single unbranched chain in listing order.
    """
    doc = load_yaml(config) if isinstance(config, (str, Path)) else config
    raw_links = require(doc, "links", "spine")
    if not isinstance(raw_links, list) or len(raw_links) < 2:
        raise ConfigError("spine: need a base link and at least one movable link")

    names = [str(require(lk, "name", "link")) for lk in raw_links]
    if len(set(names)) != len(names):
        raise ConfigError("spine: duplicate link names")
    index = {n: i for i, n in enumerate(names)}

    default_limit = np.deg2rad(float(doc.get("joint_limits_deg", DEFAULT_LIMIT_DEG)))
    links: list[BoneLink] = []
    springs: list[JointSpring] = []
    limits: list[np.ndarray] = []
    for i, raw in enumerate(raw_links):
        where = f"link '{names[i]}'"
        mass = float(require(raw, "mass", where))
        if not mass > 0.0:
            raise ConfigError(f"{where}: non-positive mass")
        inertia = _inertia(require(raw, "inertia", where), where)
        com = _vec3(raw.get("com", [0.0, 0.0, 0.0]), where)
        if i == 0:
            if raw.get("parent") is not None:
                raise ConfigError(f"{where}: the base link cannot have a parent")
            links.append(BoneLink(names[i], mass, inertia, com, -1, np.zeros(3)))
            continue
        parent_name = raw.get("parent")
        if parent_name not in index:
            raise ConfigError(f"{where}: unknown parent {parent_name!r}")
        parent = index[parent_name]
        if parent >= i:
            # a parent listed at or after its child implies a cycle or a
            # non-chain ordering
            raise ConfigError(f"{where}: cyclic or out-of-order parent reference")
        if parent != i - 1:
            raise ConfigError(f"{where}: chain must be unbranched and listed in order")
        origin = _vec3(require(raw, "joint_origin", where), where)
        links.append(BoneLink(names[i], mass, inertia, com, parent, origin))

        sp = raw.get("spring", {}) or {}
        k_s = _per_axis(sp.get("k_s"), where + " spring k_s", 0.0)
        k_d = _per_axis(sp.get("k_d"), where + " spring k_d", 0.0)
        if np.any(k_s < 0) or np.any(k_d < 0):
            raise ConfigError(f"{where}: spring coefficients must be >= 0")
        q0 = np.deg2rad(_per_axis(sp.get("q0_deg"), where + " spring q0", 0.0))
        springs.append(JointSpring(k_s, k_d, q0))

        lim = raw.get("limits_deg")
        if lim is None:
            lim_arr = np.array([[-default_limit, default_limit]] * 3)
        else:
            lim_arr = np.deg2rad(np.asarray(lim, dtype=float))
            if lim_arr.shape != (3, 2) or np.any(lim_arr[:, 0] >= lim_arr[:, 1]):
                raise ConfigError(f"{where}: limits_deg must be three [lo, hi] pairs")
        limits.append(lim_arr)

    gravity = _vec3(doc.get("gravity", [0.0, -9.81, 0.0]), "gravity")
    return SpineModel(tuple(links), tuple(springs), gravity, np.concatenate(limits, axis=0))


def load_default_spine() -> SpineModel:
    return build_spine(data_path("spine.yaml"))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@njit(cache=True)
def _ry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@njit(cache=True)
def _rz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@njit(cache=True)
def rot_xyz(a, b, c):
    return _rx(a) @ _ry(b) @ _rz(c)


@njit(cache=True)
def _forward_kinematics(q, parent, origins, coms):
    n = parent.shape[0]
    R = np.zeros((n, 3, 3))
    p = np.zeros((n, 3))
    c = np.zeros((n, 3))
    ax = np.zeros((n, 3, 3))
    R[0] = np.eye(3)
    c[0] = coms[0]
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    for i in range(1, n):
        pa = parent[i]
        d = 3 * (i - 1)
        Rp = R[pa]
        Rx = _rx(q[d])
        Rxy = Rx @ _ry(q[d + 1])
        p[i] = p[pa] + Rp @ origins[i]
        ax[i, 0] = Rp @ ex
        ax[i, 1] = Rp @ (Rx @ ey)
        ax[i, 2] = Rp @ (Rxy @ ez)
        R[i] = Rp @ (Rxy @ _rz(q[d + 2]))
        c[i] = p[i] + R[i] @ coms[i]
    return R, p, c, ax


@njit(cache=True)
def _velocities(qd, parent, p, ax):
    n = parent.shape[0]
    omega = np.zeros((n, 3))
    vp = np.zeros((n, 3))
    for i in range(1, n):
        pa = parent[i]
        d = 3 * (i - 1)
        w_rel = ax[i, 0] * qd[d] + ax[i, 1] * qd[d + 1] + ax[i, 2] * qd[d + 2]
        omega[i] = omega[pa] + w_rel
        vp[i] = vp[pa] + _cross(omega[pa], p[i] - p[pa])
    return omega, vp


@njit(cache=True)
def _triple(a, b, c):
    """a . (b x c) without temporaries."""
    return (a[0] * (b[1] * c[2] - b[2] * c[1])
            + a[1] * (b[2] * c[0] - b[0] * c[2])
            + a[2] * (b[0] * c[1] - b[1] * c[0]))


@njit(cache=True)
def _world_inertias(R, inertias):
    n = R.shape[0]
    Iw = np.empty((n, 3, 3))
    for k in range(n):
        Iw[k] = R[k] @ inertias[k] @ R[k].T
    return Iw


@njit(cache=True)
def _mass_matrix(R, p, c, ax, masses, inertias, subtree):
    n = masses.shape[0]
    ndof = 3 * (n - 1)
    M = np.zeros((ndof, ndof))
    Iw = _world_inertias(R, inertias)
    J = np.empty((3, 3))
    h = np.empty(3)
    mom = np.empty(3)
    for i in range(1, n):
        # composite inertia of the subtree rooted at link i, about joint point i
        J[:, :] = 0.0
        h[:] = 0.0
        for k in range(1, n):
            if not subtree[i, k]:
                continue
            mk = masses[k]
            u0 = c[k, 0] - p[i, 0]
            u1 = c[k, 1] - p[i, 1]
            u2 = c[k, 2] - p[i, 2]
            uu = u0 * u0 + u1 * u1 + u2 * u2
            J[0, 0] += Iw[k, 0, 0] + mk * (uu - u0 * u0)
            J[1, 1] += Iw[k, 1, 1] + mk * (uu - u1 * u1)
            J[2, 2] += Iw[k, 2, 2] + mk * (uu - u2 * u2)
            J[0, 1] += Iw[k, 0, 1] - mk * u0 * u1
            J[0, 2] += Iw[k, 0, 2] - mk * u0 * u2
            J[1, 2] += Iw[k, 1, 2] - mk * u1 * u2
            h[0] += mk * u0
            h[1] += mk * u1
            h[2] += mk * u2
        J[1, 0] = J[0, 1]
        J[2, 0] = J[0, 2]
        J[2, 1] = J[1, 2]
        di = 3 * (i - 1)
        for ci in range(3):
            a = ax[i, ci]
            # force a x h and moment J a about joint point i
            f0 = a[1] * h[2] - a[2] * h[1]
            f1 = a[2] * h[0] - a[0] * h[2]
            f2 = a[0] * h[1] - a[1] * h[0]
            m0 = J[0, 0] * a[0] + J[0, 1] * a[1] + J[0, 2] * a[2]
            m1 = J[1, 0] * a[0] + J[1, 1] * a[1] + J[1, 2] * a[2]
            m2 = J[2, 0] * a[0] + J[2, 1] * a[1] + J[2, 2] * a[2]
            for j in range(1, i + 1):
                if not subtree[j, i]:
                    continue
                dj = 3 * (j - 1)
                r0 = p[i, 0] - p[j, 0]
                r1 = p[i, 1] - p[j, 1]
                r2 = p[i, 2] - p[j, 2]
                mom[0] = m0 + r1 * f2 - r2 * f1
                mom[1] = m1 + r2 * f0 - r0 * f2
                mom[2] = m2 + r0 * f1 - r1 * f0
                for cj in range(3):
                    if j == i and cj > ci:
                        continue
                    b = ax[j, cj]
                    val = b[0] * mom[0] + b[1] * mom[1] + b[2] * mom[2]
                    M[dj + cj, di + ci] = val
                    M[di + ci, dj + cj] = val
    return M


@njit(cache=True)
def _bias_forces(qd, parent, R, p, c, ax, masses, inertias, gravity, subtree):
    n = masses.shape[0]
    ndof = 3 * (n - 1)
    omega = np.zeros((n, 3))
    alpha = np.zeros((n, 3))
    a_p = np.zeros((n, 3))
    a_c = np.zeros((n, 3))
    a_p[0] = -gravity
    for i in range(1, n):
        pa = parent[i]
        d = 3 * (i - 1)
        a0 = ax[i, 0] * qd[d]
        a1 = ax[i, 1] * qd[d + 1]
        w_rel = a0 + a1 + ax[i, 2] * qd[d + 2]
        omega[i] = omega[pa] + w_rel
        cdot = _cross(a0, ax[i, 1]) * qd[d + 1] + _cross(a0 + a1, ax[i, 2]) * qd[d + 2]
        alpha[i] = alpha[pa] + _cross(omega[pa], w_rel) + cdot
        r = p[i] - p[pa]
        a_p[i] = a_p[pa] + _cross(alpha[pa], r) + _cross(omega[pa], _cross(omega[pa], r))
        dc = c[i] - p[i]
        a_c[i] = a_p[i] + _cross(alpha[i], dc) + _cross(omega[i], _cross(omega[i], dc))
    f = np.zeros((n, 3))
    mom = np.zeros((n, 3))
    tau = np.zeros(ndof)
    Iw = _world_inertias(R, inertias)
    for i in range(n - 1, 0, -1):
        F = masses[i] * a_c[i]
        N = Iw[i] @ alpha[i] + _cross(omega[i], Iw[i] @ omega[i])
        f[i] += F
        mom[i] += N + _cross(c[i] - p[i], F)
        d = 3 * (i - 1)
        for k in range(3):
            tau[d + k] = np.dot(ax[i, k], mom[i])
        pa = parent[i]
        if pa >= 1:
            f[pa] += f[i]
            mom[pa] += mom[i] + _cross(p[i] - p[pa], f[i])
    return tau


@njit(cache=True)
def _wrench_torques(p, c, ax, subtree, wrenches):
    """J^T f_ext for per-link wrenches [force, torque] applied at the COM."""
    n = p.shape[0]
    tau = np.zeros(3 * (n - 1))
    for k in range(1, n):
        force = wrenches[k, :3]
        torque = wrenches[k, 3:]
        for j in range(1, k + 1):
            if not subtree[j, k]:
                continue
            mom = torque + _cross(c[k] - p[j], force)
            d = 3 * (j - 1)
            for a in range(3):
                tau[d + a] += np.dot(ax[j, a], mom)
    return tau


@njit(cache=True)
def _spd_solve(M, b):
    L = np.linalg.cholesky(M)
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _integrate(q, qd, qdd, dt, lo, hi):
    qd_new = qd + dt * qdd
    q_new = q + dt * qd_new
    for k in range(q.shape[0]):
        if q_new[k] < lo[k]:
            q_new[k] = lo[k]
            qd_new[k] = 0.0
        elif q_new[k] > hi[k]:
            q_new[k] = hi[k]
            qd_new[k] = 0.0
    return q_new, qd_new


@njit(cache=True)
def _dynamics_step(q, qd, tau_applied, dt, parent, origins, coms, masses, inertias,
                   gravity, subtree, k_s, k_d, q0, lo, hi):
    R, p, c, ax = _forward_kinematics(q, parent, origins, coms)
    M = _mass_matrix(R, p, c, ax, masses, inertias, subtree)
    bias = _bias_forces(qd, parent, R, p, c, ax, masses, inertias, gravity, subtree)
    rhs = tau_applied - k_s * (q - q0) - k_d * qd - bias
    qdd = _spd_solve(M, rhs)
    q_new, qd_new = _integrate(q, qd, qdd, dt, lo, hi)
    return q_new, qd_new, qdd


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _check_q(model: SpineModel, q: np.ndarray) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=float)
    if q.shape != (model.ndof,):
        raise ValueError(f"expected a {model.ndof}-vector of joint angles, got shape {q.shape}")
    return q


def pose(model: SpineModel, q: np.ndarray, qdot: np.ndarray | None = None) -> Pose:
    q = _check_q(model, q)
    qd = np.zeros(model.ndof) if qdot is None else _check_q(model, qdot)
    R, p, c, ax = _forward_kinematics(q, model.parent, model.origins, model.coms)
    omega, vp = _velocities(qd, model.parent, p, ax)
    return Pose(R, p, c, ax, omega, vp)


def mass_matrix(model: SpineModel, q: np.ndarray) -> np.ndarray:
    """Joint-space inertia matrix M(q) (composite rigid body algorithm)."""
    q = _check_q(model, q)
    R, p, c, ax = _forward_kinematics(q, model.parent, model.origins, model.coms)
    return _mass_matrix(R, p, c, ax, model.masses, model.inertias, model.subtree)


def bias_forces(model: SpineModel, state: GeneralizedState) -> np.ndarray:
    """Coriolis, centrifugal and gravity terms C(q, qd) on the left-hand side.

    At ``qdot = 0`` this is the generalized gravity load, e.g. ``+m g r sin(theta)``
    for a hanging pendulum displaced by ``theta``.
    """
    q = _check_q(model, state.q)
    qd = _check_q(model, state.qdot)
    R, p, c, ax = _forward_kinematics(q, model.parent, model.origins, model.coms)
    return _bias_forces(qd, model.parent, R, p, c, ax, model.masses, model.inertias,
                        model.gravity, model.subtree)


def spring_torques(model: SpineModel, state: GeneralizedState) -> np.ndarray:
    """Intervertebral joint spring torque ``-k_s (q - q0) - k_d qdot`` per axis."""
    q = _check_q(model, state.q)
    qd = _check_q(model, state.qdot)
    return -model.k_s * (q - model.q0) - model.k_d * qd


def external_torques(model: SpineModel, q: np.ndarray, wrenches: np.ndarray) -> np.ndarray:
    """Map per-link wrenches ``(n_links, 6)`` = [force, torque] at each COM to J^T f_ext."""
    q = _check_q(model, q)
    wrenches = np.ascontiguousarray(wrenches, dtype=float)
    if wrenches.shape != (model.n_links, 6):
        raise ValueError(f"wrenches must have shape ({model.n_links}, 6)")
    R, p, c, ax = _forward_kinematics(q, model.parent, model.origins, model.coms)
    return _wrench_torques(p, c, ax, model.subtree, wrenches)


FD_STEP = 1e-5


def moment_arm_matrix(model: SpineModel, muscles: Sequence[Any], q: np.ndarray) -> np.ndarray:
    """Moment arms ``P[k, j] = -dl_j/dq_k`` by central differences (step 1e-5 rad).

    ``muscles`` are :class:`neuroface.muscle.HillMuscle` objects whose paths are
    bound to links of ``model``.  The joint torque of muscle tensions ``f`` is
    ``P @ f``.
    """
    from .muscle import path_length

    q = _check_q(model, q)
    P = np.zeros((model.ndof, len(muscles)))
    for k in range(model.ndof):
        qp = q.copy()
        qm = q.copy()
        qp[k] += FD_STEP
        qm[k] -= FD_STEP
        pose_p = pose(model, qp)
        pose_m = pose(model, qm)
        for j, mus in enumerate(muscles):
            lp = path_length(mus.path, pose_p)
            lm = path_length(mus.path, pose_m)
            P[k, j] = -(lp - lm) / (2.0 * FD_STEP)
    return P


def step_dynamics(
    model: SpineModel,
    state: GeneralizedState,
    muscle_forces: np.ndarray | None = None,
    f_ext: np.ndarray | None = None,
    dt: float = 2.5e-4,
    moment_arms: np.ndarray | None = None,
) -> GeneralizedState:
    """Advance one semi-implicit Euler step.

    ``muscle_forces`` (tensions, N) need the matching ``moment_arms`` matrix
    (``moment_arm_matrix`` or the analytic one from ``neurocontrol``).  ``f_ext``
    holds per-link wrenches as in :func:`external_torques`.
    """
    if not 0.0 < dt <= 1e-3:
        raise ValueError("dt must lie in (0, 1 ms]")
    q = _check_q(model, state.q)
    qd = _check_q(model, state.qdot)
    tau = np.zeros(model.ndof)
    if muscle_forces is not None:
        f = np.asarray(muscle_forces, dtype=float)
        if np.any(f < 0):
            raise ValueError("muscle forces must be tensions (>= 0)")
        if moment_arms is None:
            raise ValueError("muscle_forces given without a moment-arm matrix")
        tau += moment_arms @ f
    if f_ext is not None:
        tau += external_torques(model, q, f_ext)
    try:
        q_new, qd_new, qdd = _dynamics_step(
            q, qd, tau, dt, model.parent, model.origins, model.coms, model.masses,
            model.inertias, model.gravity, model.subtree, model.k_s, model.k_d, model.q0,
            np.ascontiguousarray(model.joint_limits[:, 0]),
            np.ascontiguousarray(model.joint_limits[:, 1]),
        )
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("mass matrix is not positive definite; check link data") from exc
    return GeneralizedState(q_new, qd_new, qdd)


def kinetic_energy(model: SpineModel, state: GeneralizedState) -> float:
    M = mass_matrix(model, state.q)
    return 0.5 * float(state.qdot @ M @ state.qdot)


def potential_energy(model: SpineModel, q: np.ndarray) -> float:
    """Gravity plus joint-spring potential (zero datum at the world origin)."""
    P = pose(model, q)
    grav = -float(np.sum(model.masses[1:, None] * P.com[1:] * model.gravity[None, :]))
    spring = 0.5 * float(np.sum(model.k_s * (np.asarray(q) - model.q0) ** 2))
    return grav + spring


def skull_orientation(model: SpineModel, q: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler angles (pitch, yaw, roll) of the last link relative to the base."""
    R = pose(model, q).R[-1]
    return matrix_to_xyz(R)


def matrix_to_xyz(R: np.ndarray) -> np.ndarray:
    # R = Rx(a) Ry(b) Rz(c)
    b = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    a = np.arctan2(-R[1, 2], R[2, 2])
    c = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])
