"""Two-rate head-neck control.

A voluntary layer (25 Hz) turns a desired head orientation into feedforward
activations and strain setpoints; a reflex layer running with every physics
step (4 kHz) adds strain/strain-rate feedback.  :class:`HeadNeckSim` couples
both layers to the multibody integrator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numba import njit
from scipy.optimize import lsq_linear

from . import multibody as mb
from .config import ConfigError, data_path, load_yaml
from .muscle import (
    HillMuscle,
    PackedMuscles,
    contractile_force_kernel,
    force_length,
    load_muscles,
    pack_muscles,
    passive_force_kernel,
)

log = logging.getLogger(__name__)

PHYSICS_HZ = 4000
VOLUNTARY_HZ = 25
STEPS_PER_VOLUNTARY = PHYSICS_HZ // VOLUNTARY_HZ  # 160
DT = 1.0 / PHYSICS_HZ
RANGE_RAD = np.deg2rad(60.0)


@dataclass(frozen=True)
class HeadPoseTarget:
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll])


@dataclass
class SetpointSignal:
    e_star: np.ndarray
    edot_star: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.e_star <= -1.0):
            raise ValueError("setpoint strains must exceed -1")


@dataclass(frozen=True)
class ReflexGains:
    k_p: float = 5.0
    k_v: float = 0.5

    def __post_init__(self) -> None:
        if self.k_p < 0 or self.k_v < 0:
            raise ValueError("reflex gains must be >= 0")


# ---------------------------------------------------------------------------
# compiled muscle kinematics and the 4 kHz loop
# ---------------------------------------------------------------------------


@njit(cache=True)
def _muscle_kinematics(R, p, omega, vp, ax, subtree, via_link, via_local, start):
    """Lengths, lengthening rates and analytic moment arms ``-dl/dq``."""
    nm = start.shape[0] - 1
    n_links = p.shape[0]
    ndof = 3 * (n_links - 1)
    nv = via_link.shape[0]
    xw = np.empty((nv, 3))
    vw = np.empty((nv, 3))
    for k in range(nv):
        b = via_link[k]
        r = R[b] @ via_local[k]
        xw[k] = p[b] + r
        vw[k] = vp[b] + mb._cross(omega[b], r)
    l = np.zeros(nm)
    ldot = np.zeros(nm)
    P = np.zeros((ndof, nm))
    ru = np.empty(3)
    for m in range(nm):
        for k in range(start[m], start[m + 1] - 1):
            d0 = xw[k + 1, 0] - xw[k, 0]
            d1 = xw[k + 1, 1] - xw[k, 1]
            d2 = xw[k + 1, 2] - xw[k, 2]
            seg = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            l[m] += seg
            if seg == 0.0:
                continue
            u0, u1, u2 = d0 / seg, d1 / seg, d2 / seg
            ldot[m] += (u0 * (vw[k + 1, 0] - vw[k, 0]) + u1 * (vw[k + 1, 1] - vw[k, 1])
                        + u2 * (vw[k + 1, 2] - vw[k, 2]))
            for end in range(2):
                kk = k + end
                # moving the segment end raises the length, moving the start lowers it
                sign = 1.0 if end == 1 else -1.0
                b = via_link[kk]
                for j in range(1, b + 1):
                    if not subtree[j, b]:
                        continue
                    r0 = xw[kk, 0] - p[j, 0]
                    r1 = xw[kk, 1] - p[j, 1]
                    r2 = xw[kk, 2] - p[j, 2]
                    # dl/dq = u . (axis x r) = axis . (r x u)
                    ru[0] = r1 * u2 - r2 * u1
                    ru[1] = r2 * u0 - r0 * u2
                    ru[2] = r0 * u1 - r1 * u0
                    dj = 3 * (j - 1)
                    for c in range(3):
                        P[dj + c, m] -= sign * (ax[j, c, 0] * ru[0] + ax[j, c, 1] * ru[1]
                                                + ax[j, c, 2] * ru[2])
    return l, ldot, P


@njit(cache=True)
def _hill_forces(params, a, l, ldot):
    nm = params.shape[0]
    f = np.empty(nm)
    for m in range(nm):
        l_0 = params[m, 6]
        e = (l[m] - l_0) / l_0
        f[m] = passive_force_kernel(params[m, 0], params[m, 1], params[m, 2], e, ldot[m] / l_0)
        f[m] += contractile_force_kernel(a[m], params[m, 3], params[m, 4], params[m, 5], l[m], ldot[m])
    return f


@njit(cache=True)
def _reflex(a_ff, e_star, edot_star, e, edot, k_p, k_v):
    a = a_ff + k_p * (e - e_star) + k_v * (edot - edot_star)
    for m in range(a.shape[0]):
        if a[m] < 0.0:
            a[m] = 0.0
        elif a[m] > 1.0:
            a[m] = 1.0
    return a


@njit(cache=True)
def _neck_steps(n_steps, q, qd, dt, parent, origins, coms, masses, inertias, gravity,
                subtree, k_s, k_d, q0, lo, hi, via_link, via_local, start, params,
                a_ff, e_star, edot_star, k_p, k_v, sat_run):
    """Run ``n_steps`` reflex + physics steps; ``sat_run`` carries per-muscle
    consecutive saturated-step counters and is updated in place."""
    nm = params.shape[0]
    max_sat = 0
    a = np.zeros(nm)
    l0 = params[:, 6]
    for _ in range(n_steps):
        R, p, c, ax = mb._forward_kinematics(q, parent, origins, coms)
        omega, vp = mb._velocities(qd, parent, p, ax)
        l, ldot, P = _muscle_kinematics(R, p, omega, vp, ax, subtree, via_link, via_local, start)
        a = _reflex(a_ff, e_star, edot_star, (l - l0) / l0, ldot / l0, k_p, k_v)
        f = _hill_forces(params, a, l, ldot)
        M = mb._mass_matrix(R, p, c, ax, masses, inertias, subtree)
        bias = mb._bias_forces(qd, parent, R, p, c, ax, masses, inertias, gravity, subtree)
        rhs = P @ f - k_s * (q - q0) - k_d * qd - bias
        qdd = mb._spd_solve(M, rhs)
        q, qd = mb._integrate(q, qd, qdd, dt, lo, hi)
        for m in range(nm):
            if a[m] >= 1.0:
                sat_run[m] += 1
                if sat_run[m] > max_sat:
                    max_sat = sat_run[m]
            else:
                sat_run[m] = 0
    return q, qd, a, max_sat


def muscle_kinematics(model: mb.SpineModel, packed: PackedMuscles, q: np.ndarray,
                      qdot: np.ndarray | None = None):
    """``(l, ldot, P)`` for link-bound muscles, with analytic moment arms."""
    P_ = mb.pose(model, q, qdot)
    return _muscle_kinematics(P_.R, P_.p, P_.omega, P_.vp, P_.axes, model.subtree,
                              packed.via_link, packed.via_local, packed.start)


# ---------------------------------------------------------------------------
# voluntary layer
# ---------------------------------------------------------------------------


def distribute_orientation(
    target: HeadPoseTarget,
    weights: Sequence[float],
    q_rest: np.ndarray,
    limit: float = RANGE_RAD,
) -> np.ndarray:
    """Split a skull orientation over the joints: joint ``i`` gets ``weights[i] * target``.

    Weights are normalized to sum to one; the result is offset from ``q_rest``.
    """
    t = target.as_array()
    if np.any(np.abs(t) > limit + 1e-12):
        raise ValueError(f"head pose target {t} outside +/-{np.rad2deg(limit):.0f} deg")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("distribution weights must be non-negative with a positive sum")
    w = w / w.sum()
    return np.asarray(q_rest, dtype=float) + np.kron(w, t)


@dataclass
class VoluntaryCommand:
    a_ff: np.ndarray
    setpoints: SetpointSignal
    q_desired: np.ndarray
    residual: float
    feasible: bool


def voluntary_update(
    model: mb.SpineModel,
    packed: PackedMuscles,
    q_desired: np.ndarray,
    lam: float = 1e-3,
    residual_tol: float = 1e-2,
) -> VoluntaryCommand:
    """Feedforward activations and strain setpoints for the desired posture.

    ``a_ff`` minimizes ``|P f_m(a) - tau_req|^2 + lam |a|^2`` over ``a`` in [0, 1],
    where ``tau_req`` balances gravity and the joint springs at ``q_desired``
    with the muscles isometric.
    """
    l, _, P = muscle_kinematics(model, packed, q_desired)
    params = packed.params
    l0 = params[:, 6]
    e = (l - l0) / l0
    f_pass = np.array([passive_force_kernel(pr[0], pr[1], pr[2], ei, 0.0) for pr, ei in zip(params, e)])
    f_len = np.array([force_length(pr[3], pr[4], li) for pr, li in zip(params, l)])
    rest = mb.GeneralizedState(np.asarray(q_desired, dtype=float), np.zeros(model.ndof))
    tau_req = mb.bias_forces(model, rest) - mb.spring_torques(model, rest)
    A = P * f_len[None, :]
    b = tau_req - P @ f_pass
    A_aug = np.vstack([A, np.sqrt(lam) * np.eye(packed.n)])
    b_aug = np.concatenate([b, np.zeros(packed.n)])
    sol = lsq_linear(A_aug, b_aug, bounds=(0.0, 1.0), method="bvls", tol=1e-12)
    a_ff = np.clip(sol.x, 0.0, 1.0)
    residual = float(np.linalg.norm(A @ a_ff - b))
    feasible = residual <= residual_tol
    if not feasible:
        log.warning("static balance infeasible at desired posture; residual %.3g N m", residual)
    return VoluntaryCommand(a_ff, SetpointSignal(e, np.zeros_like(e)), np.asarray(q_desired, float),
                            residual, feasible)


def reflex_update(
    setpoints: SetpointSignal,
    e: np.ndarray,
    edot: np.ndarray,
    a_ff: np.ndarray,
    gains: ReflexGains,
) -> np.ndarray:
    """Feedback activation added to the feedforward signal, clamped to [0, 1].

    Stretch beyond the setpoint raises activation:
    ``a = clamp(a_ff + k_p (e - e*) + k_v (edot - edot*), 0, 1)``.
    """
    return _reflex(np.asarray(a_ff, float), np.asarray(setpoints.e_star, float),
                   np.asarray(setpoints.edot_star, float), np.asarray(e, float),
                   np.asarray(edot, float), gains.k_p, gains.k_v)


# ---------------------------------------------------------------------------
# coupled simulation
# ---------------------------------------------------------------------------


@dataclass
class NeckTrace:
    t: np.ndarray
    q: np.ndarray
    skull: np.ndarray  # (n, 3) pitch/yaw/roll
    activations: np.ndarray
    max_saturation_s: float
    voluntary_updates: int
    reflex_updates: int


@dataclass
class HeadNeckSim:
    model: mb.SpineModel
    muscles: list[HillMuscle]
    gains: ReflexGains = field(default_factory=ReflexGains)
    weights: np.ndarray = field(default_factory=lambda: np.full(8, 1.0 / 8))
    lam: float = 1e-3

    def __post_init__(self) -> None:
        self.packed = pack_muscles(self.muscles)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.model.n_links - 1,):
            raise ConfigError("one distribution weight per movable joint required")
        self._lo = np.ascontiguousarray(self.model.joint_limits[:, 0])
        self._hi = np.ascontiguousarray(self.model.joint_limits[:, 1])
        self._cache: dict[tuple[float, float, float], VoluntaryCommand] = {}

    @classmethod
    def from_files(cls, spine: str | Path | None = None, muscles: str | Path | None = None,
                   sim: str | Path | dict | None = None) -> "HeadNeckSim":
        model = mb.build_spine(spine or data_path("spine.yaml"))
        mus = load_muscles(muscles or data_path("neck_muscles.yaml"),
                           [lk.name for lk in model.links], group="neck")
        cfg = sim if isinstance(sim, dict) else load_yaml(sim or data_path("sim.yaml"))
        ctl = cfg.get("neck_controller", {})
        gains = ReflexGains(float(ctl.get("k_p", 5.0)), float(ctl.get("k_v", 0.5)))
        weights = ctl.get("distribution_weights", [1.0] * (model.n_links - 1))
        return cls(model, mus, gains, np.asarray(weights, float), float(ctl.get("lambda", 1e-3)))

    def desired_posture(self, target: HeadPoseTarget) -> np.ndarray:
        return distribute_orientation(target, self.weights, self.model.q0)

    def command(self, target: HeadPoseTarget) -> VoluntaryCommand:
        key = (float(target.pitch), float(target.yaw), float(target.roll))
        if key not in self._cache:
            self._cache[key] = voluntary_update(self.model, self.packed,
                                                self.desired_posture(target), self.lam)
        return self._cache[key]

    def run(
        self,
        target: HeadPoseTarget,
        duration: float,
        state: mb.GeneralizedState | None = None,
    ) -> tuple[mb.GeneralizedState, NeckTrace]:
        """Closed-loop simulation; one trace sample per voluntary period."""
        state = self.model.rest_state() if state is None else state
        n_chunks = int(round(duration * VOLUNTARY_HZ))
        q = np.ascontiguousarray(state.q, dtype=float)
        qd = np.ascontiguousarray(state.qdot, dtype=float)
        sat_run = np.zeros(self.packed.n, dtype=np.int64)
        m = self.model
        ts, qs, skulls, acts = [0.0], [q.copy()], [mb.skull_orientation(m, q)], [np.zeros(self.packed.n)]
        max_sat = 0
        n_vol = 0
        for k in range(n_chunks):
            cmd = self.command(target)
            n_vol += 1
            q, qd, a, ms = _neck_steps(
                STEPS_PER_VOLUNTARY, q, qd, DT, m.parent, m.origins, m.coms, m.masses,
                m.inertias, m.gravity, m.subtree, m.k_s, m.k_d, m.q0, self._lo, self._hi,
                self.packed.via_link, self.packed.via_local, self.packed.start, self.packed.params,
                cmd.a_ff, cmd.setpoints.e_star, cmd.setpoints.edot_star,
                self.gains.k_p, self.gains.k_v, sat_run,
            )
            if not np.all(np.isfinite(q)):
                raise FloatingPointError("neck simulation diverged")
            max_sat = max(max_sat, int(ms))
            ts.append((k + 1) / VOLUNTARY_HZ)
            qs.append(q.copy())
            skulls.append(mb.skull_orientation(m, q))
            acts.append(a.copy())
        trace = NeckTrace(np.array(ts), np.array(qs), np.array(skulls), np.array(acts),
                          max_sat * DT, n_vol, n_vol * STEPS_PER_VOLUNTARY)
        return mb.GeneralizedState(q, qd), trace

    def muscle_strains(self, q: np.ndarray, qdot: np.ndarray | None = None):
        l, ldot, _ = muscle_kinematics(self.model, self.packed, q, qdot)
        l0 = self.packed.params[:, 6]
        return (l - l0) / l0, ldot / l0
