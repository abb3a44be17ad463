"""Hill-type muscle actuators.

Muscle tension is ``f_m = f_P + f_C`` with

* passive exponential spring  ``f_P = max(0, k_s (exp(k_c e) - 1) + k_d edot)``
* contractile element         ``f_C = a F_l(l) F_v(ldot)``,
  ``F_l = max(0, k_max (l - l_m))`` and ``F_v = max(0, 1 + min(ldot, 0) / v_m)``

where ``e = (l - l_0) / l_0`` and ``edot = ldot / l_0``.  Paths are straight
polylines through attachments fixed to bone links or to soft-tissue nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np
from numba import njit

from .config import ConfigError, load_yaml, require


@dataclass(frozen=True)
class HillParams:
    k_s: float  # N
    k_c: float
    k_d: float  # N s
    k_max: float  # N/m
    l_m: float  # m
    v_m: float  # m/s
    l_0: float  # m

    def __post_init__(self) -> None:
        for name in ("k_s", "k_c", "k_d", "k_max", "v_m", "l_0"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"Hill parameter {name} must be > 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.k_s, self.k_c, self.k_d, self.k_max, self.l_m, self.v_m, self.l_0])


@dataclass(frozen=True)
class Attachment:
    """A via point fixed in a bone link frame (``link``) or to a tissue node (``node``)."""

    link: int | None = None
    local: tuple[float, float, float] = (0.0, 0.0, 0.0)
    node: int | None = None

    def __post_init__(self) -> None:
        if (self.link is None) == (self.node is None):
            raise ConfigError("an attachment binds to exactly one of a link or a node")


@dataclass(frozen=True)
class MusclePath:
    via_points: tuple[Attachment, ...]

    def __post_init__(self) -> None:
        if len(self.via_points) < 2:
            raise ConfigError("a muscle path needs at least two via points")


@dataclass
class MuscleState:
    l: float
    ldot: float
    a: float = 0.0

    def __post_init__(self) -> None:
        self.a = min(1.0, max(0.0, float(self.a)))

    def strain(self, params: HillParams) -> float:
        return (self.l - params.l_0) / params.l_0

    def strain_rate(self, params: HillParams) -> float:
        return self.ldot / params.l_0


@dataclass(frozen=True)
class HillMuscle:
    name: str
    path: MusclePath
    params: HillParams
    group: str = "neck"


class KinematicPose(Protocol):
    def link_point(self, link: int, local: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class NodePose:
    """Link pose plus soft-tissue node positions/velocities for node-bound via points."""

    links: KinematicPose | None
    x: np.ndarray
    v: np.ndarray

    def link_point(self, link: int, local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.links is None:
            raise ValueError("pose has no link frames")
        return self.links.link_point(link, local)

    def node(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.x[i], self.v[i]


def _resolve(att: Attachment, pose: Any) -> tuple[np.ndarray, np.ndarray]:
    try:
        if att.link is not None:
            return pose.link_point(att.link, np.asarray(att.local, dtype=float))
        return pose.node(att.node)
    except (AttributeError, IndexError) as exc:
        raise ValueError(f"cannot resolve attachment {att} in this pose") from exc


def muscle_geometry(path: MusclePath, pose: Any) -> tuple[float, float]:
    """Length and lengthening rate of a polyline path.

    ``ldot`` projects the via-point velocities onto each segment direction.
    """
    pts = [_resolve(a, pose) for a in path.via_points]
    l = 0.0
    ldot = 0.0
    for (x0, v0), (x1, v1) in zip(pts[:-1], pts[1:]):
        d = x1 - x0
        seg = float(np.linalg.norm(d))
        l += seg
        if seg > 0.0:
            ldot += float(d @ (v1 - v0)) / seg
    return l, ldot


def path_length(path: MusclePath, pose: Any) -> float:
    return muscle_geometry(path, pose)[0]


# ---------------------------------------------------------------------------
# force laws (scalar, numba-compiled so the simulation loops can share them)
# ---------------------------------------------------------------------------


@njit(cache=True)
def passive_force_kernel(k_s, k_c, k_d, e, edot):
    return max(0.0, k_s * (np.exp(k_c * e) - 1.0) + k_d * edot)


@njit(cache=True)
def force_length(k_max, l_m, l):
    return max(0.0, k_max * (l - l_m))


@njit(cache=True)
def force_velocity(v_m, ldot):
    return max(0.0, 1.0 + min(ldot, 0.0) / v_m)


@njit(cache=True)
def contractile_force_kernel(a, k_max, l_m, v_m, l, ldot):
    return a * force_length(k_max, l_m, l) * force_velocity(v_m, ldot)


def passive_force(params: HillParams, state: MuscleState) -> float:
    return passive_force_kernel(
        params.k_s, params.k_c, params.k_d, state.strain(params), state.strain_rate(params)
    )


def contractile_force(params: HillParams, state: MuscleState) -> float:
    return contractile_force_kernel(
        state.a, params.k_max, params.l_m, params.v_m, state.l, state.ldot
    )


def total_forces(
    muscles: Sequence[HillMuscle],
    states: Sequence[MuscleState],
) -> np.ndarray:
    """Tension ``f_P + f_C`` of every muscle, in registry order."""
    if len(muscles) != len(states):
        raise ValueError("one state per muscle required")
    return np.array(
        [passive_force(m.params, s) + contractile_force(m.params, s) for m, s in zip(muscles, states)],
        dtype=float,
    )


def muscle_states(
    muscles: Sequence[HillMuscle], pose: Any, activations: Sequence[float] | None = None
) -> list[MuscleState]:
    acts = np.zeros(len(muscles)) if activations is None else np.asarray(activations, dtype=float)
    out = []
    for m, a in zip(muscles, acts):
        l, ldot = muscle_geometry(m.path, pose)
        out.append(MuscleState(l, ldot, float(a)))
    return out


# ---------------------------------------------------------------------------
# muscle definition documents
# ---------------------------------------------------------------------------


def parse_hill(raw: dict[str, Any], where: str) -> HillParams:
    try:
        return HillParams(**{k: float(raw[k]) for k in ("k_s", "k_c", "k_d", "k_max", "l_m", "v_m", "l_0")})
    except KeyError as exc:
        raise ConfigError(f"{where}: missing Hill parameter {exc.args[0]}") from exc


def parse_attachment(raw: dict[str, Any], link_index: dict[str, int] | None, where: str) -> Attachment:
    if "link" in raw:
        if link_index is None or raw["link"] not in link_index:
            raise ConfigError(f"{where}: unknown link {raw.get('link')!r}")
        local = tuple(float(v) for v in require(raw, "point", where))
        if len(local) != 3:
            raise ConfigError(f"{where}: attachment point must have 3 coordinates")
        return Attachment(link=link_index[raw["link"]], local=local)
    if "node" in raw:
        return Attachment(node=int(raw["node"]))
    raise ConfigError(f"{where}: attachment needs 'link' or 'node'")


def load_muscles(
    path: str | Path | dict[str, Any],
    link_names: Sequence[str] | None = None,
    group: str | None = None,
) -> list[HillMuscle]:
    """Read a muscle definition document; keeps entries of ``group`` when given."""
    doc = load_yaml(path) if isinstance(path, (str, Path)) else path
    link_index = None if link_names is None else {n: i for i, n in enumerate(link_names)}
    muscles = []
    seen = set()
    for raw in require(doc, "muscles", "muscle document"):
        name = str(require(raw, "name", "muscle"))
        if name in seen:
            raise ConfigError(f"duplicate muscle name {name!r}")
        seen.add(name)
        g = str(raw.get("group", "neck"))
        if group is not None and g != group:
            continue
        where = f"muscle '{name}'"
        atts = tuple(parse_attachment(a, link_index, where) for a in require(raw, "attachments", where))
        hill = parse_hill(require(raw, "hill", where), where)
        muscles.append(HillMuscle(name, MusclePath(atts), hill, g))
    return muscles


@dataclass(frozen=True)
class PackedMuscles:
    """Flat arrays describing link-bound muscles for the compiled loops."""

    via_link: np.ndarray  # (n_via,)
    via_local: np.ndarray  # (n_via, 3)
    start: np.ndarray  # (n_muscles + 1,) offsets into the via arrays
    params: np.ndarray  # (n_muscles, 7) k_s, k_c, k_d, k_max, l_m, v_m, l_0

    @property
    def n(self) -> int:
        return self.params.shape[0]


def pack_muscles(muscles: Sequence[HillMuscle]) -> PackedMuscles:
    links, locals_, start = [], [], [0]
    for m in muscles:
        for a in m.path.via_points:
            if a.link is None:
                raise ValueError(f"muscle {m.name}: node-bound via points cannot be packed")
            links.append(a.link)
            locals_.append(a.local)
        start.append(len(links))
    return PackedMuscles(
        np.array(links, dtype=np.int64),
        np.array(locals_, dtype=float).reshape(-1, 3),
        np.array(start, dtype=np.int64),
        np.array([m.params.as_array() for m in muscles], dtype=float).reshape(-1, 7),
    )
