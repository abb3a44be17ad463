"""Layered soft-tissue model of the face.

Fascia nodes are joined by uniaxial springs, ``g = c (l - l_r) s`` with ``s``
the unit vector between the endpoints.  A facial muscle pulls every fascia
node in its zone of influence towards its bony attachment with magnitude
``a * peak * theta1(eps) * theta2(omega)``, where ``eps`` is the node's
position along the attachment->insertion line (0 at the attachment, 1 at the
insertion) and ``omega`` its distance from that line, both measured once in
the rest pose.  Nodes of the deepest layer are pinned to the skull, and the
mandible part of the skull follows the jaw rig.

Equilibria are found by explicit damped integration with the skull
penetration constraint applied after every step.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .config import ConfigError, data_path, load_yaml, require

log = logging.getLogger(__name__)

LAYER_NAMES = ("epidermis", "dermal-fatty", "fascia", "muscle")
REQUIRED_LANDMARKS = (
    "brow_inner_L", "brow_inner_R", "brow_outer_L", "brow_outer_R",
    "upper_lid_L", "upper_lid_R", "lower_lid_L", "lower_lid_R",
    "nose_tip", "lip_corner_L", "lip_corner_R",
    "upper_lip_center", "lower_lip_center", "chin",
)
N_FACE_MUSCLES = 52


@dataclass(frozen=True)
class FasciaNode:
    position: np.ndarray
    velocity: np.ndarray
    mass: float
    layer: str
    pinned: bool


@dataclass(frozen=True)
class SkinSpring:
    node_i: int
    node_j: int
    stiffness: float
    rest_length: float
    damping: float

    def __post_init__(self) -> None:
        if self.node_i == self.node_j:
            raise ConfigError("spring endpoints must differ")
        if not (self.stiffness > 0 and self.rest_length > 0):
            raise ConfigError("spring stiffness and rest length must be > 0")


@dataclass(frozen=True)
class FaceMuscleInsertion:
    name: str
    bone: str  # "cranium" or "mandible"
    attachment: np.ndarray  # rest position of the bony attachment
    insertion_node: int
    nodes: np.ndarray  # influenced fascia nodes
    eps: np.ndarray  # length ratio per node
    omega: np.ndarray  # distance from the fibre line per node, m
    width: float
    peak_force: float

    def __post_init__(self) -> None:
        if len(self.nodes) == 0:
            raise ConfigError(f"muscle {self.name!r} influences no fascia node")
        if not (np.all(np.isfinite(self.eps)) and np.all(np.isfinite(self.omega))):
            raise ConfigError(f"muscle {self.name!r} has non-finite influence weights")

    def weights(self) -> np.ndarray:
        return theta1(self.eps) * theta2(self.omega, self.width)


@dataclass(frozen=True)
class JawState:
    rotation: float = 0.0
    slide: float = 0.5
    twist: float = 0.5

    def __post_init__(self) -> None:
        for name in ("rotation", "slide", "twist"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"jaw {name} must lie in [0, 1], got {v}")

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "JawState":
        return cls(*(min(1.0, max(0.0, float(x))) for x in v[:3]))


@dataclass(frozen=True)
class JawTransform:
    R: np.ndarray
    t: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def rotate(self, vecs: np.ndarray) -> np.ndarray:
        return vecs @ self.R.T


@dataclass
class SolverSettings:
    dt: float = 2.5e-4
    mass_damping: float = 250.0  # 1/s
    kinetic_tol: float = 1e-8  # J, mean per free node
    force_tol: float = 1e-5  # N, max residual static force per free node


@dataclass
class FaceModel:
    x_rest: np.ndarray  # (N, 3)
    mass: np.ndarray  # (N,)
    layer: np.ndarray  # (N,) index into LAYER_NAMES
    pinned: np.ndarray  # (N,) bool
    spring_i: np.ndarray
    spring_j: np.ndarray
    spring_c: np.ndarray
    spring_rest: np.ndarray
    spring_damping: np.ndarray
    spring_class: list[str]
    skull_triangles: np.ndarray  # (T, 3)
    surface_quads: np.ndarray  # (Q, 4) epidermis faces for export
    mandible: np.ndarray  # bool mask over nodes
    landmarks: dict[str, int]
    insertions: list[FaceMuscleInsertion]
    anchor: np.ndarray  # (N,) skull node each free node is checked against (-1 for pinned)
    skull_normals: np.ndarray  # (N, 3) rest vertex normals, zero off the skull
    jaw_condyle: np.ndarray
    jaw_ranges: dict[str, tuple[float, float]]
    solver: SolverSettings = field(default_factory=SolverSettings)
    _packed: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.x_rest.shape[0]

    @property
    def n_springs(self) -> int:
        return self.spring_i.shape[0]

    @property
    def muscle_names(self) -> list[str]:
        return [m.name for m in self.insertions]

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.pinned)

    def node(self, i: int) -> FasciaNode:
        return FasciaNode(self.x_rest[i].copy(), np.zeros(3), float(self.mass[i]),
                          LAYER_NAMES[self.layer[i]], bool(self.pinned[i]))

    def spring(self, k: int) -> SkinSpring:
        return SkinSpring(int(self.spring_i[k]), int(self.spring_j[k]), float(self.spring_c[k]),
                          float(self.spring_rest[k]), float(self.spring_damping[k]))

    def muscle_index(self, name: str) -> int:
        try:
            return self.muscle_names.index(name)
        except ValueError:
            raise KeyError(f"unknown face muscle {name!r}") from None

    def packed_insertions(self) -> dict[str, np.ndarray]:
        """Flattened (node, muscle, weight) triples used by the compiled loop."""
        if not self._packed:
            nodes, mus, w = [], [], []
            for k, ins in enumerate(self.insertions):
                nodes.append(ins.nodes)
                mus.append(np.full(len(ins.nodes), k))
                w.append(ins.peak_force * ins.weights())
            self._packed.update(
                node=np.concatenate(nodes).astype(np.int64),
                muscle=np.concatenate(mus).astype(np.int64),
                weight=np.concatenate(w).astype(float),
                attach=np.array([m.attachment for m in self.insertions], dtype=float),
                on_mandible=np.array([m.bone == "mandible" for m in self.insertions]),
            )
        return self._packed


# ---------------------------------------------------------------------------
# scaling functions
# ---------------------------------------------------------------------------


def theta1(eps: np.ndarray) -> np.ndarray:
    """Length scaling: cosine ease from the attachment (0) to the insertion (1)."""
    eps = np.asarray(eps, dtype=float)
    inside = (eps >= 0.0) & (eps <= 1.0)
    return np.where(inside, 0.5 * (1.0 - np.cos(np.pi * eps)), 0.0)


def theta2(omega: np.ndarray, width: float) -> np.ndarray:
    """Width scaling: linear falloff to zero at ``width`` from the fibre line."""
    return np.maximum(0.0, 1.0 - np.asarray(omega, dtype=float) / width)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def read_obj(path: str | Path) -> tuple[np.ndarray, dict[str, list[list[int]]], dict[str, list[list[int]]]]:
    """Vertices, faces per group and line elements per group (0-based indices)."""
    verts: list[list[float]] = []
    faces: dict[str, list[list[int]]] = defaultdict(list)
    lines: dict[str, list[list[int]]] = defaultdict(list)
    group = "default"
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(v) for v in parts[1:4]])
                elif parts[0] == "g":
                    group = parts[1] if len(parts) > 1 else "default"
                elif parts[0] == "f":
                    faces[group].append([int(p.split("/")[0]) - 1 for p in parts[1:]])
                elif parts[0] == "l":
                    lines[group].append([int(p) - 1 for p in parts[1:]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: malformed record") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), dict(faces), dict(lines)


def _vertex_normals(x: np.ndarray, tris: np.ndarray, n_nodes: int) -> np.ndarray:
    a, b, c = x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]
    fn = np.cross(b - a, c - a)  # area weighted
    out = np.zeros((n_nodes, 3))
    for k in range(3):
        np.add.at(out, tris[:, k], fn)
    norm = np.linalg.norm(out, axis=1)
    nz = norm > 0
    out[nz] /= norm[nz, None]
    return out


def _influence(x_rest: np.ndarray, candidates: np.ndarray, attach: np.ndarray, insertion: np.ndarray,
               reach: float) -> tuple[np.ndarray, np.ndarray]:
    u = insertion - attach
    length = np.linalg.norm(u) * reach
    u = u / np.linalg.norm(u)
    rel = x_rest[candidates] - attach
    along = rel @ u
    eps = along / length
    omega = np.linalg.norm(rel - along[:, None] * u, axis=1)
    return eps, omega


def build_face(mesh: str | Path | None = None, muscle_map: str | Path | dict[str, Any] | None = None,
               sidecar: str | Path | dict[str, Any] | None = None) -> FaceModel:
    """Assemble and validate a face from an OBJ mesh, its sidecar and a muscle map.

    With no arguments the bundled canonical face is loaded.  The sidecar
    defaults to the mesh path with a ``.yaml`` suffix.
    """
    mesh = Path(mesh) if mesh is not None else data_path("face.obj")
    if sidecar is None:
        sidecar = mesh.with_suffix(".yaml")
    side = load_yaml(sidecar) if isinstance(sidecar, (str, Path)) else sidecar
    mm = muscle_map if muscle_map is not None else data_path("face_muscles.yaml")
    mdoc = load_yaml(mm) if isinstance(mm, (str, Path)) else mm

    x, faces, lines = read_obj(mesh)
    n = x.shape[0]
    if n == 0:
        raise ConfigError(f"{mesh}: no vertices")

    layer = np.full(n, -1, dtype=np.int64)
    for name, (start, count) in require(side, "layers", "face sidecar").items():
        if name not in LAYER_NAMES:
            raise ConfigError(f"unknown layer {name!r}")
        layer[int(start):int(start) + int(count)] = LAYER_NAMES.index(name)
    if np.any(layer < 0):
        raise ConfigError("every vertex must belong to a layer")
    pinned = layer == LAYER_NAMES.index(str(side.get("pinned_layer", "muscle")))
    mass_doc = require(side, "node_mass", "face sidecar")
    mass = np.array([float(mass_doc[LAYER_NAMES[k]]) for k in layer])
    if np.any(mass <= 0):
        raise ConfigError("node masses must be > 0")

    # springs
    classes = require(side, "spring_classes", "face sidecar")
    si, sj, cls_names = [], [], []
    for group, pairs in lines.items():
        if not group.startswith("spring_"):
            continue
        cls = group[len("spring_"):]
        if cls not in classes:
            raise ConfigError(f"spring group {group!r} has no class entry")
        for p in pairs:
            if len(p) != 2:
                raise ConfigError(f"spring in {group!r} must have two endpoints")
            i, j = p
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ConfigError(f"dangling spring ({i + 1}, {j + 1}) in {group!r}")
            si.append(i)
            sj.append(j)
            cls_names.append(cls)
    if not si:
        raise ConfigError("mesh defines no springs")
    si_a, sj_a = np.array(si, dtype=np.int64), np.array(sj, dtype=np.int64)
    c = np.array([float(classes[k]["stiffness"]) for k in cls_names])
    damp = np.array([float(classes[k].get("damping", 0.0)) for k in cls_names])
    rest = np.linalg.norm(x[sj_a] - x[si_a], axis=1)
    if np.any(c <= 0) or np.any(rest <= 0):
        raise ConfigError("springs need positive stiffness and rest length")

    free = ~pinned
    both_free = free[si_a] & free[sj_a]
    g = coo_matrix((np.ones(both_free.sum()), (si_a[both_free], sj_a[both_free])), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    if len(np.unique(comp[free])) != 1:
        raise ConfigError("spring graph over free nodes is not connected")
    touched = np.zeros(n, dtype=bool)
    touched[si_a] = True
    touched[sj_a] = True
    if not np.all(touched[free]):
        raise ConfigError("free node without springs")

    tris = np.array(faces.get("skull", []), dtype=np.int64).reshape(-1, 3)
    if len(tris) == 0:
        raise ConfigError("mesh has no skull triangles")
    quads = np.array(faces.get("epidermis", []), dtype=np.int64).reshape(-1, 4)
    normals = _vertex_normals(x, tris, n)
    skull_nodes = np.unique(tris)
    if not np.all(pinned[skull_nodes]):
        raise ConfigError("skull triangles must use pinned nodes")
    centroid = x[skull_nodes].mean(axis=0)
    if np.mean(np.sum(normals[skull_nodes] * (x[skull_nodes] - centroid), axis=1)) < 0:
        normals = -normals

    # each free node is kept outside the tangent plane of its nearest skull node
    anchor = np.full(n, -1, dtype=np.int64)
    fidx = np.flatnonzero(free)
    d2 = ((x[fidx, None, :] - x[None, skull_nodes, :]) ** 2).sum(axis=2)
    anchor[fidx] = skull_nodes[np.argmin(d2, axis=1)]

    marks = {str(k): int(v) for k, v in require(side, "landmarks", "face sidecar").items()}
    for name in REQUIRED_LANDMARKS:
        if name not in marks:
            raise ConfigError(f"missing landmark {name!r}")
    for name, v in marks.items():
        if not 0 <= v < n:
            raise ConfigError(f"landmark {name!r} refers to absent node {v}")

    mandible = np.zeros(n, dtype=bool)
    mnodes = np.asarray(side.get("mandible_nodes", []), dtype=np.int64)
    if np.any((mnodes < 0) | (mnodes >= n)) or not np.all(pinned[mnodes]):
        raise ConfigError("mandible nodes must be pinned nodes of the mesh")
    mandible[mnodes] = True

    insertions = _build_insertions(mdoc, side, x, layer, n)
    jaw = require(side, "jaw", "face sidecar")
    ranges = {k: tuple(float(v) for v in jaw[k]) for k in ("rotation_deg", "slide_mm", "twist_deg")}
    solver = SolverSettings(**{k: float(v) for k, v in side.get("solver", {}).items()})
    return FaceModel(
        x_rest=x, mass=mass, layer=layer, pinned=pinned,
        spring_i=si_a, spring_j=sj_a, spring_c=c, spring_rest=rest, spring_damping=damp,
        spring_class=cls_names, skull_triangles=tris, surface_quads=quads, mandible=mandible,
        landmarks=marks, insertions=insertions, anchor=anchor, skull_normals=normals,
        jaw_condyle=np.asarray(jaw["condyle"], dtype=float), jaw_ranges=ranges, solver=solver,
    )


def _build_insertions(mdoc: dict[str, Any], side: dict[str, Any], x: np.ndarray, layer: np.ndarray,
                      n: int) -> list[FaceMuscleInsertion]:
    target_layer = LAYER_NAMES.index(str(side.get("muscle_layer", "fascia")))
    grid = side.get("grid", {})
    cols = int(grid.get("cols", 0))
    regions = side.get("regions", {})
    layer_start = {name: int(v[0]) for name, v in side["layers"].items()}
    cand_all = np.flatnonzero(layer == target_layer)
    out = []
    names = set()
    for raw in require(mdoc, "muscles", "muscle map"):
        name = str(require(raw, "name", "muscle map"))
        if name in names:
            raise ConfigError(f"duplicate muscle name {name!r}")
        names.add(name)
        where = f"face muscle {name!r}"
        atts = require(raw, "attachments", where)
        bone_att = [a for a in atts if "bone" in a]
        node_att = [a for a in atts if "node" in a]
        if len(bone_att) != 1 or len(node_att) != 1:
            raise ConfigError(f"{where}: needs one bone attachment and one insertion node")
        bone = str(bone_att[0]["bone"])
        if bone not in ("cranium", "mandible"):
            raise ConfigError(f"{where}: unknown bone {bone!r}")
        node = int(node_att[0]["node"])
        if not 0 <= node < n:
            raise ConfigError(f"{where}: insertion names absent node {node}")
        if layer[node] != target_layer:
            raise ConfigError(f"{where}: insertion node {node} is not on the muscle layer")
        attach = np.asarray(bone_att[0]["point"], dtype=float)
        cand = cand_all
        region = str(raw.get("region", "any"))
        if region != "any" and cols:
            rows = (cand - layer_start[LAYER_NAMES[target_layer]]) // cols
            if region == "upper":
                cand = cand[rows >= int(regions["upper_min_row"])]
            elif region == "lower":
                cand = cand[rows <= int(regions["lower_max_row"])]
            else:
                raise ConfigError(f"{where}: unknown region {region!r}")
        width = float(require(raw, "width", where))
        eps, omega = _influence(x, cand, attach, x[node], float(raw.get("reach", 1.0)))
        w = theta1(eps) * theta2(omega, width)
        keep = w > 0
        out.append(FaceMuscleInsertion(
            name=name, bone=bone, attachment=attach, insertion_node=node,
            nodes=cand[keep], eps=eps[keep], omega=omega[keep], width=width,
            peak_force=float(require(raw, "peak_force", where)),
        ))
    if not out:
        raise ConfigError("muscle map registers no muscles")
    return out


def load_default_face() -> FaceModel:
    return build_face()


# ---------------------------------------------------------------------------
# forces
# ---------------------------------------------------------------------------


def spring_forces(model: FaceModel, x: np.ndarray) -> np.ndarray:
    """Elastic spring force on every node (N, 3)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("node positions must be finite")
    d = x[model.spring_j] - x[model.spring_i]
    l = np.linalg.norm(d, axis=1)
    s = np.zeros_like(d)
    nz = l > 0
    s[nz] = d[nz] / l[nz, None]
    g = (model.spring_c * (l - model.spring_rest))[:, None] * s
    f = np.zeros_like(x)
    np.add.at(f, model.spring_i, g)
    np.add.at(f, model.spring_j, -g)
    return f


def _jaw_attachments(model: FaceModel, jaw: JawTransform | None) -> np.ndarray:
    p = model.packed_insertions()
    att = p["attach"].copy()
    if jaw is not None:
        att[p["on_mandible"]] = jaw.apply(att[p["on_mandible"]])
    return att


def muscle_node_forces(model: FaceModel, activations: Sequence[float], x: np.ndarray | None = None,
                       jaw: JawState | JawTransform | None = None) -> np.ndarray:
    """Muscle force on every node (N, 3) for current positions ``x`` (rest by default)."""
    a = np.asarray(activations, dtype=float)
    if a.shape != (len(model.insertions),):
        raise ValueError(f"expected {len(model.insertions)} activations, got {a.shape}")
    x = model.x_rest if x is None else np.asarray(x, dtype=float)
    if isinstance(jaw, JawState):
        jaw = apply_jaw(model, jaw)
    p = model.packed_insertions()
    att = _jaw_attachments(model, jaw)
    d = att[p["muscle"]] - x[p["node"]]
    l = np.linalg.norm(d, axis=1)
    s = np.zeros_like(d)
    nz = l > 0
    s[nz] = d[nz] / l[nz, None]
    f = np.zeros_like(x)
    np.add.at(f, p["node"], (a[p["muscle"]] * p["weight"])[:, None] * s)
    return f


def apply_jaw(model: FaceModel, jaw: JawState) -> JawTransform:
    """Rigid mandible transform: pitch about the condyle axis, protrusion, yaw.

    0.5 is neutral for slide and twist, so ``JawState(0, 0.5, 0.5)`` is the
    identity.
    """
    lo, hi = model.jaw_ranges["rotation_deg"]
    pitch = np.deg2rad(lo + jaw.rotation * (hi - lo))
    lo, hi = model.jaw_ranges["slide_mm"]
    slide = 1e-3 * (lo + jaw.slide * (hi - lo))
    lo, hi = model.jaw_ranges["twist_deg"]
    yaw = np.deg2rad(lo + jaw.twist * (hi - lo))
    # opening lowers the chin: positive rotation about +x takes -y towards -z
    cp, sp = np.cos(pitch), np.sin(pitch)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    cy, sy = np.cos(yaw), np.sin(yaw)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    R = ry @ rx
    c = model.jaw_condyle
    t = c - R @ c + np.array([0.0, 0.0, slide])
    return JawTransform(R, t)


# ---------------------------------------------------------------------------
# settling
# ---------------------------------------------------------------------------


@njit(cache=True)
def _settle_kernel(x, v, mass, free, si, sj, sc, srest, sdamp, e_node, e_muscle, e_coef, attach,
                   anchor, anchor_pos, anchor_nrm, dt, gamma, max_steps, ke_tol, force_tol):
    n = x.shape[0]
    f = np.zeros((n, 3))  # static (spring + muscle) forces
    fd = np.zeros((n, 3))  # spring damping forces
    n_free = free.shape[0]
    steps = 0
    ke = 0.0
    res = 0.0
    converged = False
    while True:
        for i in range(n):
            for k in range(3):
                f[i, k] = 0.0
                fd[i, k] = 0.0
        for k in range(si.shape[0]):
            i = si[k]
            j = sj[k]
            d0 = x[j, 0] - x[i, 0]
            d1 = x[j, 1] - x[i, 1]
            d2 = x[j, 2] - x[i, 2]
            l2 = d0 * d0 + d1 * d1 + d2 * d2
            if l2 > 0.0:
                l = np.sqrt(l2)
                g = sc[k] * (l - srest[k]) / l
                f[i, 0] += g * d0
                f[i, 1] += g * d1
                f[i, 2] += g * d2
                f[j, 0] -= g * d0
                f[j, 1] -= g * d1
                f[j, 2] -= g * d2
                rv = (v[j, 0] - v[i, 0]) * d0 + (v[j, 1] - v[i, 1]) * d1 + (v[j, 2] - v[i, 2]) * d2
                h = sdamp[k] * rv / l2
                fd[i, 0] += h * d0
                fd[i, 1] += h * d1
                fd[i, 2] += h * d2
                fd[j, 0] -= h * d0
                fd[j, 1] -= h * d1
                fd[j, 2] -= h * d2
        for k in range(e_node.shape[0]):
            i = e_node[k]
            m = e_muscle[k]
            d0 = attach[m, 0] - x[i, 0]
            d1 = attach[m, 1] - x[i, 1]
            d2 = attach[m, 2] - x[i, 2]
            l = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if l > 0.0:
                g = e_coef[k] / l
                f[i, 0] += g * d0
                f[i, 1] += g * d1
                f[i, 2] += g * d2
        ke = 0.0
        res = 0.0
        for q in range(n_free):
            i = free[q]
            ke += 0.5 * mass[i] * (v[i, 0] ** 2 + v[i, 1] ** 2 + v[i, 2] ** 2)
            f0 = f[i, 0]
            f1 = f[i, 1]
            f2 = f[i, 2]
            a = anchor[i]
            sd = ((x[i, 0] - anchor_pos[a, 0]) * anchor_nrm[a, 0]
                  + (x[i, 1] - anchor_pos[a, 1]) * anchor_nrm[a, 1]
                  + (x[i, 2] - anchor_pos[a, 2]) * anchor_nrm[a, 2])
            if sd <= 1e-12:
                # a node resting on the skull: the inward push is carried by the contact
                fn = f0 * anchor_nrm[a, 0] + f1 * anchor_nrm[a, 1] + f2 * anchor_nrm[a, 2]
                if fn < 0.0:
                    f0 -= fn * anchor_nrm[a, 0]
                    f1 -= fn * anchor_nrm[a, 1]
                    f2 -= fn * anchor_nrm[a, 2]
            r = np.sqrt(f0 * f0 + f1 * f1 + f2 * f2)
            if r > res:
                res = r
        ke /= n_free
        if ke < ke_tol and res < force_tol:
            converged = True
            break
        if steps >= max_steps:
            break
        for q in range(n_free):
            i = free[q]
            for k in range(3):
                v[i, k] += dt * ((f[i, k] + fd[i, k]) / mass[i] - gamma * v[i, k])
                x[i, k] += dt * v[i, k]
            a = anchor[i]
            sd = ((x[i, 0] - anchor_pos[a, 0]) * anchor_nrm[a, 0]
                  + (x[i, 1] - anchor_pos[a, 1]) * anchor_nrm[a, 1]
                  + (x[i, 2] - anchor_pos[a, 2]) * anchor_nrm[a, 2])
            if sd < 0.0:
                vn = v[i, 0] * anchor_nrm[a, 0] + v[i, 1] * anchor_nrm[a, 1] + v[i, 2] * anchor_nrm[a, 2]
                for k in range(3):
                    x[i, k] -= sd * anchor_nrm[a, k]
                if vn < 0.0:
                    for k in range(3):
                        v[i, k] -= vn * anchor_nrm[a, k]
        steps += 1
    return steps, converged, ke, res


@dataclass
class SettleResult:
    x: np.ndarray
    v: np.ndarray
    steps: int
    time: float
    converged: bool
    kinetic: float  # mean kinetic energy per free node, J
    residual: float  # max static force on a free node, N


class SettleError(RuntimeError):
    def __init__(self, message: str, result: SettleResult):
        super().__init__(message)
        self.result = result


def pinned_positions(model: FaceModel, jaw: JawTransform) -> tuple[np.ndarray, np.ndarray]:
    """Skull node positions and normals with the mandible transformed."""
    x = model.x_rest.copy()
    nrm = model.skull_normals.copy()
    m = model.mandible
    x[m] = jaw.apply(x[m])
    nrm[m] = jaw.rotate(nrm[m])
    return x, nrm


def skull_signed_distance(model: FaceModel, x: np.ndarray, jaw: JawState | None = None) -> np.ndarray:
    """Distance of every free node above the tangent plane of its skull anchor."""
    tr = apply_jaw(model, jaw or JawState())
    sk, nrm = pinned_positions(model, tr)
    free = model.free
    a = model.anchor[free]
    return np.sum((x[free] - sk[a]) * nrm[a], axis=1)


def settle(model: FaceModel, activations: Sequence[float], jaw: JawState | None = None,
           max_time: float = 1.0, x0: np.ndarray | None = None, raise_on_failure: bool = True) -> SettleResult:
    """Integrate the damped tissue to static equilibrium.

    Converged when the mean kinetic energy per free node drops below
    ``kinetic_tol`` and no free node carries a residual force above
    ``force_tol``.  Starts from the rest shape unless ``x0`` is given.
    """
    a = np.asarray(activations, dtype=float)
    if a.shape != (len(model.insertions),):
        raise ValueError(f"expected {len(model.insertions)} activations, got {a.shape}")
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ValueError("activations must lie in [0, 1]")
    if max_time <= 0:
        raise ValueError("max_time must be > 0")
    jaw = jaw or JawState()
    tr = apply_jaw(model, jaw)
    sk, nrm = pinned_positions(model, tr)
    x = model.x_rest.copy() if x0 is None else np.array(x0, dtype=float)
    x[model.pinned] = sk[model.pinned]
    v = np.zeros_like(x)
    p = model.packed_insertions()
    att = _jaw_attachments(model, tr)
    s = model.solver
    max_steps = int(np.ceil(max_time / s.dt))
    steps, ok, ke, res = _settle_kernel(
        x, v, model.mass, model.free, model.spring_i, model.spring_j, model.spring_c, model.spring_rest,
        model.spring_damping, p["node"], p["muscle"], a[p["muscle"]] * p["weight"], att,
        model.anchor, sk, nrm, s.dt, s.mass_damping, max_steps, s.kinetic_tol, s.force_tol,
    )
    result = SettleResult(x, v, int(steps), steps * s.dt, bool(ok), float(ke), float(res))
    if not ok:
        msg = (f"settle did not converge within {max_time} s: mean kinetic energy {ke:.3e} J, "
               f"residual force {res:.3e} N")
        if raise_on_failure:
            raise SettleError(msg, result)
        log.warning(msg)
    return result


def landmark_positions(model: FaceModel, x: np.ndarray) -> dict[str, np.ndarray]:
    return {k: x[i] for k, i in model.landmarks.items()}


def write_obj(model: FaceModel, x: np.ndarray, path: str | Path) -> None:
    """Export the epidermis surface of one equilibrium as an OBJ file."""
    lines = [f"v {p[0]:.7f} {p[1]:.7f} {p[2]:.7f}" for p in x]
    lines.append("g epidermis")
    lines += ["f " + " ".join(str(i + 1) for i in q) for q in model.surface_quads]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
