"""Procedural canonical face: layered soft tissue over a parametric skull.

The face is a (rows x cols) grid in head-surface coordinates (azimuth
``theta``, elevation ``phi``) repeated over four node layers, outermost first:
epidermis, dermal-fatty, fascia and the muscle layer, whose nodes are bound
to the skull.  Every output is exactly mirror-symmetric about x = 0.

Outputs (see :func:`write_face`):

* ``face.obj``            vertices, epidermis quads (``g epidermis``), skull
                          triangles (``g skull``) and springs as line elements
                          (``g spring_<class>``)
* ``face.yaml``           sidecar: layers, masses, spring classes, jaw rig,
                          mandible nodes, landmarks, solver settings
* ``face_muscles.yaml``   26 muscle pairs (muscle map)
* ``au_oracle.yaml``      landmark-distance AU estimator
* ``expressions.yaml``    per-expression muscle weight sets
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np

from .config import dump_yaml

ROWS, COLS = 25, 27
THETA = np.linspace(-75.0, 75.0, COLS)  # deg, + towards the subject's left
PHI = np.linspace(-55.0, 50.0, ROWS)  # deg
LAYERS = ("epidermis", "dermal-fatty", "fascia", "muscle")
DEPTHS = (0.012, 0.008, 0.004, 0.0)  # m above the skull surface
SEMI_AXES = np.array([0.072, 0.105, 0.095])
MID = COLS // 2
MOUTH_LOWER_ROW = 7  # rows <= 7 belong to the lower lip / mandible
SLIT_COLS = (10, 16)  # mouth corners; springs strictly between them are cut

HEAD_ORIGIN_IN_SKULL = [0.0, 0.075, 0.0]
CONDYLE = [0.0, -0.012, -0.012]


def _bump(t, p, t0, p0, st, sp, h):
    return h * np.exp(-(((t - t0) / st) ** 2) - ((p - p0) / sp) ** 2)


def _relief(t, p):
    """Radial skull relief (m): nose, brow ridge, cheekbones, chin."""
    r = _bump(t, p, 0.0, -1.0, 6.0, 10.0, 0.022)
    for s in (1.0, -1.0):
        r = r + _bump(t, p, s * 17.0, 22.0, 12.0, 4.0, 0.003)
        r = r + _bump(t, p, s * 30.0, 2.0, 9.0, 7.0, 0.004)
    r = r + _bump(t, p, 0.0, -44.0, 14.0, 7.0, 0.006)
    return r


def skull_point(theta_deg, phi_deg) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    p = np.deg2rad(phi_deg)
    base = np.stack(
        [SEMI_AXES[0] * np.cos(p) * np.sin(t), SEMI_AXES[1] * np.sin(p), SEMI_AXES[2] * np.cos(p) * np.cos(t)],
        axis=-1,
    )
    n = base / SEMI_AXES**2
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return base + n * _relief(theta_deg, phi_deg)[..., None]


def _surface_normal(theta_deg, phi_deg, h=1e-3) -> np.ndarray:
    dt = skull_point(theta_deg + h, phi_deg) - skull_point(theta_deg - h, phi_deg)
    dp = skull_point(theta_deg, phi_deg + h) - skull_point(theta_deg, phi_deg - h)
    n = np.cross(dt, dp)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _mirror(arr: np.ndarray) -> np.ndarray:
    """Overwrite the right half (theta < 0) with the mirrored left half."""
    out = arr.copy()
    for c in range(MID):
        out[:, c] = arr[:, COLS - 1 - c]
        out[:, c, 0] = -arr[:, COLS - 1 - c, 0]
    out[:, MID, 0] = 0.0
    return out


def node_index(layer: int, row: int, col: int) -> int:
    return layer * ROWS * COLS + row * COLS + col


def grid_positions() -> np.ndarray:
    T, P = np.meshgrid(THETA, PHI)
    skull = skull_point(T, P)
    normal = _surface_normal(T, P)
    layers = [_mirror(skull + d * normal) for d in DEPTHS]
    return np.concatenate([l.reshape(-1, 3) for l in layers], axis=0)


def _cuts_mouth(r1, c1, r2, c2) -> bool:
    if min(r1, r2) > MOUTH_LOWER_ROW or max(r1, r2) <= MOUTH_LOWER_ROW:
        return False
    mid = 0.5 * (c1 + c2)
    return SLIT_COLS[0] < mid < SLIT_COLS[1]


SPRING_CLASSES = {
    # name: (stiffness N/m, damping N s/m)
    "epidermis": (60.0, 0.02),
    "epidermis_shear": (30.0, 0.01),
    "dermal": (20.0, 0.01),
    "dermal_shear": (10.0, 0.005),
    "fascia": (40.0, 0.02),
    "fascia_shear": (20.0, 0.01),
    "epi_dermal": (40.0, 0.02),
    "epi_dermal_cross": (20.0, 0.01),
    "dermal_fascia": (40.0, 0.02),
    "dermal_fascia_cross": (20.0, 0.01),
    "muscle_layer": (30.0, 0.02),
    "muscle_layer_cross": (15.0, 0.01),
}
_INTRA = ("epidermis", "dermal", "fascia")
_INTER = ("epi_dermal", "dermal_fascia", "muscle_layer")


def springs() -> dict[str, list[tuple[int, int]]]:
    out: dict[str, list[tuple[int, int]]] = {k: [] for k in SPRING_CLASSES}

    def add(cls, a, b):
        (l1, r1, c1), (l2, r2, c2) = a, b
        if not (0 <= r2 < ROWS and 0 <= c2 < COLS):
            return
        if _cuts_mouth(r1, c1, r2, c2):
            return
        out[cls].append((node_index(l1, r1, c1), node_index(l2, r2, c2)))

    for L in range(3):
        name = _INTRA[L]
        for r in range(ROWS):
            for c in range(COLS):
                add(name, (L, r, c), (L, r, c + 1))
                add(name, (L, r, c), (L, r + 1, c))
                add(name + "_shear", (L, r, c), (L, r + 1, c + 1))
                if c + 1 < COLS:
                    add(name + "_shear", (L, r, c + 1), (L, r + 1, c))
        name = _INTER[L]
        for r in range(ROWS):
            for c in range(COLS):
                add(name, (L, r, c), (L + 1, r, c))
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    add(name + "_cross", (L, r, c), (L + 1, r + dr, c + dc))
    return out


# ---------------------------------------------------------------------------
# landmarks, muscles, AU oracle, expressions
# ---------------------------------------------------------------------------

# (layer, row, col) for the subject's left side; right side mirrors the column
_LANDMARKS_L = {
    "brow_inner": (0, 18, 15),
    "brow_mid": (0, 18, 16),
    "brow_outer": (0, 18, 17),
    "upper_lid": (0, 16, 16),
    "lower_lid": (0, 14, 16),
    "eye_inner": (0, 15, 15),
    "eye_outer": (0, 15, 17),
    "nose_wing": (0, 11, 14),
    "upper_lip": (0, 8, 15),
    "lower_lip": (0, 7, 15),
    "lip_corner": (0, 8, 16),
    "cheek": (0, 13, 18),
    "skull_orbit_floor": (3, 13, 16),
    "skull_zygoma": (3, 13, 19),
    "skull_molar": (3, 8, 19),
    "skull_mandible": (3, 3, 17),
}
_LANDMARKS_MID = {
    "nose_tip": (0, 12, MID),
    "upper_lip_center": (0, 8, MID),
    "lower_lip_center": (0, 7, MID),
    "chin": (0, 2, MID),
    "forehead": (0, 22, MID),
    "skull_nasion": (3, 16, MID),
    "skull_menton": (3, 1, MID),
}


def landmarks() -> dict[str, int]:
    out = {}
    for name, (L, r, c) in _LANDMARKS_L.items():
        out[f"{name}_L"] = node_index(L, r, c)
        out[f"{name}_R"] = node_index(L, r, COLS - 1 - c)
    for name, (L, r, c) in _LANDMARKS_MID.items():
        out[name] = node_index(L, r, c)
    return dict(sorted(out.items()))


# name: (bone, attachment (theta, phi, depth below the skull in m, negative lifts it), insertion (theta, phi),
#        width m, peak force N per node, region)
_MUSCLES = [
    ("frontalis_inner", "cranium", (8, 48, -0.025), (8, 23), 0.014, 0.12, "upper"),
    ("frontalis_major", "cranium", (17, 48, -0.025), (17, 24), 0.014, 0.12, "upper"),
    ("frontalis_outer", "cranium", (27, 47, -0.025), (27, 22), 0.014, 0.12, "upper"),
    ("corrugator", "cranium", (3, 15, 0.0), (17, 23), 0.012, 0.16, "upper"),
    ("depressor_supercilii", "cranium", (6, 9, 0.0), (9, 22), 0.008, 0.10, "upper"),
    ("procerus", "cranium", (1, 4, 0.0), (3, 20), 0.008, 0.10, "upper"),
    ("orbicularis_oculi_upper", "cranium", (16, 11, 0.0), (16, 17), 0.010, 0.25, "upper"),
    ("orbicularis_oculi_lower", "cranium", (16, 11, 0.0), (17, 5), 0.010, 0.20, "upper"),
    ("orbicularis_oculi_orbital", "cranium", (9, 15, 0.0), (29, 1), 0.012, 0.12, "upper"),
    ("levator_palpebrae", "cranium", (16, 22, 0.0), (16, 15), 0.010, 0.25, "upper"),
    ("levator_labii_alaeque_nasi", "cranium", (4, 15, 0.0), (6, -8), 0.008, 0.12, "upper"),
    ("nasalis", "cranium", (11, 4, 0.0), (5, -5), 0.007, 0.10, "upper"),
    ("levator_labii_superioris", "cranium", (14, 5, 0.0), (10, -18), 0.009, 0.12, "upper"),
    ("zygomatic_minor", "cranium", (25, 1, 0.0), (13, -18), 0.008, 0.12, "upper"),
    ("zygomatic_major", "cranium", (42, 4, -0.018), (17, -20), 0.010, 0.16, "upper"),
    ("levator_anguli_oris", "cranium", (12, -4, 0.004), (17, -19), 0.008, 0.12, "upper"),
    ("risorius", "cranium", (40, -22, -0.012), (17, -21), 0.010, 0.28, "any"),
    ("buccinator", "cranium", (36, -22, 0.015), (17, -21), 0.009, 0.14, "any"),
    ("depressor_anguli_oris", "mandible", (23, -46, 0.0), (17, -22), 0.010, 0.14, "lower"),
    ("depressor_labii_inferioris", "mandible", (9, -46, 0.0), (7, -26), 0.009, 0.12, "lower"),
    ("mentalis", "mandible", (3, -32, 0.004), (3, -46), 0.009, 0.12, "lower"),
    ("platysma", "mandible", (32, -56, 0.0), (17, -25), 0.012, 0.12, "lower"),
    ("orbicularis_oris_upper", "cranium", (0, -19, 0.003), (15, -20), 0.010, 0.14, "upper"),
    ("orbicularis_oris_lower", "mandible", (0, -26, 0.003), (15, -25), 0.010, 0.14, "lower"),
    ("incisivus_superior", "cranium", (4, -15, 0.004), (16, -21), 0.007, 0.10, "upper"),
    ("incisivus_inferior", "mandible", (4, -30, 0.004), (16, -24), 0.007, 0.10, "lower"),
]


MIN_WIDTH = 0.010
FORCE_SCALE = 3.0
REACH = 1.15  # influence extends slightly past the insertion node


def _nearest_fascia_node(theta, phi, pos) -> int:
    target = skull_point(np.array(theta, float), np.array(phi, float))
    fascia = pos[2 * ROWS * COLS: 3 * ROWS * COLS]
    d = np.linalg.norm(fascia - target, axis=1)
    return int(2 * ROWS * COLS + np.argmin(d))


def _mirror_node(idx: int) -> int:
    L, rem = divmod(idx, ROWS * COLS)
    r, c = divmod(rem, COLS)
    return node_index(L, r, COLS - 1 - c)


def muscles_document(pos: np.ndarray) -> dict[str, Any]:
    entries = []
    for name, bone, (at, ap, depth), (it, ip), width, peak, region in _MUSCLES:
        width = max(width, MIN_WIDTH)
        peak = round(peak * FORCE_SCALE, 6)
        a = skull_point(np.array(float(at)), np.array(float(ap)))
        a = a - depth * _surface_normal(np.array(float(at)), np.array(float(ap)))
        ins = _nearest_fascia_node(float(it), float(ip), pos)
        for side in ("L", "R"):
            point = [float(a[0]), float(a[1]), float(a[2])]
            node = ins
            if side == "R":
                point[0] = -point[0]
                node = _mirror_node(ins)
            entries.append({
                "name": f"{name}_{side}",
                "group": "face",
                "attachments": [
                    {"bone": bone, "point": [round(v, 7) for v in point]},
                    {"node": int(node)},
                ],
                "width": width,
                "peak_force": peak,
                "reach": REACH,
                "region": region,
            })
    return {
        "description": "26 facial muscle pairs; force on a fascia node = a * peak_force * "
                       "theta1(length ratio) * theta2(width distance)",
        "muscles": entries,
    }


def _au_terms() -> dict[str, list[tuple[str, str, float, int]]]:
    # (landmark a, landmark b, gain AU per mm, sign)
    both = lambda a, b, g, s: [(f"{a}_L", f"{b}_L", g, s), (f"{a}_R", f"{b}_R", g, s)]  # noqa: E731
    return {
        "AU01": both("brow_inner", "skull_orbit_floor", 0.6, 1),
        "AU02": both("brow_outer", "skull_zygoma", 0.6, 1),
        "AU04": [("brow_inner_L", "skull_nasion", 0.8, -1), ("brow_inner_R", "skull_nasion", 0.8, -1)]
        + both("brow_mid", "skull_orbit_floor", 0.4, -1),
        "AU05": both("upper_lid", "skull_orbit_floor", 0.8, 1),
        "AU06": both("cheek", "skull_orbit_floor", 0.8, -1),
        "AU07": both("lower_lid", "skull_orbit_floor", 0.8, 1),
        "AU09": [("nose_wing_L", "skull_nasion", 0.8, -1), ("nose_wing_R", "skull_nasion", 0.8, -1)],
        "AU10": [("upper_lip_L", "skull_nasion", 0.6, -1), ("upper_lip_R", "skull_nasion", 0.6, -1)],
        "AU12": both("lip_corner", "skull_zygoma", 0.6, -1),
        "AU14": both("lip_corner", "skull_molar", 0.4, -1),
        "AU15": both("lip_corner", "skull_mandible", 0.6, -1),
        "AU17": [("chin", "lower_lip_center", 1.0, -1)],
        "AU20": [("lip_corner_L", "lip_corner_R", 0.4, 1)],
        "AU23": [("lip_corner_L", "lip_corner_R", 0.4, -1), ("upper_lip_L", "upper_lip_R", 0.4, -1),
                 ("lower_lip_L", "lower_lip_R", 0.4, -1)],
        "AU25": [("upper_lip_center", "lower_lip_center", 0.12, 1)],
        "AU26": [("skull_nasion", "skull_menton", 0.12, 1)],
        "AU45": both("upper_lid", "lower_lid", 0.8, -1),
    }


DETECTION_THRESHOLD = 0.2  # AU; small passive drag of distant tissue stays below it


def au_oracle_document(pos: np.ndarray, marks: dict[str, int]) -> dict[str, Any]:
    # measure on the coordinates as written to the OBJ so the rest mesh scores exactly zero
    pos = np.array([[float(_fmt(v)) for v in p] for p in pos])
    aus = {}
    for au, terms in _au_terms().items():
        rows = []
        for a, b, gain, sign in terms:
            d = float(np.linalg.norm(pos[marks[a]] - pos[marks[b]]))
            rows.append({"pair": [a, b], "rest_distance": d, "gain": gain * 1000.0, "sign": sign})
        aus[au] = rows
    return {
        "description": "raw AU = max(0, sum(sign * gain * (distance - rest_distance)) - detection_threshold), "
                       "gain in AU/m",
        "detection_threshold": DETECTION_THRESHOLD,
        "aus": aus,
    }


def expressions_document() -> dict[str, Any]:
    sets = {
        "Joy": ({"zygomatic_major": 1.0, "orbicularis_oculi_orbital": 0.7, "levator_anguli_oris": 0.4,
                 "zygomatic_minor": 0.3, "orbicularis_oculi_lower": 0.3, "orbicularis_oculi_upper": 0.3,
                 "buccinator": 0.3}, True),
        "Sadness": ({"frontalis_inner": 0.8, "corrugator": 0.5, "depressor_anguli_oris": 0.9,
                     "mentalis": 0.6, "depressor_supercilii": 0.3, "platysma": 0.2}, False),
        "Anger": ({"corrugator": 0.9, "depressor_supercilii": 0.7, "procerus": 0.6,
                   "orbicularis_oculi_upper": 0.3, "orbicularis_oculi_lower": 0.6,
                   "levator_palpebrae": 0.5, "orbicularis_oris_upper": 0.7, "orbicularis_oris_lower": 0.7,
                   "incisivus_superior": 0.4, "incisivus_inferior": 0.4, "mentalis": 0.3}, False),
        "Fear": ({"frontalis_inner": 0.8, "frontalis_major": 0.6, "frontalis_outer": 0.4, "corrugator": 0.5,
                  "levator_palpebrae": 0.9, "risorius": 0.9, "platysma": 0.5,
                  "depressor_labii_inferioris": 0.3}, True),
        "Disgust": ({"levator_labii_alaeque_nasi": 1.0, "nasalis": 0.6, "levator_labii_superioris": 0.8,
                     "procerus": 0.5, "depressor_anguli_oris": 0.4, "depressor_labii_inferioris": 0.5,
                     "orbicularis_oculi_lower": 0.4, "orbicularis_oculi_upper": 0.4, "mentalis": 0.3,
                     "buccinator": 0.3}, False),
        "Surprise": ({"frontalis_inner": 0.9, "frontalis_major": 1.0, "frontalis_outer": 1.0,
                      "levator_palpebrae": 1.0}, True),
    }
    out = {}
    for expr, (weights, jaw) in sets.items():
        w = {}
        for base, _, _, _, _, _, _ in _MUSCLES:
            for side in ("L", "R"):
                if base in weights:
                    w[f"{base}_{side}"] = weights[base]
        out[expr] = {"jaw_participation": jaw, "weights": w}
    return {"description": "expression weight sets W_e; unlisted muscles weigh 0", "expressions": out}


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.9f}".rstrip("0").rstrip(".") if v != 0 else "0"


def write_obj(path: Path, pos: np.ndarray, spr: dict[str, list[tuple[int, int]]]) -> None:
    lines = ["# neuroface canonical face: layered fascia-node network", "o face"]
    lines += [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in pos]
    lines.append("g epidermis")
    for r in range(ROWS - 1):
        for c in range(COLS - 1):
            if _cuts_mouth(r, c, r + 1, c + 1) and _cuts_mouth(r, c + 1, r + 1, c):
                continue
            a, b = node_index(0, r, c) + 1, node_index(0, r, c + 1) + 1
            d, e = node_index(0, r + 1, c + 1) + 1, node_index(0, r + 1, c) + 1
            lines.append(f"f {a} {b} {d} {e}")
    lines.append("g skull")
    for r in range(ROWS - 1):
        for c in range(COLS - 1):
            a, b = node_index(3, r, c) + 1, node_index(3, r, c + 1) + 1
            d, e = node_index(3, r + 1, c + 1) + 1, node_index(3, r + 1, c) + 1
            # split along mirrored diagonals so the skull normals stay symmetric
            if c >= MID:
                lines.append(f"f {a} {b} {d}")
                lines.append(f"f {a} {d} {e}")
            else:
                lines.append(f"f {a} {b} {e}")
                lines.append(f"f {b} {d} {e}")
    for cls, pairs in spr.items():
        lines.append(f"g spring_{cls}")
        lines += [f"l {i + 1} {j + 1}" for i, j in pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def sidecar_document(marks: dict[str, int]) -> dict[str, Any]:
    n_layer = ROWS * COLS
    mandible = [node_index(3, r, c) for r in range(MOUTH_LOWER_ROW + 1) for c in range(COLS)]
    return {
        "description": "sidecar for face.obj",
        "grid": {"rows": ROWS, "cols": COLS},
        "layers": {name: [i * n_layer, n_layer] for i, name in enumerate(LAYERS)},
        "pinned_layer": "muscle",
        "node_mass": {"epidermis": 2.0e-4, "dermal-fatty": 2.5e-4, "fascia": 2.5e-4, "muscle": 2.5e-4},
        "spring_classes": {k: {"stiffness": s, "damping": d} for k, (s, d) in SPRING_CLASSES.items()},
        "muscle_layer": "fascia",
        "mandible_nodes": mandible,
        "jaw": {
            "condyle": CONDYLE,
            "rotation_deg": [0.0, 25.0],
            "slide_mm": [-5.0, 5.0],
            "twist_deg": [-5.0, 5.0],
        },
        "landmarks": marks,
        "regions": {"upper_min_row": MOUTH_LOWER_ROW + 1, "lower_max_row": MOUTH_LOWER_ROW},
        "head_origin_in_skull": HEAD_ORIGIN_IN_SKULL,
        "solver": {
            "dt": 2.5e-4,
            "mass_damping": 250.0,
            "kinetic_tol": 1.0e-8,
            "force_tol": 1.0e-5,
        },
    }


def write_face(out_dir: str | Path) -> None:
    out = Path(out_dir)
    pos = grid_positions()
    spr = springs()
    marks = landmarks()
    write_obj(out / "face.obj", pos, spr)
    dump_yaml(sidecar_document(marks), out / "face.yaml")
    dump_yaml(muscles_document(pos), out / "face_muscles.yaml")
    dump_yaml(au_oracle_document(pos, marks), out / "au_oracle.yaml")
    dump_yaml(expressions_document(), out / "expressions.yaml")
