"""Generators for the bundled model documents in ``neuroface/data``.

The shipped files are the output of :func:`write_all`; regenerate them with
``python -m neuroface.assets``.  All numbers here are model data (engineering
choices), not measured anatomy.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np

from .config import dump_yaml

VERTEBRAE = ["C7", "C6", "C5", "C4", "C3", "C2", "C1"]


def spine_document() -> dict[str, Any]:
    # x: subject's left, y: up, z: anterior.  COMs sit on the vertical axis so
    # the upright rest posture carries no gravity torque.
    links: list[dict[str, Any]] = [
        {"name": "base", "mass": 10.0, "inertia": [0.1, 0.1, 0.1], "com": [0.0, -0.05, 0.0]}
    ]
    masses = [0.30, 0.28, 0.26, 0.24, 0.22, 0.22, 0.20]
    parent = "base"
    for i, (name, m) in enumerate(zip(VERTEBRAE, masses)):
        links.append({
            "name": name,
            "parent": parent,
            "joint_origin": [0.0, 0.010 if i == 0 else 0.018, 0.0],
            "mass": m,
            "inertia": [2.0e-3, 2.4e-3, 2.0e-3],
            "com": [0.0, 0.009, 0.0],
            "spring": {"k_s": [30.0, 4.0, 30.0], "k_d": [0.25, 0.2, 0.25], "q0_deg": 0.0},
        })
        parent = name
    links.append({
        "name": "skull",
        "parent": "C1",
        "joint_origin": [0.0, 0.016, 0.0],
        "mass": 4.5,
        "inertia": [0.022, 0.016, 0.020],
        "com": [0.0, 0.055, 0.0],
        "spring": {"k_s": [30.0, 4.0, 30.0], "k_d": [0.25, 0.2, 0.25], "q0_deg": 0.0},
    })
    return {
        "description": "cervical spine + skull, 9 links, 3 rotational DOF per joint (XYZ Euler)",
        "units": "SI (m, kg, rad; angles in config given in degrees)",
        "gravity": [0.0, -9.81, 0.0],
        "joint_limits_deg": 60.0,
        "links": links,
    }


def _hill(l0: float, f_max: float) -> dict[str, float]:
    # F_l reaches f_max at rest length; contractile force vanishes at half length.
    l_m = 0.5 * l0
    return {
        "k_s": 3.0,
        "k_c": 6.0,
        "k_d": 0.5,
        "k_max": round(f_max / (l0 - l_m), 6),
        "l_m": round(l_m, 8),
        "v_m": round(10.0 * l0, 8),
        "l_0": round(l0, 8),
    }


def _rest_points(spine: dict[str, Any]) -> list[np.ndarray]:
    """World position of every link frame origin in the upright pose."""
    pts = [np.zeros(3)]
    for lk in spine["links"][1:]:
        pts.append(pts[-1] + np.asarray(lk["joint_origin"], dtype=float))
    return pts


def neck_muscles_document(spine: dict[str, Any] | None = None) -> dict[str, Any]:
    """Six muscles from the base to every movable link: anterior, posterior and
    rotator pairs.  Long muscles cross all joints below their insertion."""
    spine = spine or spine_document()
    links = spine["links"]
    origin = _rest_points(spine)
    muscles = []
    for i in range(1, len(links)):
        child = links[i]["name"]
        reach = 0.4 + 0.6 * i / (len(links) - 1)  # lateral spread grows with height
        specs = []
        for side, sx in (("L", 1.0), ("R", -1.0)):
            specs.append((f"ant_{child}_{side}", [sx * 0.030 * reach, -0.010, 0.030],
                          [sx * 0.016, 0.008, 0.020], 60.0))
            specs.append((f"post_{child}_{side}", [sx * 0.030 * reach, -0.010, -0.035],
                          [sx * 0.016, 0.008, -0.026], 80.0))
            specs.append((f"rot_{child}_{side}", [sx * 0.060 * reach, -0.010, -0.015],
                          [-sx * 0.004, 0.008, -0.028], 70.0))
        for name, a, b, f in specs:
            l0 = float(np.linalg.norm(origin[i] + np.array(b) - np.array(a)))
            muscles.append({
                "name": name,
                "group": "neck",
                "attachments": [{"link": "base", "point": a}, {"link": child, "point": b}],
                "hill": _hill(l0, f),
            })
    # sternocleidomastoid and splenius capitis: oblique skull movers for yaw/roll
    skull = len(links) - 1
    for side, sx in (("L", 1.0), ("R", -1.0)):
        for name, a, b, f in (
            (f"scm_{side}", [sx * 0.030, -0.010, 0.050], [sx * 0.055, 0.030, -0.020], 120.0),
            (f"splenius_{side}", [-sx * 0.005, -0.010, -0.050], [sx * 0.050, 0.040, -0.040], 100.0),
        ):
            l0 = float(np.linalg.norm(origin[skull] + np.array(b) - np.array(a)))
            muscles.append({
                "name": name,
                "group": "neck",
                "attachments": [{"link": "base", "point": a}, {"link": links[skull]["name"], "point": b}],
                "hill": _hill(l0, f),
            })
    return {"description": "cervical muscles from the base to each vertebra and the skull",
            "muscles": muscles}


def sim_document() -> dict[str, Any]:
    return {
        "physics_hz": 4000,
        "voluntary_hz": 25,
        "neck_controller": {
            "k_p": 5.0,
            "k_v": 0.5,
            "lambda": 1.0e-3,
            # C7 ... C1, skull: skull-adjacent joints take more of the rotation
            "distribution_weights": [0.08, 0.09, 0.10, 0.11, 0.12, 0.14, 0.16, 0.20],
        },
        "face": {"max_settle_time": 1.0},
        "transfer": {"neck_time": 2.0},
    }


def write_all(out_dir: str | Path | None = None) -> None:
    from . import facegen

    out = Path(out_dir) if out_dir else Path(__file__).parent / "data"
    out.mkdir(parents=True, exist_ok=True)
    spine = spine_document()
    dump_yaml(spine, out / "spine.yaml")
    dump_yaml(neck_muscles_document(spine), out / "neck_muscles.yaml")
    dump_yaml(sim_document(), out / "sim.yaml")
    facegen.write_face(out)


if __name__ == "__main__":
    write_all()
