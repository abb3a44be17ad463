"""Expression and head-pose transfer from AU frames onto the simulated head.

Every frame is handled independently on the face side: the network predicts
muscle and jaw activations from the normalized AUs, the face settles from
rest, and the oracle re-estimates AUs on the result.  The neck controller
runs toward the frame's head pose for a fixed simulated time, starting from
the previous frame's neck state.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import multibody as mb
from .aubridge import AuFrame, head_pose_targets, normalize_stream
from .config import FACE_FILES, data_path, dump_yaml, file_digest, files_digest, load_yaml
from .datagen import (ACTION_UNITS, N_MUSCLES, AuOracleSpec, apply_table, estimate_aus, load_au_oracle,
                      output_names)
from .neurocontrol import HeadNeckSim, HeadPoseTarget
from .nn import MLPModel, load_model, predict_activations
from .skin import FaceModel, JawState, SettleError, build_face, settle, write_obj

log = logging.getLogger(__name__)

NECK_TIME = 2.0


class TransferError(RuntimeError):
    def __init__(self, frame: int, cause: Exception):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame
        self.cause = cause


@dataclass
class ModelBundle:
    network: MLPModel
    face: FaceModel
    oracle: AuOracleSpec
    neck: HeadNeckSim | None
    table: np.ndarray | None = None  # training AU (min, max); scores re-estimated AUs
    neck_time: float = NECK_TIME
    settle_time: float = 1.0
    sources: dict[str, str] = field(default_factory=dict)  # name -> file digest
    head_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))  # face frame in the skull frame

    @property
    def score_table(self) -> np.ndarray:
        return self.table if self.table is not None else np.stack(
            [np.zeros(len(ACTION_UNITS)), np.full(len(ACTION_UNITS), 5.0)], axis=1)


def load_bundle(model_path: str | Path, face_dir: str | Path | None = None, with_neck: bool = True,
                neck_time: float = NECK_TIME, settle_time: float = 1.0) -> ModelBundle:
    """Network plus the face, AU oracle and neck model it operates on."""
    base = Path(face_dir) if face_dir else data_path("face.obj").parent
    net = load_model(model_path)
    face = build_face(base / "face.obj", base / "face_muscles.yaml")
    oracle = load_au_oracle(base / "au_oracle.yaml")
    neck = HeadNeckSim.from_files() if with_neck else None
    sources = {"model": file_digest(model_path),
               "face": files_digest([base / f for f in FACE_FILES])}
    if with_neck:
        sources["neck"] = files_digest([data_path(f) for f in ("spine.yaml", "neck_muscles.yaml", "sim.yaml")])
    origin = np.asarray(load_yaml(base / "face.yaml").get("head_origin_in_skull", [0.0, 0.0, 0.0]), float)
    return ModelBundle(net, face, oracle, neck, net.norm_table, neck_time, settle_time, sources, origin)


@dataclass
class FrameResult:
    index: int
    activations: np.ndarray  # (56,)
    mesh: np.ndarray  # (N, 3) settled nodes in the head frame
    pose: np.ndarray  # (3,) achieved skull pitch/yaw/roll, rad
    aus_raw: np.ndarray  # (17,) re-estimated by the oracle
    aus_norm: np.ndarray  # (17,) re-estimated, normalized with the bundle table
    skull_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    skull_p: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class TransferResult:
    frames: list[FrameResult]
    inputs: list[AuFrame]  # normalized input frames, aligned with ``frames``
    errors: list[TransferError] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def activations(self) -> np.ndarray:
        return np.array([f.activations for f in self.frames])

    @property
    def poses(self) -> np.ndarray:
        return np.array([f.pose for f in self.frames])

    @property
    def aus_norm(self) -> np.ndarray:
        return np.array([f.aus_norm for f in self.frames])


def transfer_frame(bundle: ModelBundle, frame: AuFrame, neck_state: mb.GeneralizedState | None = None,
                   target: HeadPoseTarget | None = None) -> tuple[FrameResult, mb.GeneralizedState | None]:
    """Transfer one normalized frame; returns the result and the final neck state."""
    acts = predict_activations(bundle.network, frame.aus)
    jaw = JawState.from_vector(acts[N_MUSCLES:N_MUSCLES + 3])
    res = settle(bundle.face, acts[:N_MUSCLES], jaw, max_time=bundle.settle_time)
    raw = estimate_aus(bundle.oracle, res.x, bundle.face.landmarks)
    pose = np.zeros(3)
    R, p = np.eye(3), np.zeros(3)
    state = neck_state
    if bundle.neck is not None:
        tgt = target if target is not None else head_pose_targets([frame])[0]
        state, _ = bundle.neck.run(tgt, bundle.neck_time, neck_state)
        kin = mb.pose(bundle.neck.model, state.q)
        R, p = kin.R[-1].copy(), kin.p[-1].copy()
        pose = mb.matrix_to_xyz(R)
    result = FrameResult(frame.index, acts, res.x, pose, raw, apply_table(raw, bundle.score_table), R, p)
    return result, state


def transfer_sequence(bundle: ModelBundle, frames: Sequence[AuFrame], table: np.ndarray | None = None,
                      normalized: bool = False) -> TransferResult:
    """Transfer raw frames in order.

    AUs are normalized over the sequence unless a fixed ``table`` is given (or
    ``normalized`` says they already are).  A frame that fails is recorded in
    ``errors`` and skipped; the rest continue.
    """
    if not frames:
        raise ValueError("at least one frame required")
    norm = list(frames) if normalized else normalize_stream(frames, table)
    out, errors, kept = [], [], []
    state = None
    for f in norm:
        try:
            r, state = transfer_frame(bundle, f, state)
        except (SettleError, FloatingPointError) as exc:
            log.error("transfer failed on frame %d: %s", f.index, exc)
            errors.append(TransferError(f.index, exc))
            continue
        out.append(r)
        kept.append(f)
    return TransferResult(out, kept, errors)


def evaluate_transfer(result: TransferResult | np.ndarray, reference: Sequence[AuFrame] | np.ndarray) -> dict[str, Any]:
    """Per-AU mean squared error between re-estimated and input AUs (both normalized)."""
    got = result.aus_norm if isinstance(result, TransferResult) else np.asarray(result, dtype=float)
    ref = np.array([f.aus for f in reference]) if not isinstance(reference, np.ndarray) else reference
    if got.shape != ref.shape:
        raise ValueError(f"frame count mismatch: {got.shape} vs {ref.shape}")
    per = np.mean((got - ref) ** 2, axis=0)
    return {"per_au": {au: float(v) for au, v in zip(ACTION_UNITS, per)}, "average": float(per.mean()),
            "frames": int(got.shape[0])}


def _face_to_world(face_x: np.ndarray, r: FrameResult, origin: np.ndarray) -> np.ndarray:
    return (face_x + origin) @ r.skull_R.T + r.skull_p


def export_animation(result: TransferResult, out_dir: str | Path, bundle: ModelBundle,
                     run_info: dict[str, Any] | None = None, world: bool = True) -> list[Path]:
    """Per-frame OBJ meshes, one activations CSV and a run manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, r in enumerate(result.frames):
        x = _face_to_world(r.mesh, r, bundle.head_origin) if world and bundle.neck is not None else r.mesh
        path = out / f"frame_{k:05d}.obj"
        write_obj(bundle.face, x, path)
        written.append(path)
    csv_path = out / "activations.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", *output_names(bundle.face.muscle_names), "pitch", "yaw", "roll",
                    *(f"{a}_est" for a in ACTION_UNITS)])
        for r in result.frames:
            w.writerow([r.index, *(repr(float(v)) for v in r.activations), *(repr(float(v)) for v in r.pose),
                        *(repr(float(v)) for v in r.aus_norm)])
    written.append(csv_path)
    manifest = {
        "neuroface_version": __version__,
        "frames": len(result.frames),
        "failed_frames": [e.frame for e in result.errors],
        "sources": dict(sorted(bundle.sources.items())),
        "neck_time": bundle.neck_time,
        "run": run_info or {},
    }
    man_path = out / "manifest.yaml"
    dump_yaml(manifest, man_path)
    written.append(man_path)
    return written
