"""Command-line entry point: ``neuroface <command> [options]``.

Commands: ``datagen``, ``train``, ``transfer``, ``eval`` and ``simulate``.
Settings come from an optional YAML run config (``--config``) and are
overridden by flags.  Exit codes: 0 success, 2 usage, 3 config error,
4 data error, 5 convergence failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, DataError, load_yaml

log = logging.getLogger("neuroface")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CONVERGENCE = 5

DEFAULTS: dict[str, dict[str, Any]] = {
    "datagen": {"n_per_expression": 1000, "seed": 0, "workers": 1, "max_settle_time": 1.0},
    "train": {"epochs": 100, "learning_rate": 0.01, "batch_size": 32, "seed": 0},
    "transfer": {"neck_time": 2.0, "settle_time": 1.0, "normalization": "sequence"},
}


class ConvergenceError(RuntimeError):
    pass


def _settings(args: argparse.Namespace, section: str) -> dict[str, Any]:
    out = dict(DEFAULTS[section])
    if args.config:
        doc = load_yaml(args.config)
        extra = doc.get(section, {}) or {}
        unknown = set(extra) - set(out)
        if unknown:
            raise ConfigError(f"{args.config}: unknown {section} setting(s) {sorted(unknown)}")
        out.update(extra)
    for key in out:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_datagen(args: argparse.Namespace) -> int:
    from . import datagen as dg
    from .skin import build_face

    s = _settings(args, "datagen")
    face = build_face()
    spec = dg.load_au_oracle()
    sets = dg.load_expressions(None, face.muscle_names)
    t0 = time.perf_counter()
    ds = dg.generate_dataset(face, spec, sets, int(s["n_per_expression"]), int(s["seed"]),
                             float(s["max_settle_time"]), int(s["workers"]))
    if len(ds) == 0:
        raise ConvergenceError("every sample failed to settle")
    ds = dg.normalize_dataset(ds)
    dg.write_dataset(ds, args.out, face.muscle_names)
    log.info("wrote %d pairs to %s in %.1f s", len(ds), args.out, time.perf_counter() - t0)
    print(json.dumps({"pairs": len(ds), "per_expression": dg.expression_counts(ds), "out": str(args.out)}))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from . import datagen as dg
    from . import nn

    s = _settings(args, "train")
    ds = dg.read_dataset(args.dataset)
    cfg = nn.TrainConfig(learning_rate=float(s["learning_rate"]), batch_size=int(s["batch_size"]),
                         epochs=int(s["epochs"]), seed=int(s["seed"]))
    model = nn.init_mlp(int(s["seed"]))
    model.norm_table = ds.table
    t0 = time.perf_counter()

    def report(epoch: int, loss: float) -> None:
        log.info("epoch %3d  mse %.6f", epoch + 1, loss)

    try:
        trained, history = nn.train(model, ds.aus_norm, ds.activations, cfg, report)
    except nn.TrainingError as exc:
        raise ConvergenceError(str(exc)) from exc
    trained.meta["dataset"] = str(args.dataset)
    nn.save_model(trained, args.out)
    if args.loss_out:
        Path(args.loss_out).write_text("epoch,mse\n" + "".join(f"{k + 1},{v!r}\n" for k, v in enumerate(history)))
    print(json.dumps({"final_mse": history[-1], "epochs": len(history),
                      "seconds": round(time.perf_counter() - t0, 2), "out": str(args.out)}))
    return EXIT_OK


def _bundle(args: argparse.Namespace, s: dict[str, Any], with_neck: bool):
    from .pipeline import load_bundle

    return load_bundle(args.model, with_neck=with_neck, neck_time=float(s["neck_time"]),
                       settle_time=float(s["settle_time"]))


def _normalized_frames(frames, bundle, mode: str):
    from .aubridge import normalize_stream

    if mode == "training":
        if bundle.table is None:
            raise ConfigError("model has no training normalization table")
        return normalize_stream(frames, bundle.table)
    if mode == "sequence":
        return normalize_stream(frames)
    raise ConfigError(f"unknown normalization mode {mode!r}")


def cmd_transfer(args: argparse.Namespace) -> int:
    from .aubridge import parse_au_csv
    from .pipeline import export_animation, transfer_sequence

    s = _settings(args, "transfer")
    bundle = _bundle(args, s, with_neck=not args.no_neck)
    frames = parse_au_csv(args.input)
    if not frames:
        raise DataError(f"{args.input}: no usable frames")
    norm = _normalized_frames(frames, bundle, str(s["normalization"]))
    result = transfer_sequence(bundle, norm, normalized=True)
    run = {"input": str(args.input), "normalization": s["normalization"], "neck_time": float(s["neck_time"])}
    export_animation(result, args.out, bundle, run)
    print(json.dumps({"frames": len(result), "failed": [e.frame for e in result.errors], "out": str(args.out)}))
    if result.errors:
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from . import datagen as dg
    from .aubridge import AuFrame, parse_au_csv
    from .pipeline import evaluate_transfer, transfer_sequence

    s = _settings(args, "transfer")
    bundle = _bundle(args, s, with_neck=args.with_neck)
    if args.dataset:
        ds = dg.read_dataset(args.dataset)
        table = bundle.table if bundle.table is not None else ds.table
        ref = dg.apply_table(ds.aus_raw, table)
        frames = [AuFrame(k, float(k), ref[k], np.zeros(3)) for k in range(len(ds))]
    else:
        frames = _normalized_frames(parse_au_csv(args.input), bundle, str(s["normalization"]))
    result = transfer_sequence(bundle, frames, normalized=True)
    report = evaluate_transfer(result, result.inputs)
    report["failed"] = [e.frame for e in result.errors]
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_CONVERGENCE if result.errors else EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    from .neurocontrol import HeadNeckSim, HeadPoseTarget

    sim = HeadNeckSim.from_files(sim=args.sim)
    if args.benchmark:
        return _benchmark(sim, args)
    target = HeadPoseTarget(*np.deg2rad([args.pitch, args.yaw, args.roll]))
    state, trace = sim.run(target, args.duration)
    out: dict[str, Any] = {
        "final_pose_deg": np.round(np.rad2deg(trace.skull[-1]), 4).tolist(),
        "max_saturation_s": trace.max_saturation_s,
        "voluntary_updates": trace.voluntary_updates,
        "reflex_updates": trace.reflex_updates,
    }
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write("t,pitch_deg,yaw_deg,roll_deg\n")
            for t, sk in zip(trace.t, np.rad2deg(trace.skull)):
                fh.write(f"{t:.4f},{sk[0]:.6f},{sk[1]:.6f},{sk[2]:.6f}\n")
    if args.face_activations:
        out["face_mesh"] = _simulate_face(args)
    print(json.dumps(out))
    return EXIT_OK


def _simulate_face(args: argparse.Namespace) -> str:
    from .skin import JawState, build_face, settle, write_obj

    face = build_face()
    doc = load_yaml(args.face_activations)
    acts = doc.get("activations", {})
    unknown = set(acts) - set(face.muscle_names)
    if unknown:
        raise ConfigError(f"unknown face muscles {sorted(unknown)}")
    a = np.array([float(acts.get(n, 0.0)) for n in face.muscle_names])
    jaw = JawState(*[float(v) for v in doc.get("jaw", [0.0, 0.5, 0.5])])
    res = settle(face, a, jaw, max_time=float(doc.get("max_time", 1.0)))
    path = args.mesh_out or "face.obj"
    write_obj(face, res.x, path)
    return str(path)


def _benchmark(sim, args: argparse.Namespace) -> int:
    from .neurocontrol import STEPS_PER_VOLUNTARY, HeadPoseTarget

    target = HeadPoseTarget(*np.deg2rad([args.pitch, args.yaw, args.roll]))
    sim.run(target, 1.0 / 25.0)  # compile and warm caches
    duration = max(1, int(np.ceil(args.steps / STEPS_PER_VOLUNTARY))) / 25.0
    t0 = time.perf_counter()
    _, trace = sim.run(target, duration)
    wall = time.perf_counter() - t0
    rate = trace.reflex_updates / wall
    print(json.dumps({"steps": trace.reflex_updates, "seconds": round(wall, 4), "steps_per_second": round(rate, 1),
                      "real_time_factor": round(rate / 4000.0, 3)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuroface", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"neuroface {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    p.add_argument("--config", type=Path, help="YAML run config with datagen/train/transfer sections")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate the synthetic AU/activation dataset")
    d.add_argument("--out", type=Path, required=True, help="dataset CSV to write")
    d.add_argument("--n-per-expression", dest="n_per_expression", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--workers", type=int)
    d.add_argument("--max-settle-time", dest="max_settle_time", type=float)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train the AU -> activation network")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="model file (.npz)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss-out", type=Path, help="write the per-epoch MSE curve as CSV")
    t.set_defaults(func=cmd_train)

    for name, helptext in (("transfer", "transfer an AU stream onto the face and neck"),
                           ("eval", "transfer and report per-AU MSE against the inputs")):
        x = sub.add_parser(name, help=helptext)
        x.add_argument("--model", type=Path, required=True)
        src = x.add_mutually_exclusive_group(required=True)
        src.add_argument("--input", type=Path, help="AU CSV (AU01_r ... AU45_r, pose_Rx/Ry/Rz)")
        if name == "eval":
            src.add_argument("--dataset", type=Path, help="dataset CSV; rows are used as inputs")
        x.add_argument("--normalization", choices=("sequence", "training"))
        x.add_argument("--neck-time", dest="neck_time", type=float)
        x.add_argument("--settle-time", dest="settle_time", type=float)
        if name == "transfer":
            x.add_argument("--out", type=Path, required=True, help="output directory")
            x.add_argument("--no-neck", action="store_true", help="skip the head-pose simulation")
            x.set_defaults(func=cmd_transfer)
        else:
            x.add_argument("--out", type=Path, help="write the report as JSON")
            x.add_argument("--with-neck", action="store_true", help="also simulate head pose")
            x.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="free-run the head-neck model or benchmark it")
    s.add_argument("--pitch", type=float, default=0.0, help="target pitch, deg")
    s.add_argument("--yaw", type=float, default=0.0, help="target yaw, deg")
    s.add_argument("--roll", type=float, default=0.0, help="target roll, deg")
    s.add_argument("--duration", type=float, default=2.0, help="simulated seconds")
    s.add_argument("--sim", type=Path, help="simulation config (defaults to the bundled one)")
    s.add_argument("--trace", type=Path, help="write the skull orientation trace as CSV")
    s.add_argument("--face-activations", type=Path,
                   help="YAML with 'activations' (muscle: value) and optional 'jaw' [rot, slide, twist]")
    s.add_argument("--mesh-out", type=Path, help="OBJ path for the settled face")
    s.add_argument("--benchmark", action="store_true", help="measure physics steps per second")
    s.add_argument("--steps", type=int, default=40000, help="benchmark length in physics steps")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    from .nn import TrainingError
    from .skin import SettleError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (SettleError, TrainingError, FloatingPointError, ConvergenceError) as exc:
        log.error("convergence failure: %s", exc)
        return EXIT_CONVERGENCE
    except (DataError, ValueError, KeyError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
