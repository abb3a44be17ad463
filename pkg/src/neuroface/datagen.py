"""Synthetic training pairs: expression activations -> settled face -> AUs.

For an expression with weight set ``W_e`` a sample draws ``s ~ U[0, 1]`` and
sets every muscle activation to ``w_i * s``.  Expressions that involve the jaw
also draw the jaw rotation uniformly; slide, twist and the auxiliary output
stay at 0.5.  The settled face is then scored by a geometric AU oracle made of
landmark-distance terms.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ConfigError, DataError, data_path, load_yaml, require
from .skin import FaceModel, JawState, SettleError, settle

log = logging.getLogger(__name__)

ACTION_UNITS = (
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
    "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU45",
)
EXPRESSIONS = ("Joy", "Sadness", "Anger", "Fear", "Disgust", "Surprise")
JAW_CHANNELS = ("jaw_rotation", "jaw_slide", "jaw_twist", "auxiliary")
N_MUSCLES = 52
N_OUTPUTS = N_MUSCLES + len(JAW_CHANNELS)
NEUTRAL = 0.5


@dataclass(frozen=True)
class ExpressionWeightSet:
    expression: str
    w: np.ndarray  # (52,)
    jaw_participation: bool

    def __post_init__(self) -> None:
        if self.expression not in EXPRESSIONS:
            raise ConfigError(f"unknown expression {self.expression!r}")
        if self.w.shape != (N_MUSCLES,):
            raise ConfigError(f"{self.expression}: expected {N_MUSCLES} weights")
        if np.any(self.w < 0) or np.any(self.w > 1) or not np.any(self.w > 0):
            raise ConfigError(f"{self.expression}: weights must lie in [0, 1] with one nonzero")


def load_expressions(path: str | Path | dict[str, Any] | None, muscle_names: Sequence[str]) -> list[ExpressionWeightSet]:
    doc = load_yaml(path or data_path("expressions.yaml")) if not isinstance(path, dict) else path
    table = require(doc, "expressions", "expression document")
    names = list(muscle_names)
    out = []
    for expr in EXPRESSIONS:
        raw = require(table, expr, "expressions")
        weights = raw.get("weights", {})
        unknown = set(weights) - set(names)
        if unknown:
            raise ConfigError(f"{expr}: unknown muscles {sorted(unknown)}")
        w = np.array([float(weights.get(n, 0.0)) for n in names])
        out.append(ExpressionWeightSet(expr, w, bool(raw.get("jaw_participation", False))))
    return out


@dataclass(frozen=True)
class AuTerm:
    a: str
    b: str
    rest_distance: float
    gain: float
    sign: int


@dataclass(frozen=True)
class AuOracleSpec:
    terms: dict[str, tuple[AuTerm, ...]]
    threshold: float = 0.0  # detection floor subtracted before clamping, AU

    def __post_init__(self) -> None:
        for au in ACTION_UNITS:
            if not self.terms.get(au):
                raise ConfigError(f"AU oracle has no term for {au}")

    def landmarks(self) -> set[str]:
        return {n for ts in self.terms.values() for t in ts for n in (t.a, t.b)}


def load_au_oracle(path: str | Path | dict[str, Any] | None = None) -> AuOracleSpec:
    doc = load_yaml(path or data_path("au_oracle.yaml")) if not isinstance(path, dict) else path
    aus = require(doc, "aus", "AU oracle")
    terms = {}
    for au in ACTION_UNITS:
        rows = []
        for raw in aus.get(au, []) or []:
            a, b = raw["pair"]
            sign = int(raw["sign"])
            if sign not in (-1, 1):
                raise ConfigError(f"{au}: sign must be +1 or -1")
            rows.append(AuTerm(str(a), str(b), float(raw["rest_distance"]), float(raw["gain"]), sign))
        terms[au] = tuple(rows)
    threshold = float(doc.get("detection_threshold", 0.0))
    if threshold < 0:
        raise ConfigError("AU oracle detection_threshold must be >= 0")
    return AuOracleSpec(terms, threshold)


def estimate_aus(spec: AuOracleSpec, x: np.ndarray, landmarks: dict[str, int]) -> np.ndarray:
    """Raw AU intensities of a mesh: ``max(0, sum sign * gain * (d - d_rest) - threshold)``."""
    out = np.zeros(len(ACTION_UNITS))
    for k, au in enumerate(ACTION_UNITS):
        total = 0.0
        for t in spec.terms[au]:
            try:
                d = float(np.linalg.norm(x[landmarks[t.a]] - x[landmarks[t.b]]))
            except KeyError as exc:
                raise KeyError(f"{au}: missing landmark {exc.args[0]!r}") from None
            total += t.sign * t.gain * (d - t.rest_distance)
        out[k] = max(0.0, total - spec.threshold)
    return out


def sample_activation(ws: ExpressionWeightSet, rng: np.random.Generator) -> np.ndarray:
    """One 56-vector: scaled muscle weights, jaw rotation, neutral slide/twist/aux."""
    s = rng.uniform(0.0, 1.0)
    out = np.empty(N_OUTPUTS)
    out[:N_MUSCLES] = ws.w * s
    out[N_MUSCLES] = rng.uniform(0.0, 1.0) if ws.jaw_participation else 0.0
    out[N_MUSCLES + 1:] = NEUTRAL
    return out


def sample_rng(seed: int, expression: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, expression, index, attempt])


def simulate_aus(face: FaceModel, spec: AuOracleSpec, activations: np.ndarray, max_time: float = 1.0) -> np.ndarray:
    jaw = JawState.from_vector(activations[N_MUSCLES:N_MUSCLES + 3])
    res = settle(face, np.clip(activations[:N_MUSCLES], 0.0, 1.0), jaw, max_time=max_time)
    return estimate_aus(spec, res.x, face.landmarks)


@dataclass
class Dataset:
    expression: list[str]
    aus_raw: np.ndarray  # (n, 17)
    activations: np.ndarray  # (n, 56)
    aus_norm: np.ndarray | None = None
    table: np.ndarray | None = None  # (17, 2) per-AU (min, max)

    def __len__(self) -> int:
        return len(self.expression)

    def __post_init__(self) -> None:
        n = len(self.expression)
        if self.aus_raw.shape != (n, len(ACTION_UNITS)) or self.activations.shape != (n, N_OUTPUTS):
            raise ValueError("dataset arrays have inconsistent shapes")


# worker state for process pools
_WORKER: dict[str, Any] = {}


def _init_worker(face, spec, sets, seed, max_time):
    _WORKER.update(face=face, spec=spec, sets=sets, seed=seed, max_time=max_time)


def _make_sample(task: tuple[int, int]) -> tuple[int, int, np.ndarray | None, np.ndarray | None, int]:
    e, i = task
    w = _WORKER
    ws = w["sets"][e]
    for attempt in range(2):
        a = sample_activation(ws, sample_rng(w["seed"], e, i, attempt))
        try:
            return e, i, a, simulate_aus(w["face"], w["spec"], a, w["max_time"]), attempt + 1
        except SettleError as exc:
            log.warning("%s sample %d attempt %d dropped: %s", ws.expression, i, attempt, exc)
    return e, i, None, None, 2


def generate_dataset(
    face: FaceModel,
    spec: AuOracleSpec,
    weight_sets: Sequence[ExpressionWeightSet],
    n_per_expression: int = 1000,
    seed: int = 0,
    max_time: float = 1.0,
    workers: int = 1,
    progress_every: int = 500,
) -> Dataset:
    """Sample, settle and score ``n_per_expression`` pairs per expression.

    Every sample has its own random stream derived from (seed, expression,
    index, attempt), so the result does not depend on ``workers``.  A sample
    whose settle fails is redrawn once; if that fails too it is dropped.
    """
    if n_per_expression < 1:
        raise ValueError("n_per_expression must be >= 1")
    tasks = [(e, i) for e in range(len(weight_sets)) for i in range(n_per_expression)]
    init = (face, spec, list(weight_sets), seed, max_time)
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=init) as pool:
            results = list(pool.map(_make_sample, tasks, chunksize=16))
    else:
        _init_worker(*init)
        results = []
        for k, t in enumerate(tasks, 1):
            results.append(_make_sample(t))
            if progress_every and k % progress_every == 0:
                log.info("datagen: %d / %d samples", k, len(tasks))
    tags, aus, acts = [], [], []
    dropped = 0
    for e, i, a, au, _ in results:
        if a is None:
            dropped += 1
            continue
        tags.append(weight_sets[e].expression)
        aus.append(au)
        acts.append(a)
    if dropped:
        log.warning("datagen: %d samples dropped after repeated settle failures", dropped)
    return Dataset(tags, np.array(aus).reshape(-1, len(ACTION_UNITS)), np.array(acts).reshape(-1, N_OUTPUTS))


def minmax_table(aus: np.ndarray) -> np.ndarray:
    aus = np.asarray(aus, dtype=float)
    return np.stack([aus.min(axis=0), aus.max(axis=0)], axis=1)


def apply_table(aus: np.ndarray, table: np.ndarray, clip: bool = True) -> np.ndarray:
    """Min-max map with a fixed table; degenerate columns map to 0."""
    aus = np.asarray(aus, dtype=float)
    lo, hi = table[:, 0], table[:, 1]
    span = hi - lo
    ok = span > 0
    out = np.zeros_like(aus)
    out[..., ok] = (aus[..., ok] - lo[ok]) / span[ok]
    return np.clip(out, 0.0, 1.0) if clip else out


def normalize_columns(aus: np.ndarray, names: Sequence[str] = ACTION_UNITS) -> tuple[np.ndarray, np.ndarray]:
    table = minmax_table(aus)
    for k in np.flatnonzero(table[:, 1] <= table[:, 0]):
        log.warning("AU column %s is constant; mapped to 0", names[k])
    return apply_table(aus, table), table


def normalize_dataset(ds: Dataset) -> Dataset:
    """Per-AU min-max normalization over all pairs; stores the (min, max) table."""
    norm, table = normalize_columns(ds.aus_raw)
    return Dataset(ds.expression, ds.aus_raw, ds.activations, norm, table)


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------


def output_names(muscle_names: Sequence[str]) -> list[str]:
    return list(muscle_names) + list(JAW_CHANNELS)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(ds: Dataset, path: str | Path, muscle_names: Sequence[str]) -> None:
    if ds.aus_norm is None:
        ds = normalize_dataset(ds)
    header = (["expression"] + [f"{a}_raw" for a in ACTION_UNITS] + [f"{a}_norm" for a in ACTION_UNITS]
              + output_names(muscle_names))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(ds)):
            w.writerow([ds.expression[k]] + [_fmt(v) for v in ds.aus_raw[k]]
                       + [_fmt(v) for v in ds.aus_norm[k]] + [_fmt(v) for v in ds.activations[k]])


def read_dataset(path: str | Path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty dataset file")
    header, body = rows[0], rows[1:]
    n_au = len(ACTION_UNITS)
    if len(header) != 1 + 2 * n_au + N_OUTPUTS:
        raise DataError(f"{path}: expected {1 + 2 * n_au + N_OUTPUTS} columns, found {len(header)}")
    if not body:
        raise DataError(f"{path}: dataset has no rows")
    try:
        vals = np.array([[float(v) for v in r[1:]] for r in body])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell") from exc
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}: non-finite values")
    raw, norm, acts = vals[:, :n_au], vals[:, n_au:2 * n_au], vals[:, 2 * n_au:]
    return Dataset([r[0] for r in body], raw, acts, norm, minmax_table(raw))


def expression_counts(ds: Dataset) -> dict[str, int]:
    return {e: sum(1 for t in ds.expression if t == e) for e in EXPRESSIONS}

