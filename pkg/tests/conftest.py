import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from neuroface import datagen as dg
from neuroface import nn
from neuroface.config import FACE_FILES, data_path, files_digest
from neuroface.multibody import build_spine
from neuroface.skin import load_default_face

CACHE_DIR = Path(__file__).resolve().parents[1] / ".cache"
FULL_SEED = 0
FULL_N = 1000
HELDOUT_SEED = 99
HELDOUT_N = 10


def pendulum_config(mass=1.0, r=0.2, inertia=1e-4, gravity=(0.0, -9.81, 0.0), k_s=0.0, k_d=0.0):
    """Base plus one movable link hanging along -y from a joint at the origin."""
    return {
        "gravity": list(gravity),
        "joint_limits_deg": 89.0,
        "links": [
            {"name": "base", "mass": 1.0, "inertia": [1.0, 1.0, 1.0]},
            {"name": "bob", "parent": "base", "joint_origin": [0.0, 0.0, 0.0], "mass": mass,
             "inertia": [inertia] * 3, "com": [0.0, -r, 0.0],
             "spring": {"k_s": k_s, "k_d": k_d}},
        ],
    }


def two_link_config(m1, m2, l1, lc1, lc2, i1, i2):
    return {
        "gravity": [0.0, 0.0, 0.0],
        "joint_limits_deg": 89.0,
        "links": [
            {"name": "base", "mass": 1.0, "inertia": [1.0, 1.0, 1.0]},
            {"name": "upper", "parent": "base", "joint_origin": [0, 0, 0], "mass": m1,
             "inertia": [i1, i1, i1], "com": [0.0, -lc1, 0.0]},
            {"name": "lower", "parent": "upper", "joint_origin": [0.0, -l1, 0.0], "mass": m2,
             "inertia": [i2, i2, i2], "com": [0.0, -lc2, 0.0]},
        ],
    }


@pytest.fixture(scope="session")
def pendulum():
    return build_spine(pendulum_config())


@pytest.fixture(scope="session")
def face():
    return load_default_face()


@pytest.fixture(scope="session")
def oracle():
    return dg.load_au_oracle()


@pytest.fixture(scope="session")
def expression_sets(face):
    return dg.load_expressions(None, face.muscle_names)


def dataset_cache_path(seed: int = FULL_SEED, n: int = FULL_N) -> Path:
    key = files_digest([data_path(f) for f in FACE_FILES], f"seed={seed};n={n}")[:16]
    return CACHE_DIR / f"dataset-{key}.csv"


@pytest.fixture(scope="session")
def full_dataset(face, oracle, expression_sets):
    """The 6000-pair training set, generated once and cached by face-data digest."""
    path = dataset_cache_path()
    if not path.exists():
        logging.getLogger(__name__).warning("generating the full dataset; this takes a while")
        ds = dg.generate_dataset(face, oracle, expression_sets, FULL_N, FULL_SEED)
        ds = dg.normalize_dataset(ds)
        path.parent.mkdir(exist_ok=True)
        tmp = path.with_suffix(".tmp")
        dg.write_dataset(ds, tmp, face.muscle_names)
        tmp.replace(path)
    return dg.read_dataset(path)


def fd_gradient_error(model, x, y, h=1e-5):
    """Max relative error of backprop against central differences on every parameter."""
    _, gw, gb = nn.mse_and_grads(model, x, y)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for p, g in zip(params, grads):
            fd = np.empty_like(p)
            flat, fdf = p.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = nn.dataset_mse(model, x, y)
                flat[i] = keep - h
                down = nn.dataset_mse(model, x, y)
                flat[i] = keep
                fdf[i] = (up - down) / (2 * h)
            scale = np.maximum(np.abs(fd) + np.abs(g), 1e-6)
            worst = max(worst, float(np.max(np.abs(fd - g) / scale)))
    return worst


def small_net(rng, dims=(4, 6, 5, 3)):
    """He init, then inputs nudged away from ReLU kinks."""
    model = nn.init_mlp(int(rng.integers(1 << 31)), dims)
    for b in model.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(3, dims[0]))
    for _ in range(20):
        pre = [a for a in nn._forward_trace(model, x)[1:-1]]
        if all(np.min(np.abs(p[p != 0]), initial=1.0) > 1e-3 for p in pre):
            break
        x = rng.normal(size=(3, dims[0]))
    return model, x, rng.normal(size=(3, dims[-1]))


# --- acceptance report --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {text}")


# --- shared fixtures -------------------------------------------------------------


@dataclass
class Trained:
    model: nn.MLPModel
    history: list[float]
    seconds: float
    path: Path


@pytest.fixture(scope="session")
def trained(full_dataset, tmp_path_factory):
    """The network trained on the full dataset with default settings."""
    start = time.perf_counter()
    model, history = nn.train(nn.init_mlp(0), full_dataset.aus_norm, full_dataset.activations)
    seconds = time.perf_counter() - start
    model.norm_table = full_dataset.table
    path = tmp_path_factory.mktemp("model") / "model.npz"
    nn.save_model(model, path)
    return Trained(model, history, seconds, path)


@pytest.fixture(scope="session")
def heldout(face, oracle, expression_sets):
    """Raw held-out samples from a seed disjoint from training."""
    return dg.generate_dataset(face, oracle, expression_sets, HELDOUT_N, HELDOUT_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
