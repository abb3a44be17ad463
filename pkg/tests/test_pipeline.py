import csv
import time

import numpy as np
import pytest
import yaml

from neuroface import pipeline as pl
from neuroface.aubridge import AuFrame, normalize_stream
from neuroface.datagen import N_MUSCLES


@pytest.fixture(scope="module")
def bundle(trained):
    return pl.load_bundle(trained.path, with_neck=False)


@pytest.fixture(scope="module")
def neck_bundle(trained):
    return pl.load_bundle(trained.path, with_neck=True)


@pytest.fixture(scope="module")
def raw_frames(heldout):
    # a few held-out expressions as a raw AU stream
    pick = [0, 11, 22, 33, 44]
    return [AuFrame(k, 0.04 * k, heldout.aus_raw[i], np.zeros(3)) for k, i in enumerate(pick)]


def test_neutral_frame_gives_neutral_face(bundle):
    r, _ = pl.transfer_frame(bundle, AuFrame(0, 0.0, np.zeros(17), np.zeros(3)))
    disp = {name: np.linalg.norm(r.mesh[i] - bundle.face.x_rest[i]) for name, i in bundle.face.landmarks.items()}
    assert max(disp.values()) < 1e-3, max(disp.items(), key=lambda kv: kv[1])


def test_identical_frames_identical_results(bundle, raw_frames):
    f = normalize_stream(raw_frames, bundle.table)[1]
    a, _ = pl.transfer_frame(bundle, f)
    b, _ = pl.transfer_frame(bundle, f)
    assert a.activations.tobytes() == b.activations.tobytes()
    assert a.mesh.tobytes() == b.mesh.tobytes()
    assert a.aus_raw.tobytes() == b.aus_raw.tobytes()


def test_pitch_target_reached(neck_bundle):
    f = AuFrame(0, 0.0, np.zeros(17), np.array([np.deg2rad(15), 0.0, 0.0]))
    r, state = pl.transfer_frame(neck_bundle, f)
    assert abs(np.rad2deg(r.pose[0]) - 15.0) < 2.0
    assert state is not None


def test_single_frame_sequence_equals_transfer_frame(bundle, raw_frames):
    seq = pl.transfer_sequence(bundle, raw_frames[:1], table=bundle.table)
    (f,) = normalize_stream(raw_frames[:1], bundle.table)
    r, _ = pl.transfer_frame(bundle, f)
    assert seq.frames[0].activations.tobytes() == r.activations.tobytes()
    assert seq.frames[0].mesh.tobytes() == r.mesh.tobytes()


def test_permuting_frames_permutes_results(bundle, raw_frames):
    frames = raw_frames[:4]
    perm = [2, 0, 3, 1]
    a = pl.transfer_sequence(bundle, frames, table=bundle.table)
    b = pl.transfer_sequence(bundle, [frames[k] for k in perm], table=bundle.table)
    assert b.activations.tobytes() == a.activations[perm].tobytes()
    assert np.array([r.mesh for r in b.frames]).tobytes() == np.array([a.frames[k].mesh for k in perm]).tobytes()


def test_sequence_normalization_default(bundle, raw_frames):
    res = pl.transfer_sequence(bundle, raw_frames[:3])
    expected = np.array([f.aus for f in normalize_stream(raw_frames[:3])])
    np.testing.assert_array_equal(np.array([f.aus for f in res.inputs]), expected)


def test_empty_sequence_rejected(bundle):
    with pytest.raises(ValueError):
        pl.transfer_sequence(bundle, [])


def test_runtime_scales_linearly(bundle, raw_frames):
    frame = raw_frames[2]
    times = {}
    for n in (5, 10):
        start = time.perf_counter()
        pl.transfer_sequence(bundle, [frame] * n, table=bundle.table)
        times[n] = time.perf_counter() - start
    assert 2 * 0.8 <= times[10] / times[5] <= 2 * 1.2


def test_settle_failure_recorded(trained, raw_frames):
    b = pl.load_bundle(trained.path, with_neck=False, settle_time=1e-3)
    res = pl.transfer_sequence(b, raw_frames[:2], table=b.table)
    assert len(res) == 0
    assert [e.frame for e in res.errors] == [0, 1]
    assert "frame 0" in str(res.errors[0])


# --- evaluation -------------------------------------------------------------


def test_evaluate_self_is_zero(rng):
    x = rng.uniform(size=(6, 17))
    rep = pl.evaluate_transfer(x, x)
    assert rep["average"] == 0.0 and all(v == 0.0 for v in rep["per_au"].values())
    assert rep["frames"] == 6


def test_evaluate_constant_offset(rng):
    x = rng.uniform(size=(6, 17))
    y = x.copy()
    y[:, 4] += 0.1
    rep = pl.evaluate_transfer(y, x)
    assert rep["per_au"]["AU06"] == pytest.approx(0.01, abs=1e-15)
    assert rep["average"] == pytest.approx(0.01 / 17, abs=1e-15)


def test_evaluate_length_mismatch(rng):
    with pytest.raises(ValueError):
        pl.evaluate_transfer(rng.uniform(size=(3, 17)), rng.uniform(size=(4, 17)))


# --- export -----------------------------------------------------------------


@pytest.fixture(scope="module")
def five(bundle, raw_frames):
    return pl.transfer_sequence(bundle, raw_frames, table=bundle.table)


def test_export_counts(five, bundle, tmp_path):
    files = pl.export_animation(five, tmp_path, bundle, {"seed": 0})
    assert len(list(tmp_path.glob("frame_*.obj"))) == 5
    with open(tmp_path / "activations.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 6
    assert len(rows[0]) == 1 + 56 + 3 + 17
    np.testing.assert_array_equal(np.array(rows[1][1:1 + N_MUSCLES + 4], float), five.frames[0].activations)
    manifest = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
    assert manifest["frames"] == 5 and manifest["run"] == {"seed": 0}
    assert set(manifest["sources"]) == {"model", "face"}
    assert len(files) == 7


def test_reexport_byte_identical(five, bundle, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    pl.export_animation(five, a, bundle)
    pl.export_animation(five, b, bundle)
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_manifest_tracks_model(five, bundle, trained, tmp_path):
    from neuroface import nn

    other = trained.model.copy()
    other.biases[-1] = other.biases[-1] + 1e-9
    nn.save_model(other, tmp_path / "other.npz")
    b2 = pl.load_bundle(tmp_path / "other.npz", with_neck=False)
    same = pl.load_bundle(trained.path, with_neck=False)
    assert b2.sources["model"] != bundle.sources["model"]
    assert same.sources == bundle.sources
    pl.export_animation(five, tmp_path / "x", bundle)
    pl.export_animation(five, tmp_path / "y", b2)
    assert (tmp_path / "x/manifest.yaml").read_bytes() != (tmp_path / "y/manifest.yaml").read_bytes()
