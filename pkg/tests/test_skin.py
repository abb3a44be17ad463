import copy
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroface import facegen
from neuroface.config import ConfigError, data_path, load_yaml
from neuroface.skin import (
    REQUIRED_LANDMARKS,
    FaceMuscleInsertion,
    JawState,
    SettleError,
    SkinSpring,
    apply_jaw,
    build_face,
    landmark_positions,
    muscle_node_forces,
    read_obj,
    settle,
    skull_signed_distance,
    spring_forces,
    theta1,
    theta2,
    write_obj,
)


@pytest.fixture(scope="module")
def sidecar():
    return load_yaml(data_path("face.yaml"))


@pytest.fixture(scope="module")
def muscle_doc():
    return load_yaml(data_path("face_muscles.yaml"))


@pytest.fixture(scope="module")
def mirror(face):
    nodes = np.array([facegen._mirror_node(i) for i in range(face.n_nodes)])
    names = face.muscle_names
    muscles = np.array([names.index(n[:-1] + ("R" if n.endswith("L") else "L")) for n in names])
    return nodes, muscles


def activation(face, **levels):
    a = np.zeros(len(face.insertions))
    for base, v in levels.items():
        for side in ("L", "R"):
            a[face.muscle_index(f"{base}_{side}")] = v
    return a


# --- construction -----------------------------------------------------------


def test_bundled_face(face):
    assert len(face.insertions) == 52
    assert len({n[:-2] for n in face.muscle_names}) == 26
    assert face.n_nodes > 2000
    assert set(REQUIRED_LANDMARKS) <= set(face.landmarks)
    assert np.all(face.mass > 0)
    assert np.all(face.spring_c > 0) and np.all(face.spring_rest > 0)


def test_missing_landmark_rejected(sidecar):
    side = copy.deepcopy(sidecar)
    del side["landmarks"]["lip_corner_L"]
    with pytest.raises(ConfigError, match="lip_corner_L"):
        build_face(sidecar=side)


def test_muscle_naming_absent_node_rejected(muscle_doc):
    doc = copy.deepcopy(muscle_doc)
    doc["muscles"][0]["attachments"][1]["node"] = 10**6
    with pytest.raises(ConfigError):
        build_face(muscle_map=doc)


def test_dangling_spring_rejected(tmp_path):
    text = data_path("face.obj").read_text()
    (tmp_path / "face.obj").write_text(text + "g spring_epidermis\nl 1 99999\n")
    (tmp_path / "face.yaml").write_text(data_path("face.yaml").read_text())
    with pytest.raises(ConfigError):
        build_face(tmp_path / "face.obj")


def test_domain_type_validation():
    with pytest.raises(ConfigError):
        SkinSpring(3, 3, 10.0, 0.01, 0.0)
    with pytest.raises(ConfigError):
        SkinSpring(1, 2, 0.0, 0.01, 0.0)
    with pytest.raises(ConfigError):
        FaceMuscleInsertion("m", "cranium", np.zeros(3), 0, np.array([], int), np.array([]), np.array([]), 0.01, 1.0)
    with pytest.raises(ValueError):
        JawState(rotation=1.5)


def test_obj_round_trip(face, tmp_path):
    path = tmp_path / "out.obj"
    write_obj(face, face.x_rest, path)
    x, faces, _ = read_obj(path)
    np.testing.assert_allclose(x, face.x_rest, atol=1e-7)
    assert sum(len(v) for v in faces.values()) == len(face.surface_quads)


# --- spring forces ----------------------------------------------------------


def test_rest_springs_carry_no_force(face):
    np.testing.assert_allclose(spring_forces(face, face.x_rest), 0.0, atol=1e-15)


def test_single_spring_pull(face):
    model = dataclasses.replace(face, spring_c=np.full(face.n_springs, 100.0), _packed={})
    i, j = model.spring_i[0], model.spring_j[0]
    x = model.x_rest.copy()
    axis = (x[j] - x[i]) / np.linalg.norm(x[j] - x[i])
    x[j] += 1e-3 * axis
    # only the i-j spring changed length as seen from node i
    f = spring_forces(model, x)
    np.testing.assert_allclose(f[i], 0.1 * axis, atol=1e-12)


def test_spring_forces_momentum_free(face, rng):
    for _ in range(5):
        x = face.x_rest + rng.normal(scale=2e-3, size=face.x_rest.shape)
        np.testing.assert_allclose(spring_forces(face, x).sum(axis=0), 0.0, atol=1e-9)


def test_coincident_endpoints_are_zero_force(face):
    x = face.x_rest.copy()
    x[face.spring_j[0]] = x[face.spring_i[0]]
    assert np.all(np.isfinite(spring_forces(face, x)))


def test_nonfinite_positions_rejected(face):
    x = face.x_rest.copy()
    x[0, 0] = np.nan
    with pytest.raises(ValueError):
        spring_forces(face, x)


# --- muscle forces ----------------------------------------------------------


def test_zero_activation_zero_field(face):
    np.testing.assert_array_equal(muscle_node_forces(face, np.zeros(52)), 0.0)


def test_theta2_support():
    np.testing.assert_array_equal(theta2(np.array([0.01, 0.02, 0.5]), 0.01), 0.0)
    assert theta2(np.array([0.0]), 0.01)[0] == 1.0


def test_theta1_shape():
    np.testing.assert_allclose(theta1(np.array([-0.1, 0.0, 0.5, 1.0, 1.1])), [0, 0, 0.5, 1.0, 0], atol=1e-15)


def test_muscle_field_linear_in_activation(face):
    a = activation(face, zygomatic_major=0.3)
    f1 = muscle_node_forces(face, a)
    f2 = muscle_node_forces(face, 2 * a)
    np.testing.assert_allclose(f2, 2 * f1, rtol=1e-14)
    assert np.abs(f1).max() > 0


def test_muscle_force_points_to_attachment(face):
    k = face.muscle_index("corrugator_L")
    ins = face.insertions[k]
    a = np.zeros(52)
    a[k] = 1.0
    f = muscle_node_forces(face, a)
    w = ins.weights()
    nodes = ins.nodes[w > 0]
    d = ins.attachment - face.x_rest[nodes]
    cos = np.sum(f[nodes] * d, axis=1) / (np.linalg.norm(f[nodes], axis=1) * np.linalg.norm(d, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-12)
    # nodes outside the influence set feel nothing
    others = np.setdiff1d(np.arange(face.n_nodes), nodes)
    np.testing.assert_array_equal(f[others], 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=52, max_size=52))
def test_muscle_field_is_sum_of_single_muscles(face, acts):
    a = np.array(acts)
    total = muscle_node_forces(face, a)
    parts = sum(muscle_node_forces(face, np.where(np.arange(52) == k, a, 0.0)) for k in range(0, 52, 13))
    mask = np.zeros(52, bool)
    mask[::13] = True
    rest = muscle_node_forces(face, np.where(mask, 0.0, a))
    np.testing.assert_allclose(total, parts + rest, atol=1e-12)


# --- jaw --------------------------------------------------------------------


def test_neutral_jaw_is_identity(face):
    tr = apply_jaw(face, JawState(0.0, 0.5, 0.5))
    np.testing.assert_allclose(tr.R, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(tr.t, 0.0, atol=1e-15)


def test_full_rotation_opens_25_degrees(face):
    tr = apply_jaw(face, JawState(1.0, 0.5, 0.5))
    angle = np.degrees(np.arccos((np.trace(tr.R) - 1) / 2))
    assert angle == pytest.approx(25.0, abs=1e-9)
    np.testing.assert_allclose(tr.R @ [1.0, 0, 0], [1.0, 0, 0], atol=1e-15)
    # the condyle stays put and the chin moves down
    np.testing.assert_allclose(tr.apply(face.jaw_condyle[None])[0], face.jaw_condyle, atol=1e-15)
    chin = face.x_rest[face.landmarks["skull_menton"]]
    assert tr.apply(chin[None])[0][1] < chin[1]


def test_slide_and_twist_ranges(face):
    tr = apply_jaw(face, JawState(0.0, 1.0, 0.5))
    np.testing.assert_allclose(tr.t, [0, 0, 0.005], atol=1e-15)
    tr = apply_jaw(face, JawState(0.0, 0.5, 0.0))
    assert np.degrees(np.arctan2(tr.R[0, 2], tr.R[0, 0])) == pytest.approx(-5.0)


def test_jaw_deterministic(face):
    a = apply_jaw(face, JawState(0.37, 0.5, 0.5))
    b = apply_jaw(face, JawState(0.37, 0.5, 0.5))
    assert a.R.tobytes() == b.R.tobytes() and a.t.tobytes() == b.t.tobytes()


# --- settling ---------------------------------------------------------------


def test_rest_pose_preserved(face):
    res = settle(face, np.zeros(52))
    assert res.converged
    assert np.max(np.linalg.norm(res.x - face.x_rest, axis=1)) < 1e-4


def test_settle_deterministic(face):
    a = activation(face, zygomatic_major=0.6, corrugator=0.4)
    r1 = settle(face, a, JawState(0.3))
    r2 = settle(face, a, JawState(0.3))
    assert r1.x.tobytes() == r2.x.tobytes()


def test_zygomatic_major_lifts_lip_corners(face):
    disp = []
    for level in (0.2, 0.5, 0.8):
        x = settle(face, activation(face, zygomatic_major=level)).x
        d = x[face.landmarks["lip_corner_L"]] - face.x_rest[face.landmarks["lip_corner_L"]]
        disp.append(d)
    d = disp[-1]
    assert d[1] > 0, "upward"
    assert d[0] > 0, "outward (the left corner moves towards +x)"
    mags = [np.linalg.norm(v) for v in disp]
    assert mags[0] < mags[1] < mags[2]


def test_settle_idempotent(face):
    a = activation(face, zygomatic_major=0.5, frontalis_inner=0.4)
    first = settle(face, a, JawState(0.2))
    again = settle(face, a, JawState(0.2), x0=first.x)
    assert np.max(np.linalg.norm(again.x - first.x, axis=1)) <= 1e-6


def test_mirror_symmetry(face, mirror):
    nodes, muscles = mirror
    # the mirrored node set reflects the rest mesh in x
    flip = np.array([-1.0, 1.0, 1.0])
    np.testing.assert_allclose(face.x_rest[nodes] * flip, face.x_rest, atol=1e-12)
    a = activation(face, zygomatic_major=0.7, depressor_anguli_oris=0.3, frontalis_outer=0.5)
    np.testing.assert_array_equal(a[muscles], a)
    x = settle(face, a, JawState(0.4)).x
    assert np.max(np.abs(x[nodes] * flip - x)) <= 1e-6


def test_no_skull_penetration(face):
    for jaw in (JawState(0.0), JawState(1.0, 0.0, 1.0)):
        a = activation(face, orbicularis_oris_upper=1.0, orbicularis_oris_lower=1.0, mentalis=1.0, buccinator=1.0)
        x = settle(face, a, jaw).x
        assert skull_signed_distance(face, x, jaw).min() >= -1e-12


def test_non_convergence_reported(face):
    a = activation(face, zygomatic_major=1.0)
    with pytest.raises(SettleError) as err:
        settle(face, a, max_time=0.005)
    assert err.value.result.kinetic > 0
    res = settle(face, a, max_time=0.005, raise_on_failure=False)
    assert not res.converged


def test_settle_rejects_bad_activations(face):
    with pytest.raises(ValueError):
        settle(face, np.full(52, 1.5))
    with pytest.raises(ValueError):
        settle(face, np.zeros(51))


def test_landmark_positions(face):
    lm = landmark_positions(face, face.x_rest)
    np.testing.assert_array_equal(lm["chin"], face.x_rest[face.landmarks["chin"]])
