import hashlib
import logging

import numpy as np
import pytest
from scipy import stats

from neuroface import datagen as dg
from neuroface.aubridge import AU_COLUMNS
from neuroface.config import ConfigError, DataError


def weight_set(face, expression="Joy", jaw=True, **weights):
    w = np.zeros(52)
    for name, v in weights.items():
        w[face.muscle_index(name)] = v
    return dg.ExpressionWeightSet(expression, w, jaw)


def activations(face, **levels):
    a = np.zeros(dg.N_OUTPUTS)
    a[dg.N_MUSCLES + 1:] = 0.5
    for base, v in levels.items():
        for side in ("L", "R"):
            a[face.muscle_index(f"{base}_{side}")] = v
    return a


# --- weight sets and sampling -----------------------------------------------


def test_bundled_expression_sets(expression_sets):
    assert [s.expression for s in expression_sets] == list(dg.EXPRESSIONS)
    for s in expression_sets:
        assert s.w.shape == (52,) and s.w.max() > 0 and s.w.max() <= 1


def test_weight_set_validation(face):
    with pytest.raises(ConfigError):
        dg.ExpressionWeightSet("Joy", np.zeros(52), False)
    with pytest.raises(ConfigError):
        dg.ExpressionWeightSet("Boredom", np.ones(52), False)
    with pytest.raises(ConfigError):
        dg.load_expressions({"expressions": {e: {"weights": {"nope_L": 1.0}} for e in dg.EXPRESSIONS}},
                            face.muscle_names)


class FixedScale:
    """Generator stand-in returning preset uniforms."""

    def __init__(self, *values):
        self.values = list(values)

    def uniform(self, lo, hi):
        return self.values.pop(0)


def test_sample_scales_weights(face):
    ws = weight_set(face, zygomatic_major_L=0.8)
    a = dg.sample_activation(ws, FixedScale(0.5, 0.3))
    assert a[face.muscle_index("zygomatic_major_L")] == pytest.approx(0.4)
    assert a[dg.N_MUSCLES] == 0.3
    np.testing.assert_array_equal(a[dg.N_MUSCLES + 1:], 0.5)


def test_zero_scale_gives_neutral_muscles(face):
    a = dg.sample_activation(weight_set(face, jaw=False, corrugator_L=1.0), FixedScale(0.0))
    np.testing.assert_array_equal(a[:dg.N_MUSCLES], 0.0)
    assert a[dg.N_MUSCLES] == 0.0
    np.testing.assert_array_equal(a[dg.N_MUSCLES + 1:dg.N_MUSCLES + 3], 0.5)


def test_sampled_activations_uniform_on_weight_range(expression_sets):
    ws = expression_sets[0]
    rng = np.random.default_rng(7)
    draws = np.array([dg.sample_activation(ws, rng) for _ in range(10_000)])
    for k in np.flatnonzero(ws.w > 0):
        p = stats.kstest(draws[:, k], "uniform", args=(0.0, ws.w[k])).pvalue
        assert p > 0.01
    p = stats.kstest(draws[:, dg.N_MUSCLES], "uniform").pvalue
    assert p > 0.01
    assert np.all((draws >= 0) & (draws <= 1))


# --- oracle -----------------------------------------------------------------


def test_every_au_has_terms(oracle):
    assert set(oracle.terms) == set(dg.ACTION_UNITS)
    with pytest.raises(ConfigError):
        dg.AuOracleSpec({au: () for au in dg.ACTION_UNITS})


def test_neutral_mesh_scores_zero(face, oracle):
    np.testing.assert_array_equal(dg.estimate_aus(oracle, face.x_rest, face.landmarks), 0.0)


def test_missing_landmark_raises(face, oracle):
    lm = dict(face.landmarks)
    del lm["chin"]
    with pytest.raises(KeyError, match="chin"):
        dg.estimate_aus(oracle, face.x_rest, lm)


def test_frontalis_raises_brow_aus_only(face, oracle):
    aus = dg.simulate_aus(face, oracle, activations(face, frontalis_inner=0.8, frontalis_outer=0.8))
    got = dict(zip(dg.ACTION_UNITS, aus))
    assert got["AU01"] > 0 and got["AU02"] > 0
    assert got["AU12"] == 0.0


@pytest.mark.parametrize("muscle, au", [
    ("zygomatic_major", "AU12"),
    ("frontalis_inner", "AU01"),
    ("corrugator", "AU04"),
    ("levator_labii_alaeque_nasi", "AU09"),
])
def test_au_response_monotone(face, oracle, muscle, au):
    k = dg.ACTION_UNITS.index(au)
    values = [dg.simulate_aus(face, oracle, activations(face, **{muscle: lvl}))[k] for lvl in (0.2, 0.5, 0.8)]
    assert values[0] <= values[1] <= values[2]
    assert values[2] > 0


def test_jaw_opening_drives_au26(face, oracle):
    a = activations(face)
    a[dg.N_MUSCLES] = 1.0
    aus = dg.simulate_aus(face, oracle, a)
    assert aus[dg.ACTION_UNITS.index("AU26")] > 0


# --- generation -------------------------------------------------------------


@pytest.fixture(scope="module")
def small(face, oracle, expression_sets):
    return dg.generate_dataset(face, oracle, expression_sets, n_per_expression=2, seed=11)


def test_small_dataset_shape(small):
    assert len(small) == 12
    assert dg.expression_counts(small) == {e: 2 for e in dg.EXPRESSIONS}
    assert np.all(small.aus_raw >= 0) and np.all(np.isfinite(small.aus_raw))
    assert np.all((small.activations >= 0) & (small.activations <= 1))


def test_generation_deterministic(face, oracle, expression_sets, small, tmp_path):
    again = dg.generate_dataset(face, oracle, expression_sets, n_per_expression=2, seed=11)
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for ds, p in zip((small, again), paths):
        dg.write_dataset(dg.normalize_dataset(ds), p, face.muscle_names)
    digests = [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]
    assert digests[0] == digests[1]


def test_sample_stream_depends_only_on_its_key(expression_sets, small):
    # sample (expression 3, index 1) comes from its own stream, whatever else is generated
    k = [i for i, t in enumerate(small.expression) if t == expression_sets[3].expression][1]
    a = dg.sample_activation(expression_sets[3], dg.sample_rng(11, 3, 1, 0))
    np.testing.assert_array_equal(a, small.activations[k])


def test_parallel_workers_match_serial(face, oracle, expression_sets, small):
    par = dg.generate_dataset(face, oracle, expression_sets, n_per_expression=2, seed=11, workers=2)
    np.testing.assert_array_equal(par.aus_raw, small.aus_raw)
    np.testing.assert_array_equal(par.activations, small.activations)


def test_failed_samples_are_dropped(face, oracle, expression_sets, caplog):
    with caplog.at_level(logging.WARNING):
        ds = dg.generate_dataset(face, oracle, expression_sets[:1], n_per_expression=1, seed=0, max_time=1e-3)
    assert len(ds) == 0
    assert "dropped" in caplog.text


def test_dataset_round_trip(small, face, tmp_path):
    ds = dg.normalize_dataset(small)
    path = tmp_path / "ds.csv"
    dg.write_dataset(ds, path, face.muscle_names)
    back = dg.read_dataset(path)
    assert back.expression == ds.expression
    np.testing.assert_array_equal(back.aus_raw, ds.aus_raw)
    np.testing.assert_array_equal(back.aus_norm, ds.aus_norm)
    np.testing.assert_array_equal(back.activations, ds.activations)
    header = path.read_text().splitlines()[0].split(",")
    assert len(header) == 1 + 17 + 17 + 56
    assert header[-4:] == list(dg.JAW_CHANNELS)


def test_read_dataset_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("expression,AU01_raw\nJoy,1\n")
    with pytest.raises(DataError):
        dg.read_dataset(bad)
    bad.write_text("")
    with pytest.raises(DataError):
        dg.read_dataset(bad)


# --- normalization ----------------------------------------------------------


def test_minmax_example():
    aus = np.tile(np.array([[0.0], [1.0], [2.0]]), (1, 17))
    norm, table = dg.normalize_columns(aus)
    np.testing.assert_array_equal(norm[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(table[0], [0.0, 2.0])


def test_normalization_idempotent(rng):
    aus = rng.uniform(0, 5, (50, 17))
    once, _ = dg.normalize_columns(aus)
    twice, _ = dg.normalize_columns(once)
    np.testing.assert_array_equal(once, twice)


def test_degenerate_column_warns(rng, caplog):
    aus = rng.uniform(0, 5, (10, 17))
    aus[:, 3] = 2.0
    with caplog.at_level(logging.WARNING):
        norm, _ = dg.normalize_columns(aus)
    np.testing.assert_array_equal(norm[:, 3], 0.0)
    assert "AU05" in caplog.text


def test_normalized_columns_attain_bounds_at_extremes(rng):
    aus = rng.uniform(0, 5, (200, 17))
    norm, _ = dg.normalize_columns(aus)
    for k in range(17):
        assert norm[np.argmin(aus[:, k]), k] == 0.0
        assert norm[np.argmax(aus[:, k]), k] == 1.0
        assert np.count_nonzero(norm[:, k] == 0.0) == 1 and np.count_nonzero(norm[:, k] == 1.0) == 1


def test_apply_table_clamps():
    table = np.tile([0.0, 5.0], (17, 1))
    np.testing.assert_array_equal(dg.apply_table(np.full(17, 2.5), table), 0.5)
    np.testing.assert_array_equal(dg.apply_table(np.full(17, 7.0), table), 1.0)


def test_au_order_is_shared_contract():
    assert AU_COLUMNS == tuple(f"{a}_r" for a in dg.ACTION_UNITS)
    assert dg.ACTION_UNITS == ("AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
                               "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU45")
