import json

import numpy as np
import pytest

from conftest import fd_gradient_error, small_net
from neuroface import nn


def naive_forward(model, x):
    h = x
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < len(model.weights) - 1:
            h = np.maximum(h, 0.0)
    return h


# --- construction -----------------------------------------------------------


def test_parameter_counts():
    m = nn.init_mlp(0)
    assert m.n_weights == 37_300
    assert m.n_biases == 456


def test_init_determinism():
    a, b, c = nn.init_mlp(3), nn.init_mlp(3), nn.init_mlp(4)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_he_uniform_bounds():
    m = nn.init_mlp(0)
    for w in m.weights:
        assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[0])
    for b in m.biases:
        np.testing.assert_array_equal(b, 0.0)


# --- forward ----------------------------------------------------------------


def test_zero_network_zero_output(rng):
    m = nn.init_mlp(0)
    for w in m.weights:
        w[:] = 0.0
    np.testing.assert_array_equal(nn.forward(m, rng.uniform(size=17)), 0.0)


def test_forward_matches_naive(rng):
    for seed in range(5):
        m = nn.init_mlp(seed)
        x = rng.uniform(size=(8, 17))
        np.testing.assert_allclose(nn.forward(m, x), naive_forward(m, x), atol=1e-12)


def test_relu_region():
    m = nn.init_mlp(0, (1, 1, 1))
    m.weights[0][:] = 1.0
    m.weights[1][:] = 1.0
    assert nn.forward(m, np.array([-0.5]))[0] == 0.0
    assert nn.forward(m, np.array([-5.0]))[0] == 0.0


def test_dimension_mismatch():
    m = nn.init_mlp(0)
    with pytest.raises(ValueError):
        nn.forward(m, np.zeros(16))
    with pytest.raises(ValueError):
        nn.forward(m, np.full(17, np.nan))


def test_prediction_clamped_and_batch_equals_rows(rng):
    m = nn.init_mlp(1)
    x = rng.uniform(-3, 3, size=(20, 17))
    batch = nn.predict_activations(m, x)
    assert batch.shape == (20, 56)
    assert np.all((batch >= 0) & (batch <= 1))
    rows = np.array([nn.predict_activations(m, r) for r in x])
    np.testing.assert_allclose(batch, rows, rtol=0, atol=1e-12)


# --- gradients and training -------------------------------------------------


def test_gradients_match_finite_differences(rng):
    for _ in range(5):
        model, x, y = small_net(rng)
        assert fd_gradient_error(model, x, y) < 1e-4


def test_overfit_toy_dataset(rng):
    x = rng.uniform(size=(10, 17))
    y = rng.uniform(size=(10, 56))
    model = nn.init_mlp(0)
    first = nn.dataset_mse(model, x, y)
    _, hist = nn.train(model, x, y, nn.TrainConfig(learning_rate=1e-3, batch_size=10, epochs=200))
    assert hist[-1] <= first / 100


def test_training_reproducible(rng):
    x = rng.uniform(size=(40, 17))
    y = rng.uniform(size=(40, 56))
    cfg = nn.TrainConfig(epochs=3, seed=5)
    a, ha = nn.train(nn.init_mlp(0), x, y, cfg)
    b, hb = nn.train(nn.init_mlp(0), x, y, cfg)
    assert ha == hb
    np.testing.assert_array_equal(a.weights[-1], b.weights[-1])


def test_train_leaves_input_model_untouched(rng):
    m = nn.init_mlp(0)
    before = m.weights[0].copy()
    nn.train(m, rng.uniform(size=(5, 17)), rng.uniform(size=(5, 56)), nn.TrainConfig(epochs=1))
    np.testing.assert_array_equal(m.weights[0], before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(rng):
    m = nn.init_mlp(0)
    m.weights[0][0, 0] = np.inf
    with pytest.raises(nn.TrainingError, match="epoch 0"):
        nn.train(m, rng.uniform(size=(5, 17)), rng.uniform(size=(5, 56)), nn.TrainConfig(epochs=1))


def test_bad_training_inputs(rng):
    m = nn.init_mlp(0)
    with pytest.raises(ValueError):
        nn.train(m, np.zeros((0, 17)), np.zeros((0, 56)))
    with pytest.raises(ValueError):
        nn.train(m, np.zeros((3, 17)), np.zeros((3, 55)))
    with pytest.raises(ValueError):
        nn.TrainConfig(learning_rate=0.0)


# --- persistence ------------------------------------------------------------


def test_save_load_round_trip(tmp_path, rng):
    m = nn.init_mlp(2)
    m.norm_table = np.stack([np.zeros(17), np.linspace(1, 5, 17)], axis=1)
    path = tmp_path / "m.npz"
    nn.save_model(m, path)
    back = nn.load_model(path)
    x = rng.uniform(size=(4, 17))
    np.testing.assert_array_equal(nn.forward(back, x), nn.forward(m, x))
    np.testing.assert_array_equal(back.norm_table, m.norm_table)
    assert back.layer_dims == nn.LAYER_DIMS and back.seed == 2


def test_corrupted_header_rejected(tmp_path):
    m = nn.init_mlp(0)
    path = tmp_path / "m.npz"
    nn.save_model(m, path)
    with np.load(path) as z:
        arrays = dict(z)
    header = json.loads(bytes(arrays["header"]).decode())
    header["format_version"] = 99
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="format"):
        nn.load_model(path)
    header["format_version"] = nn.FORMAT_VERSION
    header["layer_dims"] = [17, 99, 100, 100, 100, 56]
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="shape"):
        nn.load_model(path)
