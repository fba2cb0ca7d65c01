import json
import zlib

import numpy as np
import pytest

from conftest import MODEL_SEEDS, random_convnet
from lrp_cmp.errors import (
    ChecksumMismatch,
    IndexOutOfRange,
    MissingFile,
    NonFiniteWeight,
    ShapeMismatch,
    UnknownLayerType,
)
from lrp_cmp.layers import Dense, Flatten, MaxPool2D, ReLU
from lrp_cmp.model import Model, forward, gradient_wrt_input, load_model, logit, save_model


def write_manifest(tmp_path, layers, blob, *, input_shape=(1, 8, 8), class_labels=("a", "b"), checksum=None):
    raw = np.asarray(blob, dtype="<f8").tobytes()
    (tmp_path / "weights.bin").write_bytes(raw)
    manifest = {
        "input_shape": list(input_shape),
        "class_labels": list(class_labels),
        "weights_blob": "weights.bin",
        "checksum": zlib.crc32(raw) if checksum is None else checksum,
        "layers": layers,
    }
    path = tmp_path / "model.json"
    path.write_text(json.dumps(manifest))
    return path


def dense_model(weights, bias) -> Model:
    """A single dense layer over a flattened (1, 1, n) input."""
    weights = np.asarray(weights, dtype=np.float64)
    labels = [f"class{i}" for i in range(weights.shape[0])]
    layers = [Flatten(), Dense(weights=weights, bias=bias)]
    return Model(input_shape=(1, 1, weights.shape[1]), layers=layers, class_labels=labels)


FLATTEN_DENSE = [
    {"type": "flatten"},
    {"type": "dense", "in_features": 64, "out_features": 2, "weight_offset": 0, "bias_offset": 128},
]


def test_load_hand_written_manifest(tmp_path):
    blob = np.concatenate([np.linspace(-1, 1, 128), [0.5, -0.5]])
    model = load_model(write_manifest(tmp_path, FLATTEN_DENSE, blob))
    assert len(model.layers) == 2
    assert model.input_shape == (1, 8, 8)
    assert model.class_labels == ["a", "b"]
    np.testing.assert_array_equal(model.layers[1].weights, blob[:128].reshape(2, 64))
    np.testing.assert_array_equal(model.layers[1].bias, [0.5, -0.5])


def test_missing_bias_offset_means_zero_bias(tmp_path):
    layers = [{"type": "flatten"}, {"type": "dense", "in_features": 64, "out_features": 2, "weight_offset": 0}]
    model = load_model(write_manifest(tmp_path, layers, np.ones(128)))
    np.testing.assert_array_equal(model.layers[1].bias, [0.0, 0.0])


def test_pool_stride_defaults_to_window(tmp_path):
    layers = [
        {"type": "maxpool2d", "window": [2, 2]},
        {"type": "flatten"},
        {"type": "dense", "in_features": 16, "out_features": 2, "weight_offset": 0},
    ]
    model = load_model(write_manifest(tmp_path, layers, np.ones(32)))
    assert model.layers[0] == MaxPool2D(window=(2, 2), stride=(2, 2))


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingFile):
        load_model(tmp_path / "absent.json")


def test_missing_blob(tmp_path):
    path = write_manifest(tmp_path, FLATTEN_DENSE, np.ones(130))
    (tmp_path / "weights.bin").unlink()
    with pytest.raises(MissingFile):
        load_model(path)


def test_blob_too_short(tmp_path):
    layers = [{"type": "dense", "in_features": 3, "out_features": 4, "weight_offset": 0}]
    with pytest.raises(ShapeMismatch):
        load_model(write_manifest(tmp_path, layers, np.ones(11), input_shape=(1, 1, 3), class_labels="abcd"))


def test_unknown_layer_type(tmp_path):
    with pytest.raises(UnknownLayerType):
        load_model(write_manifest(tmp_path, [{"type": "softmax"}], np.ones(1)))


def test_non_finite_weight(tmp_path):
    blob = np.ones(130)
    blob[3] = np.nan
    with pytest.raises(NonFiniteWeight):
        load_model(write_manifest(tmp_path, FLATTEN_DENSE, blob))


def test_checksum_mismatch(tmp_path):
    raw = np.ones(130, dtype="<f8").tobytes()
    with pytest.raises(ChecksumMismatch):
        load_model(write_manifest(tmp_path, FLATTEN_DENSE, np.ones(130), checksum=zlib.crc32(raw) ^ 1))


def test_output_must_match_class_labels(tmp_path):
    with pytest.raises(ShapeMismatch):
        load_model(write_manifest(tmp_path, FLATTEN_DENSE, np.ones(130), class_labels=("a", "b", "c")))


def test_save_load_round_trip(tmp_path, population):
    for seed, model in enumerate(population[:5]):
        path = save_model(model, tmp_path / f"model{seed}.json")
        loaded = load_model(path)
        assert loaded.parameters_checksum == model.parameters_checksum
        assert loaded.layer_shapes == model.layer_shapes
        x = np.random.default_rng(seed).random(model.input_shape)
        np.testing.assert_array_equal(forward(loaded, x).logits, forward(model, x).logits)
        assert loaded.parameters_checksum == json.loads(path.read_text())["checksum"]


def test_parameters_checksum_follows_the_parameters_not_the_blob_layout(tmp_path):
    weights, bias = np.arange(128.0), np.array([-1.0, 1.0])
    bias_first = [
        {"type": "flatten"},
        {"type": "dense", "in_features": 64, "out_features": 2, "weight_offset": 2, "bias_offset": 0},
    ]
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    packed = write_manifest(tmp_path / "a", FLATTEN_DENSE, np.concatenate([weights, bias]))
    reordered = write_manifest(tmp_path / "b", bias_first, np.concatenate([bias, weights]))
    assert load_model(packed).parameters_checksum == load_model(reordered).parameters_checksum
    assert load_model(reordered).parameters_checksum != json.loads(reordered.read_text())["checksum"]


def test_dense_forward_example():
    model = dense_model([[1.0, 1.0]], [0.0])
    trace = forward(model, np.array([[[1.0, 2.0]]]))
    np.testing.assert_array_equal(trace.logits, [3.0])
    assert len(trace) == 2
    np.testing.assert_array_equal(trace[1].input, [1.0, 2.0])


def test_forward_rejects_wrong_shape(two_layer_model):
    with pytest.raises(ShapeMismatch):
        forward(two_layer_model, np.zeros((1, 8, 7)))


def test_forward_is_deterministic(two_layer_model, rng):
    x = rng.random((1, 8, 8))
    first, second = forward(two_layer_model, x), forward(two_layer_model, x)
    assert first.logits.tobytes() == second.logits.tobytes()


def test_trace_is_read_only(two_layer_model, rng):
    trace = forward(two_layer_model, rng.random((1, 8, 8)))
    with pytest.raises(ValueError):
        trace.logits[0] = 1.0


def test_logit():
    model = dense_model(np.eye(2), [0.1, 2.3])
    trace = forward(model, np.zeros((1, 1, 2)))
    assert logit(trace, 1) == 2.3
    assert logit(trace, 0) == 0.1
    with pytest.raises(IndexOutOfRange):
        logit(trace, 5)


def test_unknown_class_label_lists_labels(two_layer_model):
    with pytest.raises(IndexOutOfRange, match="cat, dog"):
        two_layer_model.class_index("bird")


def test_gradient_of_linear_model():
    model = dense_model([[2.0, 3.0]], [0.0])
    trace = forward(model, np.array([[[-4.0, 0.5]]]))
    np.testing.assert_array_equal(gradient_wrt_input(model, trace, 0), [[[2.0, 3.0]]])


def test_gradient_through_relu():
    model = Model(
        input_shape=(1, 1, 2),
        layers=[Flatten(), ReLU(), Dense(weights=[[1.0, 1.0]], bias=[0.0])],
        class_labels=["sum"],
    )
    trace = forward(model, np.array([[[-1.0, 2.0]]]))
    np.testing.assert_array_equal(gradient_wrt_input(model, trace, 0), [[[0.0, 1.0]]])


def _is_smooth_at(model, x, margin=1e-4):
    """No ReLU input and no positive max-pool winner within `margin` of a kink."""
    for layer, activations in zip(model.layers, forward(model, x).layers):
        if isinstance(layer, ReLU) and np.any(np.abs(activations.input) < margin):
            return False
        if isinstance(layer, MaxPool2D):
            patches = np.sort(
                np.lib.stride_tricks.sliding_window_view(activations.input, layer.window, axis=(1, 2))[
                    :, :: layer.stride[0], :: layer.stride[1]
                ].reshape(-1, layer.window_size),
                axis=1,
            )
            # windows of rectified zeros are flat, not kinks
            if np.any((patches[:, -1] - patches[:, -2] < margin) & (patches[:, -1] > 0)):
                return False
    return True


def _smooth_inputs(model, rng, count=5, attempts=200):
    inputs = []
    for _ in range(attempts):
        x = rng.random(model.input_shape)
        if _is_smooth_at(model, x):
            inputs.append(x)
            if len(inputs) == count:
                return inputs
    raise AssertionError(f"only {len(inputs)} of {attempts} inputs are away from every kink")


@pytest.mark.parametrize("seed", MODEL_SEEDS)
def test_gradient_matches_finite_differences(seed):
    model = random_convnet(seed, bias=True)
    class_index = seed % len(model.class_labels)
    h = 1e-6
    for x in _smooth_inputs(model, np.random.default_rng(seed)):
        grad = gradient_wrt_input(model, forward(model, x), class_index)
        numeric = np.zeros(x.size)
        for i in range(x.size):
            step = np.zeros(x.size)
            step[i] = h
            up = logit(forward(model, x + step.reshape(x.shape)), class_index)
            down = logit(forward(model, x - step.reshape(x.shape)), class_index)
            numeric[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(grad.reshape(-1), numeric, rtol=1e-3, atol=1e-6)
