import numpy as np
import pytest

from lrp_cmp.layers import AvgPool2D, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU
from lrp_cmp.model import Model, save_model

MODEL_SEEDS = range(20)
CLASS_LABELS = ["a", "b", "c"]


def random_convnet(
    seed: int,
    *,
    bias: bool = False,
    input_shape: tuple[int, int, int] | None = None,
    class_labels: list[str] | None = None,
) -> Model:
    """conv, relu, pool, flatten, dense, relu, dense with seed-dependent channels, padding, stride and pooling."""
    rng = np.random.default_rng(seed)
    class_labels = class_labels or CLASS_LABELS
    input_shape = input_shape or (int(rng.integers(1, 3)), 8, 8)
    filters = int(rng.integers(2, 5))
    pad = int(rng.integers(0, 2))
    stride = (2, 2) if seed % 3 == 0 and pad else (1, 1)
    pool = (MaxPool2D, AvgPool2D)[seed % 2]

    def parameters(*shape: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(np.prod(shape[1:])), shape)

    def offsets(n: int) -> np.ndarray:
        return rng.normal(0.0, 0.1, n) if bias else np.zeros(n)

    layers: list[Layer] = [
        Conv2D(
            kernels=parameters(filters, input_shape[0], 3, 3),
            bias=offsets(filters),
            stride=stride,
            padding=(pad, pad, pad, pad),
        ),
        ReLU(),
        pool(window=(2, 2), stride=(2, 2)),
        Flatten(),
    ]
    shape: tuple[int, ...] = input_shape
    for layer in layers:
        shape = layer.output_shape(shape)
    hidden = int(rng.integers(4, 9))
    layers += [
        Dense(weights=parameters(hidden, shape[0]), bias=offsets(hidden)),
        ReLU(),
        Dense(weights=parameters(len(class_labels), hidden), bias=offsets(len(class_labels))),
    ]
    return Model(input_shape=input_shape, layers=layers, class_labels=class_labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def population() -> list[Model]:
    return [random_convnet(seed) for seed in MODEL_SEEDS]


@pytest.fixture
def two_layer_model() -> Model:
    """Conv 2x3x3 on a 1x8x8 input, flattened into a 2-class dense layer."""
    rng = np.random.default_rng(7)
    return Model(
        input_shape=(1, 8, 8),
        layers=[
            Conv2D(kernels=rng.normal(size=(2, 1, 3, 3)), bias=np.zeros(2)),
            Flatten(),
            Dense(weights=rng.normal(size=(2, 72)), bias=np.array([0.1, -0.1])),
        ],
        class_labels=["cat", "dog"],
    )


@pytest.fixture
def model_manifest(tmp_path, two_layer_model):
    return save_model(two_layer_model, tmp_path / "model.json")
