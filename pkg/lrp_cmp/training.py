"""Deterministic minibatch SGD of a small convnet on a box-annotated dataset.

The network is conv3x3 (padding 1), relu, 2x2 max pooling, flatten, dense, relu, dense. Every image is one
training example; its target spreads evenly over the classes of its boxes and the loss is softmax
cross-entropy. The seed fixes initialization and the order of the examples, so two runs on the same data give
the same parameters.
"""

import logging
from collections.abc import Sequence

import numpy as np
from pydantic import Field, PositiveFloat, PositiveInt

from lrp_cmp.base import FrozenModel
from lrp_cmp.data import Dataset, PreparedSample, StretchResize
from lrp_cmp.errors import EmptyInput
from lrp_cmp.evaluation import prepare_samples
from lrp_cmp.layers import Conv2D, Dense, Flatten, MaxPool2D, ReLU, windows
from lrp_cmp.model import Model, forward
from lrp_cmp.typing import Array

LOGGER = logging.getLogger(__name__)


class TrainingConfig(FrozenModel):
    filters: PositiveInt = 8
    hidden: PositiveInt = 32
    epochs: PositiveInt = 10
    batch_size: PositiveInt = 16
    learning_rate: PositiveFloat = 0.02
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    seed: int = 0


def initial_parameters(
    config: TrainingConfig, input_shape: tuple[int, int, int], n_classes: int, rng: np.random.Generator
) -> list[Array]:
    """He-initialized weights and zero biases, in layer order."""
    channels, height, width = input_shape
    pooled = config.filters * (height // 2) * (width // 2)

    def he(*shape: int) -> Array:
        return rng.normal(0.0, np.sqrt(2.0 / np.prod(shape[1:])), shape)

    return [
        he(config.filters, channels, 3, 3),
        np.zeros(config.filters),
        he(config.hidden, pooled),
        np.zeros(config.hidden),
        he(n_classes, config.hidden),
        np.zeros(n_classes),
    ]


def build_model(parameters: Sequence[Array], input_shape: tuple[int, int, int], class_labels: list[str]) -> Model:
    kernels, conv_bias, hidden_weights, hidden_bias, out_weights, out_bias = parameters
    return Model(
        input_shape=input_shape,
        layers=[
            Conv2D(kernels=kernels, bias=conv_bias, padding=(1, 1, 1, 1)),
            ReLU(),
            MaxPool2D(window=(2, 2), stride=(2, 2)),
            Flatten(),
            Dense(weights=hidden_weights, bias=hidden_bias),
            ReLU(),
            Dense(weights=out_weights, bias=out_bias),
        ],
        class_labels=class_labels,
    )


def class_target(classes: Sequence[str], class_labels: list[str]) -> Array:
    target = np.zeros(len(class_labels))
    for label in set(classes):
        target[class_labels.index(label)] = 1.0
    return target / target.sum()


def loss_and_gradients(model: Model, x: Array, target: Array) -> tuple[float, list[Array]]:
    """Cross-entropy of one example and its gradient wrt. the parameters, in `initial_parameters` order."""
    trace = forward(model, x)
    shifted = trace.logits - trace.logits.max()
    log_probabilities = shifted - np.log(np.exp(shifted).sum())
    loss = -float(np.sum(target * log_probabilities))
    grad = np.exp(log_probabilities) - target
    gradients: dict[int, list[Array]] = {}
    for index in reversed(range(len(model.layers))):
        layer, activations = model.layers[index], trace[index]
        match layer:
            case Dense():
                gradients[index] = [np.outer(grad, activations.input), grad]
            case Conv2D():
                patches = windows(layer.pad(activations.input), layer.window, layer.stride)
                gradients[index] = [np.tensordot(grad, patches, axes=([1, 2], [1, 2])), grad.sum(axis=(1, 2))]
        if index:
            grad = layer.backward(activations.input, grad)
    return loss, [g for index in sorted(gradients) for g in gradients[index]]


def accuracy(model: Model, samples: Sequence[PreparedSample]) -> float:
    """Fraction of images whose highest logit is one of their box classes."""
    hits = 0
    for sample in samples:
        predicted = model.class_labels[int(np.argmax(forward(model, sample.pixels).logits))]
        hits += predicted in sample.classes
    return hits / len(samples)


def train_model(
    samples: Sequence[PreparedSample], class_labels: list[str], config: TrainingConfig | None = None
) -> Model:
    config = config or TrainingConfig()
    samples = [sample for sample in samples if set(sample.classes) & set(class_labels)]
    if not samples:
        raise EmptyInput("No image with a box of a known class to train on")
    input_shape = samples[0].pixels.shape
    rng = np.random.default_rng(config.seed)
    parameters = initial_parameters(config, input_shape, len(class_labels), rng)
    velocity = [np.zeros_like(p) for p in parameters]
    targets = [class_target([c for c in sample.classes if c in class_labels], class_labels) for sample in samples]
    for epoch in range(config.epochs):
        total = 0.0
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            model = build_model(parameters, input_shape, class_labels)
            sums = [np.zeros_like(p) for p in parameters]
            for i in batch:
                loss, gradients = loss_and_gradients(model, samples[i].pixels, targets[i])
                total += loss
                for acc, g in zip(sums, gradients):
                    acc += g
            for p, v, g in zip(parameters, velocity, sums):
                v *= config.momentum
                v -= config.learning_rate * g / len(batch)
                p += v
        LOGGER.info("Epoch %d/%d: mean loss %.4f", epoch + 1, config.epochs, total / len(samples))
    model = build_model(parameters, input_shape, class_labels)
    LOGGER.info("Training accuracy %.3f over %d images", accuracy(model, samples), len(samples))
    return model


def train_on_dataset(dataset: Dataset, size: tuple[int, int], config: TrainingConfig | None = None) -> Model:
    """Stretch every image to ``size`` and train on all of them; images that fail to load are skipped."""
    samples, failed = prepare_samples(dataset, StretchResize(target=size), 1)
    if failed:
        LOGGER.warning("Training without %d images that could not be prepared", failed)
    return train_model(samples, dataset.classes, config)
