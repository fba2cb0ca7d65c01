import numpy as np
import pytest

from lrp_cmp.data import load_dataset, read_image
from lrp_cmp.synthetic import CLASSES, SyntheticDataset, generate_dataset, generate_sample, texture


@pytest.mark.parametrize("label", CLASSES)
def test_textures_differ(label):
    pattern = texture(label, 8)
    assert pattern.shape == (8, 8)
    others = [texture(other, 8) for other in CLASSES if other != label]
    assert all(not np.array_equal(pattern, other) for other in others)


def test_unknown_texture():
    with pytest.raises(ValueError):
        texture("zigzag", 4)


def test_samples_are_reproducible():
    config = SyntheticDataset(size=24, channels=1)
    first = generate_sample(np.random.default_rng(5), config)
    second = generate_sample(np.random.default_rng(5), config)
    assert first[0].tobytes() == second[0].tobytes()
    assert first[1] == second[1]
    assert first[0].shape == (1, 24, 24)
    assert 0.0 <= first[0].min() and first[0].max() <= 1.0


def test_objects_do_not_overlap():
    config = SyntheticDataset(size=32, max_objects=3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, boxes = generate_sample(rng, config)
        assert 1 <= len(boxes) <= 3
        mask = np.zeros((32, 32), int)
        for box in boxes:
            mask[box.y_min : box.y_max, box.x_min : box.x_max] += 1
        assert mask.max() == 1


def test_dataset_on_disk(tmp_path):
    manifest = generate_dataset(tmp_path, SyntheticDataset(n_images=4, size=16, min_side=4, max_side=8, seed=9))
    dataset = load_dataset(manifest)
    assert len(dataset.entries) == 4
    entry = dataset.entries[0]
    assert read_image(entry.image_path).original_dims == (16, 16)
    assert entry.annotation.size == (16, 16)
