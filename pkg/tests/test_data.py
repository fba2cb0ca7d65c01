import json

import numpy as np
import pytest
from PIL import Image

from lrp_cmp.data import (
    Annotation,
    ImageSample,
    ShortestSideCenterCrop,
    StretchResize,
    bilinear_resize,
    dataset_mean,
    geometry,
    load_dataset,
    parse_boxes_json,
    parse_voc_annotation,
    preprocess,
    read_annotation,
    read_image,
    transform_pixels,
)
from lrp_cmp.errors import (
    DegenerateBox,
    DimensionMismatch,
    EmptyInput,
    MalformedDocument,
    MissingField,
    MissingFile,
    TargetLargerThanImage,
)
from lrp_cmp.metrics import BoundingBox
from lrp_cmp.synthetic import CLASSES, SyntheticDataset, generate_dataset

VOC_TEMPLATE = """<annotation>
  <folder>VOC2007</folder>
  <filename>000042.jpg</filename>
  <size><width>200</width><height>100</height><depth>3</depth></size>
  {objects}
</annotation>"""

VOC_OBJECT = """<object>
    <name>{name}</name>
    <pose>Unspecified</pose>
    <difficult>0</difficult>
    <bndbox><xmin>{xmin}</xmin><ymin>{ymin}</ymin><xmax>{xmax}</xmax><ymax>{ymax}</ymax></bndbox>
  </object>"""


def voc(*objects):
    return VOC_TEMPLATE.format(objects="\n  ".join(VOC_OBJECT.format(**o) for o in objects))


def box(x_min, y_min, x_max, y_max, label="cat"):
    return BoundingBox(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max, class_label=label)


def test_voc_single_object():
    annotation = parse_voc_annotation(voc(dict(name="cat", xmin=1, ymin=1, xmax=10, ymax=20)))
    assert annotation.image_id == "000042"
    assert annotation.size == (100, 200)
    assert annotation.boxes == [box(0, 0, 10, 20)]


def test_voc_two_objects_of_one_class():
    annotation = parse_voc_annotation(
        voc(dict(name="dog", xmin=5, ymin=6, xmax=50, ymax=60), dict(name="dog", xmin=100, ymin=1, xmax=200, ymax=99))
    )
    assert annotation.boxes == [box(4, 5, 50, 60, "dog"), box(99, 0, 200, 99, "dog")]
    assert annotation.classes == ["dog"]


def test_voc_missing_bndbox():
    document = voc(dict(name="cat", xmin=1, ymin=1, xmax=10, ymax=20)).replace("<bndbox>", "<box>")
    document = document.replace("</bndbox>", "</box>")
    with pytest.raises(MissingField):
        parse_voc_annotation(document)


def test_voc_missing_coordinate():
    with pytest.raises(MissingField):
        parse_voc_annotation(voc(dict(name="cat", xmin=1, ymin=1, xmax=10, ymax=20)).replace("<ymax>20</ymax>", ""))


@pytest.mark.parametrize(
    "bndbox",
    [
        dict(xmin=10, ymin=1, xmax=5, ymax=20),
        dict(xmin=7, ymin=1, xmax=7, ymax=20),
        dict(xmin=1, ymin=4, xmax=10, ymax=4),
    ],
)
def test_voc_degenerate_box(bndbox):
    with pytest.raises(DegenerateBox):
        parse_voc_annotation(voc(dict(name="cat", **bndbox)))


@pytest.mark.parametrize("document", ["<annotation><object>", "<image/>", "not xml at all"])
def test_voc_malformed(document):
    with pytest.raises(MalformedDocument):
        parse_voc_annotation(document)


def test_voc_without_objects():
    assert parse_voc_annotation(voc()).boxes == []


def test_boxes_json():
    document = json.dumps(
        {"image_id": "a", "boxes": [{"label": "cat", "x_min": 0, "y_min": 1, "x_max": 4, "y_max": 5}], "size": [8, 8]}
    )
    annotation = parse_boxes_json(document)
    assert annotation == Annotation(image_id="a", boxes=[box(0, 1, 4, 5)], size=(8, 8))


def test_boxes_json_errors():
    with pytest.raises(MissingField):
        parse_boxes_json('{"boxes": []}')
    with pytest.raises(MalformedDocument):
        parse_boxes_json('{"image_id": "a", "boxes": [], "extra": 1}')


def test_read_annotation_missing(tmp_path):
    with pytest.raises(MissingFile):
        read_annotation(tmp_path / "absent.xml", "voc-xml")


def _sample(height, width, channels=3, seed=0):
    pixels = np.random.default_rng(seed).random((channels, height, width))
    return ImageSample(image_id="img", pixels=pixels)


def test_crop_geometry():
    sample = _sample(100, 200)
    pixels, annotation = preprocess(
        sample, Annotation(image_id="img", boxes=[box(120, 10, 180, 60)]), ShortestSideCenterCrop(target=(100, 100))
    )
    assert pixels.shape == (3, 100, 100)
    assert annotation.boxes == [box(70, 10, 100, 60)]
    np.testing.assert_array_equal(pixels, sample.pixels[:, :, 50:150])


def test_crop_of_square_image_is_a_resize():
    sample = _sample(20, 20)
    mode = ShortestSideCenterCrop(target=(10, 10))
    pixels, annotation = preprocess(sample, Annotation(image_id="img", boxes=[box(2, 4, 8, 10)]), mode)
    np.testing.assert_array_equal(pixels, bilinear_resize(sample.pixels, (10, 10)))
    assert annotation.boxes == [box(1, 2, 4, 5)]


def test_stretch_geometry():
    sample = _sample(50, 100)
    pixels, annotation = preprocess(
        sample, Annotation(image_id="img", boxes=[box(10, 10, 20, 20)]), StretchResize(target=(100, 100))
    )
    assert pixels.shape == (3, 100, 100)
    assert annotation.boxes == [box(10, 20, 20, 40)]
    assert annotation.size == (100, 100)


def test_box_outside_the_crop_is_dropped(caplog):
    _, annotation = preprocess(
        _sample(100, 200),
        Annotation(image_id="img", boxes=[box(0, 0, 40, 40), box(60, 0, 90, 40, "dog")]),
        ShortestSideCenterCrop(target=(100, 100)),
    )
    assert annotation.boxes == [box(10, 0, 40, 40, "dog")]
    assert "Dropping box cat" in caplog.text


def test_annotation_size_must_match_image():
    with pytest.raises(DimensionMismatch):
        preprocess(_sample(10, 20), Annotation(image_id="img", boxes=[], size=(20, 10)), StretchResize(target=(8, 8)))


def test_crop_without_upscaling():
    with pytest.raises(TargetLargerThanImage):
        geometry((5, 5), ShortestSideCenterCrop(target=(10, 10), allow_upscale=False))
    assert geometry((5, 5), ShortestSideCenterCrop(target=(10, 10))).resized == (10, 10)


@pytest.mark.parametrize("size", [(3, 7), (16, 16), (40, 9)])
def test_constant_image_stays_constant(size):
    pixels = np.full((3, 11, 13), 0.3)
    np.testing.assert_array_equal(bilinear_resize(pixels, size), np.full((3, *size), 0.3))


def test_resize_to_same_size_is_identity(rng):
    pixels = rng.random((1, 6, 5))
    np.testing.assert_array_equal(bilinear_resize(pixels, (6, 5)), pixels)


def test_downscale_by_two_averages_pairs():
    pixels = np.arange(8.0).reshape(1, 2, 4)
    np.testing.assert_allclose(bilinear_resize(pixels, (1, 2)), [[[2.5, 4.5]]])


def test_transform_pixels_shape(rng):
    assert transform_pixels(rng.random((1, 30, 17)), ShortestSideCenterCrop(target=(8, 12))).shape == (1, 8, 12)


def test_dataset_mean():
    zeros, ones = np.zeros((3, 2, 2)), np.ones((3, 2, 2))
    np.testing.assert_array_equal(dataset_mean([zeros, ones]), np.full((3, 2, 2), 0.5))
    np.testing.assert_array_equal(dataset_mean([ImageSample(image_id="x", pixels=ones)]), ones)


def test_dataset_mean_of_fixtures():
    images = [
        np.array([[[0.0, 0.3], [0.6, 0.9]]]),
        np.array([[[0.3, 0.3], [0.0, 0.0]]]),
        np.array([[[0.6, 0.0], [0.3, 0.6]]]),
    ]
    np.testing.assert_allclose(dataset_mean(images), [[[0.3, 0.2], [0.3, 0.5]]])


def test_dataset_mean_after_preprocessing():
    images = [np.zeros((1, 10, 20)), np.ones((1, 20, 10))]
    mean = dataset_mean(images, StretchResize(target=(4, 4)))
    np.testing.assert_array_equal(mean, np.full((1, 4, 4), 0.5))


def test_dataset_mean_errors():
    with pytest.raises(EmptyInput):
        dataset_mean([])
    with pytest.raises(DimensionMismatch):
        dataset_mean([np.zeros((1, 2, 2)), np.zeros((1, 2, 3))])


def test_image_sample_validation():
    with pytest.raises(DimensionMismatch):
        ImageSample(image_id="x", pixels=np.zeros((2, 4, 4)))
    with pytest.raises(DimensionMismatch):
        ImageSample(image_id="x", pixels=np.full((1, 4, 4), 1.5))


def test_read_rgb_png(tmp_path):
    array = np.arange(18, dtype=np.uint8).reshape(2, 3, 3) * 10
    Image.fromarray(array).save(tmp_path / "rgb.png")
    sample = read_image(tmp_path / "rgb.png")
    assert sample.image_id == "rgb"
    assert sample.original_dims == (2, 3)
    np.testing.assert_array_equal(sample.pixels, array.transpose(2, 0, 1) / 255.0)


def test_read_grayscale_png(tmp_path):
    array = np.array([[0, 255], [51, 102]], dtype=np.uint8)
    Image.fromarray(array).save(tmp_path / "gray.png")
    np.testing.assert_array_equal(read_image(tmp_path / "gray.png").pixels, [array / 255.0])


def test_read_ppm(tmp_path):
    array = np.full((4, 5, 3), 255, dtype=np.uint8)
    Image.fromarray(array).save(tmp_path / "white.ppm")
    np.testing.assert_array_equal(read_image(tmp_path / "white.ppm").pixels, np.ones((3, 4, 5)))


def test_read_image_errors(tmp_path):
    with pytest.raises(MissingFile):
        read_image(tmp_path / "absent.png")
    (tmp_path / "garbage.png").write_bytes(b"not an image")
    with pytest.raises(MalformedDocument):
        read_image(tmp_path / "garbage.png")
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "gray.bmp")
    with pytest.raises(MalformedDocument):
        read_image(tmp_path / "gray.bmp")


def test_load_synthetic_dataset(tmp_path):
    manifest = generate_dataset(tmp_path, SyntheticDataset(n_images=6, size=16, min_side=4, max_side=6, seed=3))
    dataset = load_dataset(manifest)
    assert [entry.image_id for entry in dataset.entries] == [f"img{i:05d}" for i in range(6)]
    assert set(dataset.classes) <= set(CLASSES)
    sample = dataset.entries[0].prepare(StretchResize(target=(16, 16)))
    assert sample.pixels.shape == (3, 16, 16)
    assert sample.boxes == dataset.entries[0].annotation.boxes


def test_load_voc_dataset(tmp_path, caplog):
    (tmp_path / "JPEGImages").mkdir()
    (tmp_path / "Annotations").mkdir()
    Image.fromarray(np.zeros((100, 200, 3), dtype=np.uint8)).save(tmp_path / "JPEGImages" / "000042.png")
    (tmp_path / "Annotations" / "000042.xml").write_text(
        voc(dict(name="cat", xmin=1, ymin=1, xmax=10, ymax=20), dict(name="sofa", xmin=1, ymin=1, xmax=5, ymax=5))
    )
    (tmp_path / "Annotations" / "000043.xml").write_text(
        voc(dict(name="sofa", xmin=1, ymin=1, xmax=5, ymax=5)).replace("000042", "000043")
    )
    manifest = tmp_path / "dataset.json"
    manifest.write_text(
        json.dumps(
            {
                "images_dir": "JPEGImages",
                "annotations_dir": "Annotations",
                "annotation_format": "voc-xml",
                "classes": ["cat", "dog"],
            }
        )
    )
    dataset = load_dataset(manifest)
    assert [entry.image_id for entry in dataset.entries] == ["000042"]
    assert dataset.entries[0].annotation.boxes == [box(0, 0, 10, 20)]
    assert "sofa" in caplog.text
    assert dataset.entries[0].prepare(StretchResize(target=(50, 100))).boxes == [box(0, 0, 5, 10)]


def test_load_dataset_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "dataset.json")
    (tmp_path / "annotations").mkdir()
    manifest = tmp_path / "dataset.json"
    manifest.write_text('{"images_dir": "images", "annotations_dir": "annotations", "annotation_format": "boxes-json"}')
    with pytest.raises(EmptyInput):
        load_dataset(manifest)
    manifest.write_text('{"images_dir": "images"}')
    with pytest.raises(MalformedDocument):
        load_dataset(manifest)
