import numpy as np
import pytest

from lrp_cmp.data import PreparedSample
from lrp_cmp.errors import DimensionMismatch
from lrp_cmp.layers import AvgPool2D, Conv2D, Dense, Flatten, ReLU
from lrp_cmp.metrics import BoundingBox, bin_index, union_mask
from lrp_cmp.model import Model
from lrp_cmp.occlusion import (
    OcclusionResult,
    delta_f,
    occlude,
    occlusion_curve,
    occlusion_experiment,
    write_curve,
    write_results,
)


def box(x_min, y_min, x_max, y_max, label="thing"):
    return BoundingBox(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max, class_label=label)


def summing_model(weights: np.ndarray) -> Model:
    """f(x) = sum(weights * x) on a single-channel image."""
    return Model(
        input_shape=(1, *weights.shape),
        layers=[Flatten(), Dense(weights=weights.reshape(1, -1), bias=np.zeros(1))],
        class_labels=["thing"],
    )


def test_occlude_left_column():
    mask = np.array([[True, False], [True, False]])
    np.testing.assert_array_equal(occlude(np.ones((1, 2, 2)), mask, np.zeros((1, 2, 2))), [[[0, 1], [0, 1]]])


def test_occlude_empty_and_full_masks(rng):
    image, fill = rng.random((3, 4, 5)), rng.random((3, 4, 5))
    assert occlude(image, np.zeros((4, 5), bool), fill).tobytes() == image.tobytes()
    assert occlude(image, np.ones((4, 5), bool), fill).tobytes() == fill.tobytes()


def test_occlude_shape_errors():
    with pytest.raises(DimensionMismatch):
        occlude(np.ones((1, 2, 2)), np.ones((2, 2), bool), np.zeros((1, 3, 2)))
    with pytest.raises(DimensionMismatch):
        occlude(np.ones((1, 2, 2)), np.ones((3, 2), bool), np.zeros((1, 2, 2)))


def test_object_and_context_masks_partition_the_image():
    mask = union_mask([box(1, 1, 3, 4), box(2, 0, 5, 2)], (6, 6))
    assert np.all(mask | ~mask) and not np.any(mask & ~mask)


def test_delta_f_of_linear_model():
    model = summing_model(np.ones((4, 4)))
    x = np.ones((1, 4, 4))
    occluded = occlude(x, union_mask([box(0, 0, 2, 2)], (4, 4)), np.zeros((1, 4, 4)))
    assert delta_f(model, x, occluded, 0) == -4.0
    assert delta_f(model, x, x, 0) == 0.0


def test_occluding_ignored_pixels_changes_nothing(rng):
    weights = np.zeros((6, 6))
    weights[:3, :3] = rng.normal(size=(3, 3))
    model = summing_model(weights)
    x = rng.random((1, 6, 6))
    mask = ~union_mask([box(0, 0, 3, 3)], (6, 6))
    assert delta_f(model, x, occlude(x, mask, rng.random((1, 6, 6))), 0) == 0.0


def test_full_image_box_has_no_context():
    model = summing_model(np.ones((4, 4)))
    sample = PreparedSample(image_id="a", pixels=np.ones((1, 4, 4)), boxes=[box(0, 0, 4, 4)])
    report = occlusion_experiment(model, [sample], np.zeros((1, 4, 4)))
    (result,) = report.results
    assert result.relative_box_size == 1.0
    assert result.delta_f_object == -16.0
    assert result.delta_f_context == 0.0
    assert [b.count for b in report.bins if b.count] == [1]
    assert report.bins[99].count == 1
    assert report.bins[99].std_obj == 0.0


def test_unknown_classes_are_skipped(caplog):
    model = summing_model(np.ones((4, 4)))
    sample = PreparedSample(image_id="a", pixels=np.ones((1, 4, 4)), boxes=[box(0, 0, 2, 2), box(0, 0, 1, 1, "other")])
    report = occlusion_experiment(model, [sample], np.zeros((1, 4, 4)))
    assert [r.class_label for r in report.results] == ["thing"]
    assert "other" in caplog.text


def _result(s_in, s_tot, obj, ctx):
    return OcclusionResult(
        image_id="x", class_label="c", S_in=s_in, S_tot=s_tot, delta_f_object=obj, delta_f_context=ctx
    )


def test_curve_statistics():
    bins = occlusion_curve([_result(10, 100, -2.0, 0.0), _result(10, 100, -4.0, -1.0), _result(75, 100, 1.0, 1.0)])
    assert sum(b.count for b in bins) == 3
    tenth = bins[9]
    assert (tenth.count, tenth.mean_obj, tenth.std_obj, tenth.mean_ctx, tenth.std_ctx) == (2, -3.0, 1.0, -0.5, 0.5)
    assert bins[74].count == 1 and bins[74].std_ctx == 0.0
    assert bins[0].mean_obj is None


def test_curve_bins_are_right_closed():
    bins = occlusion_curve([_result(25, 100, 0.0, 0.0), _result(251, 1000, 0.0, 0.0)])
    assert bins[24].count == 1
    assert bins[25].count == 1


def test_curve_bins_agree_with_localization_bins():
    # a 98x163 box in a 227x227 image lies just past the 31% edge
    s_in, s_tot = 98 * 163, 227 * 227
    bins = occlusion_curve([_result(s_in, s_tot, -1.0, 0.0)])
    assert bin_index(s_in, s_tot) == 32
    assert [index for index, b in enumerate(bins) if b.count] == [31]


def test_box_union_larger_than_image():
    with pytest.raises(DimensionMismatch):
        _result(101, 100, 0.0, 0.0)


def test_csv_outputs(tmp_path):
    results = [_result(10, 100, -2.0, 0.5)]
    assert write_results(results, tmp_path / "o.csv").read_text() == (
        "image_id,class,relative_box_size,delta_f_object,delta_f_context\nx,c,0.1,-2.0,0.5\n"
    )
    curve = write_curve(occlusion_curve(results), tmp_path / "c.csv").read_text().splitlines()
    assert curve[0] == "bin_low,bin_high,mean_obj,std_obj,mean_ctx,std_ctx,count"
    assert curve[10] == "0.09,0.1,-2.0,0.0,0.5,0.0,1"


def _blob_detector() -> Model:
    """Averages a 3x3-smoothed, rectified image: bright compact objects drive the logit."""
    return Model(
        input_shape=(1, 8, 8),
        layers=[
            Conv2D(kernels=np.full((1, 1, 3, 3), 1 / 9), bias=np.zeros(1), padding=(1, 1, 1, 1)),
            ReLU(),
            AvgPool2D(window=(8, 8), stride=(8, 8)),
            Flatten(),
            Dense(weights=[[1.0]], bias=[0.0]),
        ],
        class_labels=["blob"],
    )


def test_hiding_the_object_costs_more_than_hiding_the_context():
    rng = np.random.default_rng(11)
    samples = []
    for index in range(6):
        pixels = rng.uniform(0.0, 0.1, size=(1, 8, 8))
        y, x = (int(v) for v in rng.integers(0, 7, size=2))
        pixels[0, y : y + 2, x : x + 2] = 1.0
        samples.append(PreparedSample(image_id=f"s{index}", pixels=pixels, boxes=[box(x, y, x + 2, y + 2, "blob")]))
    mean_image = np.mean([s.pixels for s in samples], axis=0)
    results = occlusion_experiment(_blob_detector(), samples, mean_image).results
    assert np.mean([r.delta_f_object for r in results]) < np.mean([r.delta_f_context for r in results])
