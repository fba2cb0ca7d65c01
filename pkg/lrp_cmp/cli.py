"""Command-line entry point.

Exit codes: 0 on success, 1 when some work items failed, 2 for usage and configuration errors.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import pydantic as pd

from lrp_cmp.base import FrozenModel
from lrp_cmp.composite import ANALYZERS, resolve_rules
from lrp_cmp.data import load_dataset, read_image, transform_pixels
from lrp_cmp.errors import InvalidAssignment, LrpError
from lrp_cmp.evaluation import BASELINE, evaluate, occlusion, preprocess_mode, resolve_analyzer
from lrp_cmp.lrp import attribute, pool_channels
from lrp_cmp.model import load_model, save_model
from lrp_cmp.render import colorize, montage, write_image
from lrp_cmp.storage import read_attribution, write_attribution
from lrp_cmp.synthetic import SyntheticDataset, generate_dataset
from lrp_cmp.training import TrainingConfig, train_on_dataset

LOGGER = logging.getLogger("lrp_cmp")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2

PoolOrder = Literal["sum-then-pos", "pos-then-sum"]


class RunConfig(FrozenModel):
    """Options shared by the dataset commands; paths that are read must exist."""

    model: pd.FilePath
    dataset: pd.FilePath | None = None
    config: str | None = None
    out: Path
    jobs: pd.PositiveInt = 1
    preprocess: Literal["stretch", "crop"] = "stretch"
    pool_order: PoolOrder = "sum-then-pos"

    @property
    def positive_first(self) -> bool:
        return self.pool_order == "pos-then-sum"


def configure_logging(verbose: int, log_file: Path | None) -> None:
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING
    LOGGER.setLevel(logging.DEBUG if log_file else level)
    LOGGER.handlers.clear()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    LOGGER.addHandler(console)
    if log_file is not None:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        LOGGER.addHandler(file_handler)


def _exit_code(failed: int) -> int:
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_attribute(args: argparse.Namespace) -> int:
    run = RunConfig(
        model=args.model, config=args.config, out=args.out, preprocess=args.preprocess, pool_order=args.pool_order
    )
    model = load_model(run.model)
    analyzer = resolve_analyzer(run.config or "cmp-a1")
    if analyzer.config is None:
        raise InvalidAssignment(None, "the baseline analyzer has no rules to attribute with")
    class_index = model.class_index(args.class_name)
    sample = read_image(args.image)
    pixels = sample.pixels
    if pixels.shape[1:] != tuple(model.input_shape[1:]):
        pixels = transform_pixels(pixels, preprocess_mode(run.preprocess, model))
    attribution = attribute(model, pixels, class_index, analyzer.config)
    stem = f"{sample.image_id}.{args.class_name}"
    write_attribution(attribution, run.out / f"{stem}.attr")
    heatmap = pool_channels(attribution, positive_first=run.positive_first)
    write_image(colorize(heatmap), run.out / f"{stem}.png")
    print(f"logit\t{attribution.output_logit!r}")
    print(f"relevance_sum\t{attribution.total!r}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = RunConfig(
        model=args.model,
        dataset=args.dataset,
        config=args.config,
        out=args.out,
        jobs=args.jobs,
        preprocess=args.preprocess,
        pool_order=args.pool_order,
    )
    model = load_model(run.model)
    dataset = load_dataset(run.dataset)
    analyzer = resolve_analyzer(run.config or BASELINE)
    outcome = evaluate(
        model,
        dataset,
        analyzer,
        run.out,
        preprocess=run.preprocess,
        jobs=run.jobs,
        positive_first=run.positive_first,
    )
    LOGGER.info("Scored %d pairs, %d failures", outcome.completed, outcome.failed)
    return _exit_code(outcome.failed)


def cmd_occlusion(args: argparse.Namespace) -> int:
    run = RunConfig(model=args.model, dataset=args.dataset, out=args.out, jobs=args.jobs, preprocess=args.preprocess)
    model = load_model(run.model)
    dataset = load_dataset(run.dataset)
    outcome = occlusion(
        model, dataset, run.out, preprocess=run.preprocess, jobs=run.jobs, mean_image_path=args.mean_image
    )
    LOGGER.info("Occluded %d pairs, %d failures", outcome.completed, outcome.failed)
    return _exit_code(outcome.failed)


def cmd_render(args: argparse.Namespace) -> int:
    attribution = read_attribution(args.attr)
    heatmap = pool_channels(attribution, positive_first=args.pool_order == "pos-then-sum")
    if args.image is not None:
        rgb = montage(read_image(args.image).pixels, heatmap, clip_percentile=args.clip_percentile)
    else:
        rgb = colorize(heatmap, clip_percentile=args.clip_percentile)
    write_image(rgb, args.out)
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    rules = {}
    if args.config is not None:
        analyzer = resolve_analyzer(args.config)
        if analyzer.config is not None:
            rules = {index: rule.label for index, rule in resolve_rules(model, analyzer.config)}
    print(f"input\t{'x'.join(map(str, model.input_shape))}")
    print(f"classes\t{', '.join(model.class_labels)}")
    print(f"parameters_checksum\t{model.parameters_checksum}")
    print("index\ttype\toutput\tparameters\trule")
    for index, (layer, shape) in enumerate(zip(model.layers, model.layer_shapes[1:])):
        output = "x".join(map(str, shape))
        print(f"{index}\t{layer.type}\t{output}\t{layer.parameter_count()}\t{rules.get(index, '-')}")
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace) -> int:
    config = SyntheticDataset(n_images=args.count, size=args.size, seed=args.seed, channels=args.channels)
    print(generate_dataset(args.out, config))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = TrainingConfig(
        filters=args.filters, hidden=args.hidden, epochs=args.epochs, learning_rate=args.learning_rate, seed=args.seed
    )
    model = train_on_dataset(load_dataset(args.dataset), (args.size, args.size), config)
    print(save_model(model, args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrp-cmp", description="Composite LRP attributions and their evaluation")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    parser.add_argument("--log-file", type=Path, help="Also log, with timestamps, to this file")
    commands = parser.add_subparsers(dest="command", required=True)

    analyzers = ", ".join([*ANALYZERS, BASELINE])
    pool_order = {"choices": ["sum-then-pos", "pos-then-sum"], "default": "sum-then-pos"}
    preprocess = {"choices": ["stretch", "crop"], "default": "stretch"}

    attribute_parser = commands.add_parser("attribute", help="Attribute one image to one class")
    attribute_parser.add_argument("--model", type=Path, required=True)
    attribute_parser.add_argument("--config", help=f"Composite config file or one of: {', '.join(ANALYZERS)}")
    attribute_parser.add_argument("--image", type=Path, required=True)
    attribute_parser.add_argument("--class", dest="class_name", required=True)
    attribute_parser.add_argument("--out", type=Path, required=True)
    attribute_parser.add_argument("--preprocess", **preprocess)
    attribute_parser.add_argument("--pool-order", **pool_order)
    attribute_parser.set_defaults(handler=cmd_attribute)

    evaluate_parser = commands.add_parser("evaluate", help="Score attributions against the ground-truth boxes")
    evaluate_parser.add_argument("--model", type=Path, required=True)
    evaluate_parser.add_argument("--dataset", type=Path, required=True)
    evaluate_parser.add_argument("--config", required=True, help=f"Composite config file or one of: {analyzers}")
    evaluate_parser.add_argument("--out", type=Path, required=True)
    evaluate_parser.add_argument("--jobs", type=int, default=1)
    evaluate_parser.add_argument("--preprocess", **preprocess)
    evaluate_parser.add_argument("--pool-order", **pool_order)
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    occlusion_parser = commands.add_parser("occlusion", help="Object versus context occlusion")
    occlusion_parser.add_argument("--model", type=Path, required=True)
    occlusion_parser.add_argument("--dataset", type=Path, required=True)
    occlusion_parser.add_argument("--out", type=Path, required=True)
    occlusion_parser.add_argument("--jobs", type=int, default=1)
    occlusion_parser.add_argument("--preprocess", **preprocess)
    occlusion_parser.add_argument("--mean-image", type=Path, help="Fill image; defaults to the dataset mean")
    occlusion_parser.set_defaults(handler=cmd_occlusion)

    render_parser = commands.add_parser("render", help="Render a stored attribution as a PNG heatmap")
    render_parser.add_argument("--attr", type=Path, required=True)
    render_parser.add_argument("--out", type=Path, required=True)
    render_parser.add_argument("--image", type=Path, help="Put this input image next to the heatmap")
    render_parser.add_argument("--clip-percentile", type=float)
    render_parser.add_argument("--pool-order", **pool_order)
    render_parser.set_defaults(handler=cmd_render)

    inspect_parser = commands.add_parser("inspect", help="Print the layer table and the resolved rules")
    inspect_parser.add_argument("--model", type=Path, required=True)
    inspect_parser.add_argument("--config")
    inspect_parser.set_defaults(handler=cmd_inspect)

    synthesize_parser = commands.add_parser("synthesize", help="Write a synthetic box-annotated dataset")
    synthesize_parser.add_argument("--out", type=Path, required=True)
    synthesize_parser.add_argument("--count", type=int, default=2000)
    synthesize_parser.add_argument("--size", type=int, default=32)
    synthesize_parser.add_argument("--channels", type=int, choices=[1, 3], default=3)
    synthesize_parser.add_argument("--seed", type=int, default=0)
    synthesize_parser.set_defaults(handler=cmd_synthesize)

    train_parser = commands.add_parser("train", help="Train a small convnet on a box-annotated dataset")
    train_parser.add_argument("--dataset", type=Path, required=True)
    train_parser.add_argument("--out", type=Path, required=True, help="Model manifest to write")
    train_parser.add_argument("--size", type=int, default=32, help="Images are stretched to size x size")
    train_parser.add_argument("--epochs", type=int, default=10)
    train_parser.add_argument("--filters", type=int, default=8)
    train_parser.add_argument("--hidden", type=int, default=32)
    train_parser.add_argument("--learning-rate", type=float, default=0.02)
    train_parser.add_argument("--seed", type=int, default=0)
    train_parser.set_defaults(handler=cmd_train)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.log_file)
    try:
        return args.handler(args)
    except (LrpError, pd.ValidationError) as error:
        LOGGER.error("%s", error)
        return EXIT_USAGE
