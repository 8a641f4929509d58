"""General parameters"""

from __future__ import annotations

import argparse

from ..compress.groupflow import VARIANTS


def get_description_parser() -> argparse.ArgumentParser:
    """Make an argument parse object."""

    parser: argparse.ArgumentParser = argparse.ArgumentParser(
        prog="speede-ctl",
        description="Desk-scale compression toolkit for deformable Gaussian splatting models. "
        "Generates synthetic dynamic scenes, prunes Gaussians by temporal sensitivity, "
        "groups their motion into shared rigid flows and benchmarks the result.",
    )
    parser.add_argument(
        "--version",
        action="store_const",
        const=True,
        default=False,
        help="print speede-ctl module version",
    )
    return parser


def float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from e


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from e


def get_config_parser() -> argparse.ArgumentParser:
    """Flags shared by every subcommand."""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        "--debug",
        help="Enable debug logging messages.",
        action="store_const",
        const=True,
        default=False,
    )
    parser.add_argument("--seed", type=int, help="random seed for every seeded step")
    parser.add_argument(
        "--threads",
        type=int,
        help="renderer and fitting threads (falls back to SPEEDE_THREADS, then 1)",
    )
    parser.add_argument("--config", help="TOML file with [scene], [prune], [noise], "
                        "[finetune], [grouping] and [bench] tables")
    parser.add_argument("--out", default="out", help="output directory")
    return parser


def add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("bundle", help="scene bundle directory")
    parser.add_argument(
        "--model",
        help="model directory written by prune or group (defaults to the bundle's own model)",
    )


def add_command_args_synth(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", help="scene spec TOML ([scene] table or top level keys)")
    parser.add_argument("--gaussians", type=int, dest="n_gaussians", help="Gaussian count")
    parser.add_argument("--clusters", type=int, dest="n_clusters", help="rigid cluster count")
    parser.add_argument("--frames", type=int, dest="n_frames", help="frame count")
    parser.add_argument("--views", type=int, dest="n_views", help="training view count")
    parser.add_argument("--test-views", type=int, dest="n_test_views", help="held-out view count")
    parser.add_argument("--width", type=int, help="image width in pixels")
    parser.add_argument("--height", type=int, help="image height in pixels")
    parser.add_argument("--noise", type=float, help="trajectory jitter sigma")
    parser.add_argument("--pose-jitter-rot", type=float, help="training pose rotation sigma (radians)")
    parser.add_argument("--pose-jitter-trans", type=float, help="training pose translation sigma")


def add_command_args_prune(parser: argparse.ArgumentParser) -> None:
    add_model_args(parser)
    parser.add_argument(
        "--fractions", type=float_list, help="prune fractions per event, e.g. 0.8,0.3"
    )
    parser.add_argument("--densify-end", type=int, help="iteration of the first prune event")
    parser.add_argument(
        "--asp",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="perturb score rendering timestamps with annealed noise",
    )
    parser.add_argument("--beta", type=float, help="noise scale")
    parser.add_argument("--tau", type=int, help="iteration at which the noise vanishes")
    parser.add_argument("--delta-t", type=float, help="mean frame interval (default: from views)")
    parser.add_argument(
        "--scorer",
        choices=["sensitivity", "opacity"],
        default="sensitivity",
        help="ranking used for pruning",
    )
    parser.add_argument("--finetune-steps", type=int, help="color/opacity steps after each event")
    parser.add_argument("--ssim-weight", type=float, help="D-SSIM weight of the fine-tune loss")


def add_command_args_group(parser: argparse.ArgumentParser) -> None:
    add_model_args(parser)
    parser.add_argument("--groups", type=int, help="number of groups J")
    parser.add_argument("--lambda-r", type=float, help="std weight of the trajectory similarity")
    parser.add_argument("--n-max", type=int, help="member sample cap per rigid fit")
    parser.add_argument("--refine-iters", type=int, help="trajectory loss refinement iterations")
    parser.add_argument("--refine-step", type=float, help="initial refinement step")
    parser.add_argument("--variant", choices=VARIANTS, help="group flow variant")
    parser.add_argument("--k", type=int, dest="k_neighbors", help="blend neighbours for lbs")


def add_command_args_deform(parser: argparse.ArgumentParser) -> None:
    add_model_args(parser)
    parser.add_argument("--time", type=float, default=0.0, help="time in [0,1] to evaluate")


def add_command_args_render(parser: argparse.ArgumentParser) -> None:
    add_model_args(parser)
    parser.add_argument("--view", type=int, default=0, help="view index")
    parser.add_argument(
        "--test", action="store_const", const=True, default=False, help="use the held-out views"
    )
    parser.add_argument("--time", type=float, help="override the view timestamp")
    parser.add_argument(
        "--pfm", action="store_const", const=True, default=False, help="also write a float PFM"
    )


def add_command_args_eval(parser: argparse.ArgumentParser) -> None:
    add_model_args(parser)
    parser.add_argument("--runs", type=int, default=1, help="independent evaluation runs")
    parser.add_argument(
        "--split", choices=["test", "train"], default="test", help="views to evaluate on"
    )


def add_command_args_bench(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("bundle", help="scene bundle directory (the baseline row)")
    parser.add_argument("models", nargs="*", help="model directories to compare")
    parser.add_argument("--warmup", type=int, help="unmeasured iterations")
    parser.add_argument("--iters", type=int, help="measured iterations")
    parser.add_argument(
        "--split", choices=["test", "train"], default="test", help="views to render"
    )


def add_command_args_sweep(parser: argparse.ArgumentParser) -> None:
    add_model_args(parser)
    parser.add_argument("--groups", type=int_list, help="group counts, e.g. 5,10,20,50")
    parser.add_argument("--densify-fractions", type=float_list, help="first event fractions")
    parser.add_argument("--post-fractions", type=float_list, help="second event fractions")
    parser.add_argument("--warmup", type=int, help="unmeasured bench iterations")
    parser.add_argument("--iters", type=int, help="measured bench iterations")


COMMANDS = {
    "synth": (add_command_args_synth, "generate a synthetic scene bundle"),
    "prune": (add_command_args_prune, "prune Gaussians by temporal sensitivity"),
    "group": (add_command_args_group, "fit group flows to the Gaussian trajectories"),
    "deform": (add_command_args_deform, "write the deformed cloud at a time"),
    "render": (add_command_args_render, "render one view to PNG"),
    "eval": (add_command_args_eval, "PSNR/SSIM of a model against ground truth views"),
    "bench": (add_command_args_bench, "rendering throughput and size of models"),
    "sweep": (add_command_args_sweep, "group count and prune fraction sweeps"),
}


def get_parser() -> argparse.ArgumentParser:
    parser = get_description_parser()
    common = get_config_parser()
    sub = parser.add_subparsers(title="subcommands", dest="command")
    for name, (add_args, help_text) in COMMANDS.items():
        add_args(sub.add_parser(name, parents=[common], help=help_text))
    return parser
