"""
Command-line entry point for Viko Contact: `python -m src` or `viko` once installed.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional

# Ensure the package's parent directory is in the Python path
package_parent = Path(__file__).parent.parent
if str(package_parent) not in sys.path:
    sys.path.insert(0, str(package_parent))

from src.config import (
    APP_DESCRIPTION,
    APP_NAME,
    APP_VERSION,
    DEFAULT_FRAME_HEIGHT,
    DEFAULT_FRAME_WIDTH,
    DEFAULT_PX_PER_MM,
    TARGET_FPS,
    setup_logging,
)
from src.core.grasp_controller import DemoScenario, run_demo
from src.core.imaging import Frame
from src.core.pipeline import PipelineConfig, run_benchmark, run_sequence
from src.core.shear import fit_calibration, load_samples_csv
from src.simulation.dataset import DatasetProtocol, generate_dataset
from src.simulation.scenarios import benchmark_scenario, find_scenario_source, load_scenario, write_scenario
from src.utils.error_handling import cli_errors
from src.utils.export_utils import write_json
from src.utils.frame_io import iter_frame_dir, iter_raw_stream, load_frame

logger = logging.getLogger("src.cli")

EXIT_TARGET_MISSED = 3


def _load_config(path: Optional[str]) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def _frame_source(location: str, width: int, height: int) -> Iterable[Frame]:
    """Frames from a directory, a scenario JSON file or "-" (raw RGB24 on stdin)."""
    if location == "-":
        return iter_raw_stream(sys.stdin.buffer, width, height)
    scenario = find_scenario_source(location)
    if scenario is not None:
        return (frame for frame, _ in scenario.frames())
    return iter_frame_dir(location)


@cli_errors
def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.fps_report and cfg.output.include_timing:
        # Wall-clock timings in the stream; output is no longer byte-reproducible
        cfg = replace(cfg, output=replace(cfg.output, deterministic=False))
    reference = None
    if args.reference:
        reference = load_frame(args.reference)
    elif cfg.reference.source == "file":
        reference = load_frame(cfg.reference.path)
    source = _frame_source(args.input, args.width, args.height)
    return run_sequence(source, cfg, out=args.out, annotate_dir=args.annotate,
                        fps_report=args.fps_report, reference=reference)


@cli_errors
def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    write_scenario(scenario, args.out)
    return 0


@cli_errors
def cmd_dataset(args: argparse.Namespace) -> int:
    protocol, model = DatasetProtocol.load(args.protocol)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        protocol = DatasetProtocol.from_dict({**protocol.to_dict(), **overrides})
    generate_dataset(model, protocol, args.out)
    return 0


@cli_errors
def cmd_calibrate(args: argparse.Namespace) -> int:
    samples = load_samples_csv(args.samples)
    calibration = fit_calibration(samples, px_per_mm=args.px_per_mm, signed=not args.unsigned)
    calibration.save(args.out)
    print(json.dumps(calibration.to_dict(), sort_keys=True))
    return 0


@cli_errors
def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    scenario = load_scenario(args.scenario) if args.scenario else benchmark_scenario()
    rendered = [frame for frame, _ in scenario.frames()]
    reference = rendered[:cfg.reference.first_n]
    frames = rendered[:args.unique_frames] if args.unique_frames else rendered
    logger.info(f"Benchmarking {args.frames} frames cycled from {len(frames)} pre-rendered '{scenario.name}' frames")

    report = run_benchmark(frames, cfg, count=args.frames, reference_frames=reference)
    report["target_fps"] = args.target_fps
    report["passed"] = report["mean_fps"] >= args.target_fps
    print(json.dumps(report, sort_keys=True))
    if args.report:
        write_json(args.report, report)
    if not report["passed"]:
        logger.warning(f"Mean throughput {report['mean_fps']:.1f} FPS is below the {args.target_fps:g} FPS target")
        return EXIT_TARGET_MISSED
    return 0


@cli_errors
def cmd_demo(args: argparse.Namespace) -> int:
    scenario = DemoScenario.load(args.scenario)
    cfg = PipelineConfig.load(args.config) if args.config else None
    result = run_demo(scenario, cfg=cfg, out_dir=args.out)
    print(json.dumps(result.summary(), sort_keys=True))
    return 0 if result.passed else EXIT_TARGET_MISSED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viko", description=APP_DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--log-file", help="Also log to a rotating file")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Process a frame sequence into JSON lines")
    run.add_argument("--input", required=True,
                     help="Frame directory, scenario .json, or - for raw RGB24 on stdin ('--' is reserved by argparse)")
    run.add_argument("--config", help="TOML or JSON pipeline config")
    run.add_argument("--out", default="-", help="JSON-lines output path (default: stdout)")
    run.add_argument("--annotate", help="Directory for annotated PNG frames")
    run.add_argument("--fps-report", action="store_true",
                     help="Print a throughput summary at the end and write wall-clock timing_us")
    run.add_argument("--reference", help="Explicit no-contact reference image")
    run.add_argument("--width", type=int, default=DEFAULT_FRAME_WIDTH, help="Raw stream frame width")
    run.add_argument("--height", type=int, default=DEFAULT_FRAME_HEIGHT, help="Raw stream frame height")
    run.set_defaults(func=cmd_run)

    simulate = commands.add_parser("simulate", help="Render a scenario to frames and labels")
    simulate.add_argument("--scenario", required=True)
    simulate.add_argument("--out", required=True)
    simulate.set_defaults(func=cmd_simulate)

    dataset = commands.add_parser("dataset", help="Generate a labelled segmentation dataset")
    dataset.add_argument("--protocol", required=True)
    dataset.add_argument("--out", required=True)
    dataset.add_argument("--seed", type=int, help="Override the protocol seed")
    dataset.add_argument("--workers", type=int, help="Rendering threads")
    dataset.set_defaults(func=cmd_dataset)

    calibrate = commands.add_parser("calibrate", help="Fit a shear calibration from (x, force) samples")
    calibrate.add_argument("--samples", required=True, help="CSV of x,force pairs")
    calibrate.add_argument("--out", required=True, help="Calibration JSON to write")
    calibrate.add_argument("--px-per-mm", type=float, default=DEFAULT_PX_PER_MM)
    calibrate.add_argument("--unsigned", action="store_true", help="Fit x as given instead of |x|")
    calibrate.set_defaults(func=cmd_calibrate)

    bench = commands.add_parser("bench", help="Measure pipeline throughput")
    bench.add_argument("--frames", type=int, default=500)
    bench.add_argument("--config")
    bench.add_argument("--scenario", help="Scenario to render (default: built-in benchmark)")
    bench.add_argument("--unique-frames", type=int, default=24, help="Distinct frames to cycle (0: all)")
    bench.add_argument("--target-fps", type=float, default=TARGET_FPS)
    bench.add_argument("--report", help="Also write the report as JSON")
    bench.set_defaults(func=cmd_bench)

    demo = commands.add_parser("demo", help="Run the closed-loop grasp demo")
    demo.add_argument("--scenario", required=True)
    demo.add_argument("--out", required=True, help="Directory for trace.csv and trace.json")
    demo.add_argument("--config")
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(logging.DEBUG if args.verbose else logging.INFO, args.log_file)
    except OSError as e:
        parser.error(f"cannot open log file: {e}")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
