import json
import logging
import sys
from argparse import ArgumentParser
from contextlib import ExitStack
from pathlib import Path
from typing import List, Optional

import numpy as np

from vrkf import __version__
from vrkf.bench import ExperimentConfig, export_sweep, run_from_args, sweep
from vrkf.convergence import scan_bounds
from vrkf.exceptions import ConfigError, DivergenceError, VrkfError
from vrkf.experiment import PANEL_DIR
from vrkf.experiments import EXPERIMENTS, get_experiment
from vrkf.experiments.example3 import DISTURBANCES
from vrkf.filters import build_estimator, load_filter_configs, load_model_config, read_rows, stream_filter
from vrkf.losses import ChannelLosses, RobustLoss
from vrkf.util import configure_logging, dumps, get_parser, seed_list

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2


def _logging_parser() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging; repeatable.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log errors.")
    return parser


def _experiment_parser() -> ArgumentParser:
    parser = ArgumentParser(add_help=False)
    parser.add_argument("--experiment", type=str, required=True, choices=sorted(EXPERIMENTS),
                        help="The experiment.")
    parser.add_argument("--disturbance", type=str, default="random_walk", choices=DISTURBANCES,
                        help="True disturbance shape (example3 only).")
    return parser


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="vrkf", description="Robust and adaptive Kalman filter benchmarks.")
    parser.add_argument("--version", action="version", version=f"vrkf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[_experiment_parser(), get_parser("vrkf")],
                   help="Run an experiment panel over Monte Carlo seeds.")

    sweep_parser = sub.add_parser("sweep", parents=[_experiment_parser(), get_parser("sweep")],
                                  help="Rerun one estimator for a list of parameter values.")
    sweep_parser.add_argument("--param", type=str, required=True, choices=["rho", "nu", "eta"],
                              help="The swept parameter.")
    sweep_parser.add_argument("--values", type=str, required=True, help="Comma-separated values.")
    sweep_parser.add_argument("--estimator", type=str, default=None,
                              help="The panel entry to sweep. Defaults to the first that takes the parameter.")

    filter_parser = sub.add_parser("filter", parents=[_logging_parser()],
                                   help="Filter a measurement CSV row by row.")
    filter_parser.add_argument("--config", type=str, required=True, help="Filter config JSON.")
    filter_parser.add_argument("--name", type=str, default=None,
                               help="Estimator name if the config holds several. Defaults to the first.")
    filter_parser.add_argument("--model", type=str, required=True, help="Model config JSON.")
    filter_parser.add_argument("--input", type=str, required=True, help="Measurement CSV: k, y_1..y_m[, u].")
    filter_parser.add_argument("--output", type=str, default="-", help="Output CSV; '-' for stdout.")

    bounds_parser = sub.add_parser("bounds", parents=[_logging_parser()],
                                   help="Convergence bounds of the fixed-point iteration along measurements.")
    bounds_parser.add_argument("--model", type=str, required=True, help="Model config JSON.")
    bounds_parser.add_argument("--input", type=str, required=True, help="Measurement CSV: k, y_1..y_m[, u].")
    bounds_parser.add_argument("--start", type=int, default=0, help="First row of the slice (0-based).")
    bounds_parser.add_argument("--stop", type=int, default=None, help="End of the slice (exclusive).")
    bounds_parser.add_argument("--gamma-scale", type=float, default=2.0, help="gamma = scale * xi per step.")
    bounds_parser.add_argument("--eta", type=float, default=0.9, help="Contraction target in (0, 1).")
    bounds_parser.add_argument("--config", type=str, default=None,
                               help="Filter config JSON whose channel nu values are checked.")

    validate_parser = sub.add_parser("validate", parents=[_logging_parser()],
                                     help="Validate config files. Defaults to every shipped panel.")
    validate_parser.add_argument("files", nargs="*", help="Panel, filter or model config JSON files.")

    sub.add_parser("list", parents=[_logging_parser()], help="List experiments, cases and panels.")
    return parser


def _experiment_options(args) -> dict:
    if args.disturbance != "random_walk":
        if args.experiment != "example3":
            raise ConfigError("--disturbance applies to example3 only")
        return {"disturbance": args.disturbance}
    return {}


def cmd_run(args) -> int:
    experiment = get_experiment(args.experiment, case=args.case, steps=args.steps, **_experiment_options(args))
    return run_from_args(experiment, args)


def _parse_values(text: str) -> List[float]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError("--values is empty")
    try:
        return [float(s) for s in items]
    except ValueError as e:
        raise ConfigError(f"--values: {e}")


def cmd_sweep(args) -> int:
    values = _parse_values(args.values)
    experiment = get_experiment(args.experiment, case=args.case, steps=args.steps, **_experiment_options(args))
    seeds = seed_list(args.seeds, args.seed)
    frame = sweep(experiment, args.param, values, seeds, estimator=args.estimator, workers=args.workers)
    export_sweep(frame, args.out, ExperimentConfig.from_experiment(experiment, seeds), args.param, values,
                 fmt=args.format)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_DIVERGED if frame["divergences"].sum() else EXIT_OK


def cmd_filter(args) -> int:
    configs = load_filter_configs(args.config)
    if args.name is not None:
        configs = [c for c in configs if c.name == args.name]
        if not configs:
            raise ConfigError(f"No estimator named {args.name!r} in {args.config}")
    config = configs[0]
    model, x0, P0 = load_model_config(args.model)
    estimator = build_estimator(config, model, x0=x0, P0=P0)
    header = [f"vrkf {__version__}", f"config: {dumps(config.to_dict())}", f"model: {dumps(model.to_dict())}"]
    with ExitStack() as stack:
        source = stack.enter_context(open(args.input, newline=""))
        sink = sys.stdout if args.output == "-" else stack.enter_context(open(args.output, "w", newline=""))
        count = stream_filter(estimator, source, sink, header=header)
    logger.info("Filtered %d rows with %s", count, config.name)
    return EXIT_OK


def _channel_losses(path: Optional[str], n: int, m: int) -> Optional[ChannelLosses]:
    if path is None:
        return None
    config = load_filter_configs(path)[0]
    return ChannelLosses([RobustLoss(c.kind, c.nu, c.tau2) for c in config.resolve_channels(n, m)], n_process=n)


def cmd_bounds(args) -> int:
    model, x0, P0 = load_model_config(args.model)
    with open(args.input, newline="") as f:
        rows = list(read_rows(f, model.m, model.p))
    rows = rows[args.start:args.stop]
    if not rows:
        raise ConfigError(f"The slice [{args.start}:{args.stop}] of {args.input} is empty")
    measurements = np.array([y for _, _, y, _ in rows])
    inputs = None
    if all(u is not None for _, _, _, u in rows):
        inputs = np.array([u for _, _, _, u in rows])
    channels = _channel_losses(args.config, model.n, model.m)
    scan = scan_bounds(model, measurements, channels, gamma_scale=args.gamma_scale, eta=args.eta, x0=x0, P0=P0,
                       inputs=inputs)
    w = scan.worst_step
    print(f"steps: {len(rows)} (k = {rows[0][1]}..{rows[-1][1]})")
    print(f"gamma = {args.gamma_scale:g} * xi, eta = {args.eta:g}")
    print(f"worst step k = {rows[w][1]}: xi = {scan.xi[w]:.6g}, nu* = {scan.nu_star[w]:.6g}, "
          f"nu+ = {scan.nu_plus[w]:.6g}, max(nu*, nu+) = {scan.worst_required:.6g}")
    print(f"max over steps: xi = {scan.xi.max():.6g}, nu* = {scan.nu_star.max():.6g}, nu+ = {scan.nu_plus.max():.6g}")
    for i, nu in enumerate(scan.nu_configured):
        fraction = scan.satisfied[:, i].mean()
        status = "PASS" if fraction == 1.0 else "FAIL"
        print(f"channel {i + 1}: nu = {nu:.6g} {status} ({fraction:.1%} of steps)")
    return EXIT_OK


def _validate_file(path: Path) -> None:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}")
    if isinstance(doc, dict) and "experiment" in doc and "panel" in doc:
        experiment = get_experiment(doc["experiment"], case=doc.get("case", 1))
        model = experiment.get_model()
        for config in load_filter_configs(doc):
            build_estimator(config, model)
    elif isinstance(doc, dict) and ("A" in doc or ("experiment" in doc and "panel" not in doc)):
        load_model_config(doc)
    else:
        load_filter_configs(doc)


def cmd_validate(args) -> int:
    files = [Path(f) for f in args.files] or sorted(PANEL_DIR.glob("*.json"))
    failed = 0
    for path in files:
        try:
            _validate_file(path)
            print(f"OK    {path}")
        except VrkfError as e:
            failed += 1
            print(f"FAIL  {path}: {e}")
    return EXIT_CONFIG if failed else EXIT_OK


def cmd_list(args) -> int:
    for experiment_id, cls in EXPERIMENTS.items():
        for case in cls.cases:
            experiment = cls(case=case)
            names = ", ".join(c.name for c in experiment.get_panel())
            print(f"{experiment_id} case {case}: N={experiment.steps}, seeds={experiment.default_seed_count}: {names}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "filter": cmd_filter, "bounds": cmd_bounds,
            "validate": cmd_validate, "list": cmd_list}


def main(argv: List[str] = None) -> int:
    """
    :return: 0 on success, 1 on a configuration or I/O error, 2 if an estimator diverged.
    """

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        logger.error("Diverged at step %s: %s", e.step, e)
        return EXIT_DIVERGED
    except (VrkfError, ValueError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
