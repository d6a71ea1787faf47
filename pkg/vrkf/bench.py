import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import h5py
import numpy as np
import pandas as pd
from tqdm import tqdm

from vrkf import __version__
from vrkf.convergence import time_constant
from vrkf.estimator import EstimatorRun
from vrkf.exceptions import ConfigError, CovarianceError, DivergenceError
from vrkf.experiment import Experiment
from vrkf.experiments import get_experiment
from vrkf.filters import FilterConfig, build_estimator
from vrkf.statespace import Trajectory
from vrkf.util import configure_logging, dumps, seed_list

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["experiment", "case", "estimator", "state_index", "rmse", "mean_iterations", "seeds",
                  "divergences"]
LAMBDA_COLUMNS = ["experiment", "case", "estimator", "seed", "k", "channel", "lambda_est", "lambda_true"]
FORMATS = ("csv", "json", "hdf5")
SWEEP_PARAMS = ("rho", "nu", "eta")
# Estimator kinds a sweep parameter applies to, in order of preference.
SWEEP_TARGETS = {"nu": ("stkf", "vbkf_fixed", "ar1", "ar2"),
                 "rho": ("ar1", "ar2", "vbkf"),
                 "eta": ("ar2",)}


@dataclass
class ExperimentConfig:
    """
    A fully resolved benchmark run.

    :param experiment_id: A registered experiment.
    :param case: Its noise case.
    :param panel: The estimators to compare.
    :param steps: N.
    :param seeds: The Monte Carlo seeds.
    :param dt: The sampling time.
    :param options: Extra experiment options.
    """

    experiment_id: str
    case: int
    panel: List[FilterConfig]
    steps: int
    seeds: List[int]
    dt: float = 1.0
    options: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("At least one seed is required")
        if not self.panel:
            raise ConfigError("The estimator panel is empty")
        names = [c.name for c in self.panel]
        if len(set(names)) != len(names):
            raise ConfigError(f"Estimator names must be unique, got {names}")

    @staticmethod
    def from_experiment(experiment: Experiment, seeds: Sequence[int], names: Sequence[str] = None,
                        **options) -> "ExperimentConfig":
        """
        :param experiment: The experiment.
        :param seeds: The seeds.
        :param names: Keep only these estimators of the panel.
        :param options: Extra experiment options, stored for the worker processes.
        """

        panel = experiment.get_panel()
        if names:
            known = [c.name for c in panel]
            unknown = [name for name in names if name not in known]
            if unknown:
                raise ConfigError(f"Not in the panel: {', '.join(unknown)}. Valid: {', '.join(known)}")
            panel = [c for c in panel if c.name in names]
        return ExperimentConfig(experiment_id=experiment.experiment_id, case=experiment.case, panel=panel,
                                steps=experiment.steps, seeds=list(seeds), dt=experiment.get_model().dt,
                                options={**experiment.options, **options})

    def get_experiment(self) -> Experiment:
        return get_experiment(self.experiment_id, case=self.case, steps=self.steps, **self.options)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment_id, "case": self.case, "steps": self.steps, "dt": self.dt,
                "seeds": list(self.seeds), "options": dict(self.options),
                "panel": [c.to_dict() for c in self.panel]}

    def header(self) -> List[str]:
        """
        :return: The comment lines written at the top of every output file.
        """

        return [f"vrkf {__version__}", f"config: {dumps(self.to_dict())}", f"seeds: {dumps(list(self.seeds))}"]


@dataclass
class RunResult:
    """
    The aggregate of one estimator over all seeds. Diverged runs are excluded from `rmse` and counted.
    """

    estimator: str
    rmse: np.ndarray
    per_seed_rmse: np.ndarray
    mean_iterations: float
    divergences: int
    seeds: List[int]
    wall_time: float = 0.0
    # (k, channel) traces of the first seed, when recorded.
    lambda_est: Optional[np.ndarray] = None
    lambda_true: Optional[np.ndarray] = None

    @property
    def armse(self) -> float:
        """
        :return: The RMSE averaged over the states.
        """

        return float(np.mean(self.rmse))


def rmse(truth: Union[Trajectory, np.ndarray], estimates: np.ndarray, burn_in: int = 0) -> np.ndarray:
    """
    :param truth: A trajectory, or the N×n true states x_1..x_N.
    :param estimates: N×n estimates.
    :param burn_in: Leading steps to ignore.

    :return: √(mean over k of (x̂ − x)²) per state.
    """

    states = truth.states[1:] if isinstance(truth, Trajectory) else np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if states.shape != estimates.shape:
        raise ValueError(f"Truth has shape {states.shape}, estimates {estimates.shape}")
    err = estimates[burn_in:] - states[burn_in:]
    return np.sqrt(np.mean(err ** 2, axis=0))


def lambda_traces(run: EstimatorRun, trajectory: Trajectory, n: int):
    """
    :return: Tuple: estimated and true per-channel variances, each N×(n+m). Process channels report the whitened
             inflation and have no true value.
    """

    n_steps = trajectory.n_steps
    m = trajectory.measurements.shape[1]
    est = np.column_stack([run.lam[:, :n], run.measurement_variance])
    true = np.full((n_steps, n + m), np.nan)
    true[:, n:] = np.diagonal(trajectory.true_v_cov, axis1=1, axis2=2)
    return est, true


def _run_seed(cfg: ExperimentConfig, seed: int, record_lambda: bool) -> List[dict]:
    experiment = cfg.get_experiment()
    model = experiment.get_model()
    x0, P0 = experiment.get_prior()
    trajectory = experiment.simulate(seed)
    out = []
    for config in cfg.panel:
        estimator = build_estimator(config, model, x0=x0, P0=P0)
        try:
            run = estimator.run(trajectory, record=record_lambda)
        except (DivergenceError, CovarianceError) as e:
            logger.warning("%s diverged on seed %d at step %s: %s", config.name, seed, getattr(e, "step", None), e)
            out.append({"name": config.name, "rmse": None, "iterations": None, "wall_time": 0.0})
            continue
        entry = {"name": config.name, "rmse": rmse(trajectory, run.estimates), "iterations": run.mean_iterations,
                 "wall_time": run.wall_time}
        if record_lambda:
            entry["lambda_est"], entry["lambda_true"] = lambda_traces(run, trajectory, model.n)
        out.append(entry)
    return out


def run_panel(cfg: ExperimentConfig, workers: int = 1, record_lambda: bool = False,
              progress: bool = True) -> List[RunResult]:
    """
    Simulate one trajectory per seed and run every estimator of the panel on it.

    :param cfg: The run.
    :param workers: Worker processes. Results do not depend on this.
    :param record_lambda: Keep the λ traces of the first seed.
    :param progress: Show a progress bar.

    :return: One result per estimator, in panel order.
    """

    seeds = list(cfg.seeds)
    first = seeds[0]
    logger.info("Running %s case %d: %d estimators, %d seeds, N=%d", cfg.experiment_id, cfg.case,
                len(cfg.panel), len(seeds), cfg.steps)
    pbar = tqdm(total=len(seeds), disable=not progress)
    per_seed = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_run_seed, cfg, s, record_lambda and s == first) for s in seeds]
            for future in futures:
                per_seed.append(future.result())
                pbar.update(1)
    else:
        for s in seeds:
            per_seed.append(_run_seed(cfg, s, record_lambda and s == first))
            pbar.update(1)
    pbar.close()

    results = []
    for i, config in enumerate(cfg.panel):
        entries = [seed_out[i] for seed_out in per_seed]
        ok = [e for e in entries if e["rmse"] is not None]
        n = len(ok[0]["rmse"]) if ok else cfg.get_experiment().get_model().n
        per_seed_rmse = np.array([e["rmse"] if e["rmse"] is not None else np.full(n, np.nan) for e in entries])
        divergences = len(entries) - len(ok)
        result = RunResult(estimator=config.name,
                           rmse=np.mean([e["rmse"] for e in ok], axis=0) if ok else np.full(n, np.nan),
                           per_seed_rmse=per_seed_rmse,
                           mean_iterations=float(np.mean([e["iterations"] for e in ok])) if ok else float("nan"),
                           divergences=divergences,
                           seeds=seeds,
                           wall_time=float(sum(e["wall_time"] for e in entries)),
                           lambda_est=entries[0].get("lambda_est"),
                           lambda_true=entries[0].get("lambda_true"))
        if divergences:
            logger.warning("%s diverged on %d of %d seeds", config.name, divergences, len(entries))
        results.append(result)
    return results


def results_frame(results: List[RunResult], cfg: ExperimentConfig) -> pd.DataFrame:
    """
    :return: The long-format results table, one row per estimator and state.
    """

    rows = []
    for r in results:
        for j, value in enumerate(r.rmse):
            rows.append({"experiment": cfg.experiment_id, "case": cfg.case, "estimator": r.estimator,
                         "state_index": j + 1, "rmse": float(value), "mean_iterations": r.mean_iterations,
                         "seeds": len(r.seeds), "divergences": r.divergences})
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def lambda_frame(results: List[RunResult], cfg: ExperimentConfig) -> pd.DataFrame:
    """
    :return: The long-format λ traces of the first seed.
    """

    frames = []
    for r in results:
        if r.lambda_est is None:
            continue
        n_steps, l = r.lambda_est.shape
        k, channel = np.meshgrid(np.arange(1, n_steps + 1), np.arange(1, l + 1), indexing="ij")
        frames.append(pd.DataFrame({"experiment": cfg.experiment_id, "case": cfg.case, "estimator": r.estimator,
                                    "seed": r.seeds[0], "k": k.ravel(), "channel": channel.ravel(),
                                    "lambda_est": r.lambda_est.ravel(), "lambda_true": r.lambda_true.ravel()}))
    if not frames:
        return pd.DataFrame(columns=LAMBDA_COLUMNS)
    return pd.concat(frames, ignore_index=True)[LAMBDA_COLUMNS]


def pivot(frame: pd.DataFrame) -> pd.DataFrame:
    """
    :return: RMSE with one row per estimator and one column per state, in panel order.
    """

    order = list(dict.fromkeys(frame["estimator"]))
    table = frame.pivot(index="estimator", columns="state_index", values="rmse")
    table.columns = [f"x{j}" for j in table.columns]
    return table.loc[order]


def write_csv(frame: pd.DataFrame, path: Path, header: List[str]) -> None:
    with path.open("w", newline="") as f:
        for line in header:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, lineterminator="\n")


def read_results(path: Union[str, Path]) -> pd.DataFrame:
    """
    :return: A results or λ CSV written by `export`, without its header lines.
    """

    return pd.read_csv(path, comment="#")


def export(results: List[RunResult], path: Union[str, Path], cfg: ExperimentConfig, fmt: str = "csv") -> List[Path]:
    """
    Write the results table and, if any estimator recorded them, the λ traces to `<stem>_lambda.csv`.

    :param results: From `run_panel`.
    :param path: The output file.
    :param cfg: The run, written into the header.
    :param fmt: csv, json or hdf5.

    :return: The files written.
    """

    if fmt not in FORMATS:
        raise ConfigError(f"Not defined: format {fmt!r}. Valid: {', '.join(FORMATS)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = cfg.header()
    frame = results_frame(results, cfg)
    written = [path]
    if fmt == "csv":
        write_csv(frame, path, header)
    elif fmt == "json":
        doc = {"version": __version__, "config": cfg.to_dict(),
               "results": json.loads(frame.to_json(orient="records")),
               "wall_time": {r.estimator: r.wall_time for r in results}}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    else:
        with h5py.File(str(path), "w") as f:
            static_group = f.create_group("static")
            static_group.attrs["experiment"] = cfg.experiment_id
            static_group.attrs["case"] = cfg.case
            static_group.attrs["config"] = dumps(cfg.to_dict())
            static_group.create_dataset("seeds", data=np.asarray(cfg.seeds))
            for r in results:
                group = f.create_group(r.estimator)
                group.create_dataset("rmse", data=r.rmse)
                group.create_dataset("per_seed_rmse", data=r.per_seed_rmse)
                group.create_dataset("iterations", data=r.mean_iterations)
                group.attrs["divergences"] = r.divergences
                if r.lambda_est is not None:
                    group.create_dataset("lambda", data=r.lambda_est)
    lam = lambda_frame(results, cfg)
    if len(lam):
        lam_path = path.with_name(f"{path.stem}_lambda.csv")
        write_csv(lam, lam_path, header)
        written.append(lam_path)
    logger.info("Wrote %s", ", ".join(str(p) for p in written))
    return written


def _sweep_target(panel: List[FilterConfig], param: str, estimator: str = None) -> FilterConfig:
    if estimator is not None:
        for config in panel:
            if config.name == estimator:
                if config.estimator not in SWEEP_TARGETS[param]:
                    raise ConfigError(f"{estimator} ({config.estimator}) has no {param} to sweep")
                return config
        raise ConfigError(f"Not in the panel: {estimator}")
    for kind in SWEEP_TARGETS[param]:
        for config in panel:
            if config.estimator == kind:
                return config
    raise ConfigError(f"No estimator in the panel takes a {param} sweep")


def _swept(config: FilterConfig, param: str, value: float, m: int) -> FilterConfig:
    if param == "nu":
        return config.with_measurement(m, nu=value)
    if param == "rho":
        if not 0 < value < 1:
            raise ConfigError(f"rho sweep values must be in (0, 1), got {value}")
        # Start the degrees of freedom at their steady value.
        return config.with_measurement(m, rho=value, nu=1.0 / (1.0 - value))
    return config.with_eta(value)


def sweep(experiment: Experiment, param: str, values: Sequence[float], seeds: Sequence[int],
          estimator: str = None, workers: int = 1) -> pd.DataFrame:
    """
    Rerun one estimator of the panel once per parameter value.

    :param experiment: The experiment.
    :param param: rho, nu (measurement channels) or eta.
    :param values: The values.
    :param seeds: The seeds.
    :param estimator: The panel entry to sweep; by default the first one the parameter applies to.

    :return: One row per value with the per-state RMSE, the ARMSE and the mean iteration count. Rho rows also
             carry the time constant (steps and seconds) and the steady λ variance ratio 2(1−ρ)/(1+ρ).
    """

    if param not in SWEEP_PARAMS:
        raise ConfigError(f"Not defined: sweep parameter {param!r}. Valid: {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("The sweep needs at least one value")
    base = _sweep_target(experiment.get_panel(), param, estimator)
    m = experiment.get_model().m
    dt = experiment.get_model().dt
    rows = []
    for value in tqdm(values, desc=f"{param} sweep"):
        config = _swept(base, param, float(value), m)
        cfg = ExperimentConfig.from_experiment(experiment, seeds)
        cfg.panel = [config]
        result = run_panel(cfg, workers=workers, progress=False)[0]
        row = {"param": param, "value": float(value), "estimator": base.name, "armse": result.armse,
               "mean_iterations": result.mean_iterations, "divergences": result.divergences}
        for j, v in enumerate(result.rmse):
            row[f"rmse_x{j + 1}"] = float(v)
        if param == "rho":
            steps = time_constant(float(value))
            row.update({"time_constant_steps": steps, "time_constant_seconds": steps * dt,
                        "steady_var_ratio": 2.0 * (1.0 - value) / (1.0 + value)})
        rows.append(row)
    return pd.DataFrame(rows)


def export_sweep(frame: pd.DataFrame, path: Union[str, Path], cfg: ExperimentConfig, param: str,
                 values: Sequence[float], fmt: str = "csv") -> Path:
    """
    Write a sweep table. Every format carries the resolved config and the swept values.

    :param frame: From `sweep`.
    :param path: The output file.
    :param cfg: The base run.
    :param param: The swept parameter.
    :param values: The swept values.
    :param fmt: csv, json or hdf5.

    :return: The file written.
    """

    if fmt not in FORMATS:
        raise ConfigError(f"Not defined: format {fmt!r}. Valid: {', '.join(FORMATS)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    swept = {"param": param, "values": [float(v) for v in values]}
    if fmt == "csv":
        write_csv(frame, path, cfg.header() + [f"sweep: {dumps(swept)}"])
    elif fmt == "json":
        doc = {"version": __version__, "config": cfg.to_dict(), "sweep": swept,
               "rows": json.loads(frame.to_json(orient="records"))}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    else:
        with h5py.File(str(path), "w") as f:
            static_group = f.create_group("static")
            static_group.attrs["experiment"] = cfg.experiment_id
            static_group.attrs["case"] = cfg.case
            static_group.attrs["config"] = dumps(cfg.to_dict())
            static_group.attrs["param"] = param
            static_group.create_dataset("seeds", data=np.asarray(cfg.seeds))
            rows = f.create_group("sweep")
            for column in frame.columns:
                data = frame[column].to_numpy()
                if data.dtype == object:
                    data = data.astype(str).astype("S")
                rows.create_dataset(column, data=data)
    logger.info("Wrote %s", path)
    return path


def run_from_args(experiment: Experiment, args) -> int:
    """
    Run an experiment from parsed command-line arguments (see `vrkf.util.get_parser`) and write its results.

    :return: 0 on success, 2 if any estimator diverged.
    """

    configure_logging(args.verbose, args.quiet)
    names = [s.strip() for s in args.panel.split(",")] if args.panel else None
    cfg = ExperimentConfig.from_experiment(experiment, seed_list(args.seeds, args.seed), names)
    results = run_panel(cfg, workers=args.workers, record_lambda=args.lambda_trace, progress=not args.quiet)
    export(results, args.out, cfg, fmt=args.format)
    table = pivot(results_frame(results, cfg))
    table["iterations"] = [r.mean_iterations for r in results]
    print(table.to_string(float_format=lambda v: f"{v:.4f}"))
    diverged = sum(r.divergences for r in results)
    if diverged:
        logger.error("%d runs diverged", diverged)
        return 2
    return 0
