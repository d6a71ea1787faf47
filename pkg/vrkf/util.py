import json
import logging
import os
from argparse import ArgumentParser
from typing import Any, List

import numpy as np

# Below this every covariance entry on the diagonal is treated as zero.
COVARIANCE_FLOOR = 1e-30
# Degrees of freedom at or above this are the Gaussian limit.
GAUSSIAN_NU = 1e8
# Substream indices. New channels must take new indices so existing draws never shift.
STREAM_PROCESS = 0
STREAM_MEASUREMENT = 1
STREAM_DISTURBANCE = 2


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def floor_covariance(cov: np.ndarray) -> np.ndarray:
    """
    :param cov: A covariance matrix.

    :return: A copy of `cov` with diagonal entries raised to at least COVARIANCE_FLOOR.
    """

    cov = np.array(cov, dtype=float, copy=True)
    idx = np.diag_indices_from(cov)
    cov[idx] = np.maximum(cov[idx], COVARIANCE_FLOOR)
    return cov


def make_rng(seed: int, stream: int) -> np.random.Generator:
    """
    :param seed: The trajectory seed.
    :param stream: The channel index (see the STREAM_* constants).

    :return: An independent counter-based generator for this (seed, channel) pair.
    """

    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


def default_seed() -> int:
    """
    :return: The base seed: $VRKF_SEED if set, else 0.
    """

    value = os.environ.get("VRKF_SEED", "0")
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"VRKF_SEED must be an integer, got {value!r}")


def seed_list(count: int, base: int = None) -> List[int]:
    if count < 1:
        raise ValueError(f"At least one seed is required, got {count}")
    if base is None:
        base = default_seed()
    return list(range(base, base + count))


def to_jsonable(obj: Any) -> Any:
    """
    Convert numpy containers and scalars into plain JSON types.
    """

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def get_parser(experiment_id: str, get_help: bool = False) -> ArgumentParser:
    """
    :param experiment_id: The default experiment name; used for the default output path.

    :return: Command-line arguments common to all experiment controllers.
    """

    parser = ArgumentParser(add_help=get_help)
    parser.add_argument("--case", type=int, default=1, help="Noise case of the experiment.")
    parser.add_argument("--seeds", type=int, default=50, help="Number of Monte Carlo seeds.")
    parser.add_argument("--seed", type=int, default=None, help="Base seed. Defaults to $VRKF_SEED or 0.")
    parser.add_argument("--steps", type=int, default=None, help="Steps per run. Defaults to the experiment's N.")
    parser.add_argument("--panel", type=str, default=None,
                        help="Comma-separated estimator names to keep from the panel.")
    parser.add_argument("--out", type=str, default=f"results/{experiment_id}.csv", help="Output file.")
    parser.add_argument("--format", type=str, choices=["csv", "json", "hdf5"], default="csv",
                        help="Output format.")
    parser.add_argument("--workers", type=int, default=1, help="Worker processes for the seeds.")
    parser.add_argument("--lambda-trace", action="store_true",
                        help="Also export per-step lambda traces of the first seed.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging; repeatable.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log errors.")
    return parser


def get_args(experiment_id: str):
    parser = get_parser(experiment_id, get_help=True)
    return parser.parse_args()


def configure_logging(verbose: int = 0, quiet: bool = False) -> None:
    """
    Configure the root logger: WARNING by default, INFO with -v, DEBUG with -vv, ERROR with --quiet.
    """

    if quiet:
        level = logging.ERROR
    else:
        level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)
