"""General types, constants, functions"""
from __future__ import annotations

import asyncio
import json
import logging
import os
from typing import Any

import aiofiles
import numpy as np
import slugify

LOGGER: logging.Logger = logging.getLogger(__package__)
LOGGER.setLevel(level=logging.INFO)
formatter: logging.Formatter = logging.Formatter(
    "%(asctime)s %(levelname)-8s - %(message)s"
)

logging_hdl = logging.StreamHandler()
logging_hdl.setLevel(level=logging.INFO)
logging_hdl.setFormatter(formatter)

LOGGER.addHandler(logging_hdl)

TypeJSON = dict[str, Any]

SPEEDE_CTL_VERSION = "0.3.0"

THREADS_ENV = "SPEEDE_THREADS"
DEFAULT_THREADS = 1

# Exit codes of the command line client.
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEVIATIONS: list[str] = [
    "no densification (clone/split) is performed",
    "group flows are refined on trajectory L2 loss instead of image loss",
    "LPIPS is not computed",
    "fine-tuning after pruning only updates DC color and opacity",
    "rendering uses the CPU reference rasterizer at DC spherical harmonics",
    "FPS excludes image I/O and includes deformation evaluation",
    "bench speedup is model_fps / baseline_fps, values above 1 mean faster than baseline",
]


class SpeedeError(Exception):
    """Base error of the speede_ctl package."""


class ConfigurationError(SpeedeError):
    """Invalid schedules, scene specs or deformation specs."""


class PlyFormatError(SpeedeError):
    """Malformed or incomplete PLY file."""


class CloudValidationError(SpeedeError):
    """Gaussian cloud arrays violate their invariants."""

    def __init__(self, message: str, indices: list[int] | None = None) -> None:
        super().__init__(message)
        self.indices: list[int] = indices or []


class DimensionMismatchError(SpeedeError):
    """Arrays or images that must agree in shape do not."""


class FormatError(SpeedeError):
    """Binary artifact (TRAJ1, GFLW1, SCOR1) is malformed."""


def set_debug(debug: bool) -> None:
    """Switch package logging between INFO and DEBUG."""
    level = logging.DEBUG if debug else logging.INFO
    LOGGER.setLevel(level=level)
    logging_hdl.setLevel(level=level)


def format_label(text: str) -> str:
    """Normalise a free-form name into a file and column safe label."""
    return slugify.slugify(text)


def resolve_threads(threads: int | None) -> int:
    """Thread count from the flag, the environment, or the default."""
    if threads is not None and threads > 0:
        return threads
    env = os.environ.get(THREADS_ENV, "")
    try:
        value = int(env)
    except ValueError:
        if env:
            LOGGER.warning(f'Ignoring invalid {THREADS_ENV}="{env}".')
        return DEFAULT_THREADS
    return value if value > 0 else DEFAULT_THREADS


def float32_grid(values: Any) -> np.ndarray:
    """float64 array holding the float32 nearest values, as binary artifacts store them."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def dump_json(data: Any) -> str:
    """Stable JSON text for reports (sorted keys, fixed indent)."""
    return json.dumps(data, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(obj: Any) -> Any:
    if hasattr(obj, "to_json"):
        return obj.to_json()
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


async def async_write_file(path: str, payload: str | bytes) -> None:
    """Write text or bytes to path, creating parent directories."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    mode = "wb" if isinstance(payload, bytes) else "w"
    try:
        async with aiofiles.open(path, mode=mode) as f:
            await f.write(payload)
    except OSError as e:
        raise SpeedeError(f'Could not write "{path}": {e}') from e


async def async_write_files(files: dict[str, str | bytes]) -> None:
    """Write several files concurrently."""
    await asyncio.gather(
        *(async_write_file(path, payload) for path, payload in files.items())
    )


def write_json(path: str, data: Any) -> None:
    """Write a JSON report synchronously (wraps the async writer)."""
    asyncio.run(async_write_file(path, dump_json(data)))


def read_json(path: str) -> Any:
    """Read a JSON file with path context on failure."""
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise SpeedeError(f'Could not read "{path}": {e}') from e
    except json.JSONDecodeError as e:
        raise SpeedeError(f'Invalid JSON in "{path}": {e}') from e
