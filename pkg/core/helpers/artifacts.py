import csv
import json
import logging
import os
from importlib.metadata import PackageNotFoundError, version
from typing import Any, Iterable

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
ESTIMATES = "estimates.csv"
METRICS_COLUMNS = ["step", "rmse", "ensemble_spread", "is_measurement_step"]

_io_retry = retry(
    retry=retry_if_exception_type(OSError),
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=2, min=2, max=10),
    reraise=True,
)


def code_version() -> str:
    try:
        return version("masf")
    except PackageNotFoundError:
        return "0.1.0"


def _fmt(value: float) -> str:
    # repr round-trips exactly, so reruns give identical bytes
    return repr(float(value))


@_io_retry
def write_json(path: str, payload: dict[str, Any]) -> str:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


def read_manifest(run_dir: str) -> dict[str, Any] | None:
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.exists(path):
        return None
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning("ignoring unreadable manifest %s: %s", path, e)
        return None


@_io_retry
def write_rows(path: str, header: list[str], rows: Iterable[list[Any]]) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_metrics(
    path: str,
    steps: list[int],
    rmse: np.ndarray,
    spread: np.ndarray,
    is_measurement: list[bool],
) -> str:
    rows = [
        [r, _fmt(e), _fmt(s), int(m)]
        for r, e, s, m in zip(steps, rmse, spread, is_measurement)
    ]
    return write_rows(path, METRICS_COLUMNS, rows)


def read_metrics(path: str) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [
            {
                "step": int(row["step"]),
                "rmse": float(row["rmse"]),
                "ensemble_spread": float(row["ensemble_spread"]),
                "is_measurement_step": bool(int(row["is_measurement_step"])),
            }
            for row in csv.DictReader(fh)
        ]


def write_states(path: str, steps: list[int], states: np.ndarray, prefix: str = "x") -> str:
    d = states.shape[1] if states.ndim == 2 else 0
    header = ["step"] + [f"{prefix}_{i + 1}" for i in range(d)]
    rows = [[r] + [_fmt(v) for v in row] for r, row in zip(steps, states)]
    return write_rows(path, header, rows)


def read_states(path: str) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    steps = [int(row[0]) for row in rows[1:]]
    return steps, np.array([[float(v) for v in row[1:]] for row in rows[1:]])
