import asyncio
import csv
import io
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from core.helpers import artifacts
from core.helpers.config import ExperimentSpec, FilterConfig
from core.services.filter_runner import (
    FilterRunner,
    generate_measurements,
    generate_truth,
    run_hash,
    write_run,
)

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("csv", "json", "markdown", "markdown-table")
STAT_COLUMNS = ["rmse_mean", "rmse_std", "n_seeds"]


@dataclass
class RunRecord:
    method: str
    point: dict[str, Any]
    seed: int
    run_dir: str
    status: str
    rmse: float | None = None
    error: str | None = None


@dataclass
class Summary:
    sweep_paths: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["method", *self.sweep_paths, *STAT_COLUMNS, "winner"]


def _slug(point: dict[str, Any]) -> str:
    if not point:
        return "base"
    parts = [f"{path}-{value}" for path, value in point.items()]
    return re.sub(r"[^A-Za-z0-9_.-]", "_", "_".join(parts))


def run_directory(out_dir: str, method: str, point: dict[str, Any], seed: int) -> str:
    return os.path.join(out_dir, method, _slug(point), f"seed_{seed}")


def execute_run(
    cfg: FilterConfig,
    seed: int,
    run_dir: str,
    cache_dir: str | None = None,
    trace: bool = False,
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """One complete FilterRun with its artifact set; returns the manifest."""
    truth = generate_truth(cfg, seed, cache_dir=cache_dir)
    measurements = generate_measurements(cfg, truth, seed)
    runner = FilterRunner(cfg, seed, out_dir=run_dir, trace=trace)
    run = runner.run(truth, measurements)
    manifest = write_run(run_dir, cfg, run, extra=extra)
    logger.info("%s seed %d: rmse %.4g", cfg.method, seed, manifest["rmse"])
    return manifest


def completed_manifest(run_dir: str, expected_hash: str) -> dict[str, Any] | None:
    manifest = artifacts.read_manifest(run_dir)
    if manifest and manifest.get("status") == "completed" and manifest.get("config_hash") == expected_hash:
        return manifest
    return None


async def async_run_experiment(
    spec: ExperimentSpec,
    out_dir: str | None = None,
    force: bool = False,
    jobs: int | None = None,
    trace: bool = False,
) -> tuple[Summary, list[RunRecord]]:
    out_dir = out_dir or spec.output_dir
    cache_dir = os.path.join(out_dir, "cache")
    semaphore = asyncio.Semaphore(jobs or spec.jobs)

    async def one(point: dict[str, Any], method: str, seed: int) -> RunRecord:
        cfg = spec.build(point, method)
        run_dir = run_directory(out_dir, method, point, seed)
        done = None if force else completed_manifest(run_dir, run_hash(cfg, seed))
        if done is not None:
            logger.info("skipping completed run %s", run_dir)
            return RunRecord(method, point, seed, run_dir, "skipped", rmse=done["rmse"])
        async with semaphore:
            try:
                manifest = await asyncio.to_thread(
                    execute_run, cfg, seed, run_dir, cache_dir, trace, {"sweep_point": point}
                )
            except Exception as e:
                logger.error("run %s failed: %s", run_dir, e)
                return RunRecord(method, point, seed, run_dir, "failed", error=str(e))
        return RunRecord(method, point, seed, run_dir, "completed", rmse=manifest["rmse"])

    tasks = [
        one(point, method, seed)
        for point in spec.sweep_points()
        for method in spec.methods
        for seed in spec.seeds
    ]
    records = list(await asyncio.gather(*tasks))
    summary = summarise(spec, records)
    os.makedirs(out_dir, exist_ok=True)
    artifacts.write_rows(
        os.path.join(out_dir, "summary.csv"),
        summary.columns,
        [[row[c] for c in summary.columns] for row in _rendered_rows(summary)],
    )
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(report(summary, "json"))
    return summary, records


def run_experiment(
    spec: ExperimentSpec,
    out_dir: str | None = None,
    force: bool = False,
    jobs: int | None = None,
    trace: bool = False,
) -> tuple[Summary, list[RunRecord]]:
    return asyncio.run(async_run_experiment(spec, out_dir=out_dir, force=force, jobs=jobs, trace=trace))


def summarise(spec: ExperimentSpec, records: list[RunRecord]) -> Summary:
    paths = [p for p, _ in spec.sweep]
    summary = Summary(sweep_paths=paths)
    for point in spec.sweep_points():
        for method in spec.methods:
            group = [r for r in records if r.method == method and r.point == point]
            values = [r.rmse for r in group if r.rmse is not None and r.status != "failed"]
            row: dict[str, Any] = {"method": method, **{p: point[p] for p in paths}}
            row["rmse_mean"] = float(np.mean(values)) if values else float("nan")
            row["rmse_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            row["n_seeds"] = len(values)
            summary.rows.append(row)
        summary.failures.extend(
            {"method": r.method, "seed": r.seed, "run_dir": r.run_dir, "error": r.error, **r.point}
            for r in records
            if r.point == point and r.status == "failed"
        )
    flag_winners(summary)
    return summary


def flag_winners(summary: Summary) -> None:
    """Mark the lowest rmse_mean per sweep point when more than one method competes."""
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for row in summary.rows:
        key = tuple(row[p] for p in summary.sweep_paths)
        groups.setdefault(key, []).append(row)
    for rows in groups.values():
        for row in rows:
            row["winner"] = False
        finite = [row for row in rows if not math.isnan(row["rmse_mean"])]
        if len({row["method"] for row in rows}) > 1 and finite:
            min(finite, key=lambda row: row["rmse_mean"])["winner"] = True


def _sig4(value: Any) -> Any:
    if isinstance(value, float):
        return float(f"{value:.4g}") if math.isfinite(value) else value
    return value


def _fmt4(value: Any) -> str:
    if isinstance(value, bool):
        return "yes" if value else ""
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _rendered_rows(summary: Summary) -> list[dict[str, str]]:
    return [{c: _fmt4(row.get(c, "")) for c in summary.columns} for row in summary.rows]


def report(summary: Summary, fmt: str = "csv") -> str:
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"Unsupported report format: '{fmt}'. Use one of {REPORT_FORMATS}.")
    if fmt == "json":
        payload = {
            "columns": summary.columns,
            "sweep_paths": summary.sweep_paths,
            "rows": [{c: _sig4(row.get(c)) for c in summary.columns} for row in summary.rows],
            "failures": summary.failures,
        }
        return json.dumps(payload, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(summary.columns)
        for row in _rendered_rows(summary):
            writer.writerow([row[c] for c in summary.columns])
        return buf.getvalue()
    return _markdown(summary)


def _markdown(summary: Summary) -> str:
    columns = ["method", *STAT_COLUMNS, "winner"]
    groups: dict[tuple, list[dict[str, str]]] = {}
    for row in _rendered_rows(summary):
        key = tuple((p, row[p]) for p in summary.sweep_paths)
        groups.setdefault(key, []).append(row)
    if not groups:
        groups[()] = []

    lines: list[str] = []
    for key, rows in groups.items():
        if key:
            lines.append("### " + ", ".join(f"{p} = {v}" for p, v in key))
            lines.append("")
        lines.append("| " + " | ".join(columns) + " |")
        lines.append("|" + "|".join(["---"] * len(columns)) + "|")
        for row in rows:
            cells = [row[c] if c != "winner" else ("**winner**" if row[c] else "") for c in columns]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def _parse_cell(value: str) -> Any:
    if value == "yes":
        return True
    if value == "":
        return False
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def load_summary(path: str) -> Summary:
    """Read a summary written as JSON or CSV by the sweep harness or `report`."""
    if path.endswith(".json"):
        with open(path) as fh:
            payload = json.load(fh)
        return Summary(
            sweep_paths=list(payload["sweep_paths"]),
            rows=[dict(row) for row in payload["rows"]],
            failures=list(payload.get("failures", [])),
        )
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        paths = [c for c in header if c not in ("method", *STAT_COLUMNS, "winner")]
        rows = []
        for raw in reader:
            row: dict[str, Any] = {"method": raw["method"]}
            for c in header:
                if c != "method":
                    row[c] = _parse_cell(raw[c])
            row["rmse_mean"] = float(raw["rmse_mean"])
            row["rmse_std"] = float(raw["rmse_std"])
            rows.append(row)
    return Summary(sweep_paths=paths, rows=rows)
