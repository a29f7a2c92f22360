import logging
import os
import sys
from typing import NoReturn

import click
import numpy as np
import pyfiglet

from core.helpers import artifacts
from core.helpers.config import METHODS, ConfigError, ExperimentSpec, load_config
from core.helpers.dynamics import write_trajectory_csv
from core.services.experiment import (
    REPORT_FORMATS,
    completed_manifest,
    execute_run,
    load_summary,
    report,
    run_directory,
    run_experiment,
)
from core.services.filter_runner import generate_measurements, generate_truth, run_hash
from core.services.verification import run_verification

__version__ = artifacts.code_version()

EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _banner() -> None:
    art = pyfiglet.figlet_format("MASF", font="slant")
    click.echo(click.style(art, fg="cyan", bold=True))
    click.echo(
        click.style(
            "  Measurement-aware score-based filtering · EnKF baseline · Lorenz-63/96\n",
            fg="bright_white",
        )
    )


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _fail(message: str, code: int) -> NoReturn:
    click.echo(click.style(f"  ✗ {message}", fg="red", bold=True))
    sys.exit(code)


def _load(config: str) -> ExperimentSpec:
    try:
        return load_config(config)
    except ConfigError as exc:
        _fail(f"config error: {exc}", EXIT_CONFIG_ERROR)


config_option = click.option(
    "--config", "-c", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="YAML experiment config.",
)
verbose_option = click.option("--verbose", "-v", is_flag=True, help="Debug logging.")


@click.group(invoke_without_command=True, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, "-V", "--version", prog_name="masf")
@click.pass_context
def cli(ctx: click.Context) -> None:
    if ctx.invoked_subcommand is None:
        _banner()
        click.echo(ctx.get_help())


@cli.command()
@config_option
@click.option("--seed", "-s", default=0, show_default=True, type=click.IntRange(min=0), help="Master seed.")
@click.option(
    "--out", "-o", required=True,
    type=click.Path(file_okay=False, writable=True),
    help="Directory for truth.csv and measurements.csv.",
)
@verbose_option
def simulate(config: str, seed: int, out: str, verbose: bool) -> None:
    """Write the truth trajectory and its measurements to disk."""
    _configure_logging(verbose)
    _banner()
    spec = _load(config)
    cfg = spec.base
    try:
        os.makedirs(out, exist_ok=True)
        truth = generate_truth(cfg, seed)
        measurements = generate_measurements(cfg, truth, seed)
        write_trajectory_csv(os.path.join(out, "truth.csv"), truth, cfg.dynamics.dt)
        steps = sorted(measurements)
        z = np.array([measurements[r] for r in steps]).reshape(len(steps), cfg.dynamics.dim)
        artifacts.write_states(os.path.join(out, "measurements.csv"), steps, z, prefix="z")
    except Exception as exc:
        _fail(str(exc), EXIT_RUN_FAILURE)
    click.echo(click.style("  ✓ Simulation complete!", fg="green", bold=True))
    click.echo(click.style(f"  → {out} ({cfg.n_steps} steps, {len(steps)} measurements)", fg="bright_white"))


@cli.command()
@config_option
@click.option("--seed", "-s", default=None, type=click.IntRange(min=0), help="Master seed (defaults to the first configured seed).")
@click.option("--method", "-m", default=None, type=click.Choice(METHODS), help="Override filter.method.")
@click.option("--out", "-o", default=None, type=click.Path(file_okay=False, writable=True), help="Run directory.")
@click.option("--force", "-f", is_flag=True, help="Re-run even if a completed run with the same config exists.")
@click.option("--trace", "-t", is_flag=True, help="Dump per-step sampler traces.")
@verbose_option
def assimilate(
    config: str, seed: int | None, method: str | None, out: str | None, force: bool, trace: bool, verbose: bool
) -> None:
    """Run one filter and write manifest.json, metrics.csv and estimates.csv."""
    _configure_logging(verbose)
    _banner()
    spec = _load(config)
    seed = spec.seeds[0] if seed is None else seed
    try:
        cfg = spec.build({}, method or spec.base.method)
    except ConfigError as exc:
        _fail(f"config error: {exc}", EXIT_CONFIG_ERROR)
    out = out or run_directory(spec.output_dir, cfg.method, {}, seed)

    if not force and completed_manifest(out, run_hash(cfg, seed)):
        click.echo(click.style(f"  ↷ Completed run found at {out}; use --force to re-run.", fg="yellow"))
        return

    click.echo(
        click.style(f"  [{cfg.method.upper()}] ", fg="cyan", bold=True)
        + click.style(f"seed {seed}, {cfg.n_steps} steps, {len(cfg.measurement_set)} updates …", fg="bright_white")
    )
    try:
        manifest = execute_run(cfg, seed, out, trace=trace)
    except Exception as exc:
        _fail(str(exc), EXIT_RUN_FAILURE)
    click.echo(click.style("  ✓ Run complete!", fg="green", bold=True))
    click.echo(click.style(f"  RMSE over steps {cfg.eval_window[0]}-{cfg.eval_window[1]}: {manifest['rmse']:.4g}", fg="bright_white"))
    click.echo(click.style(f"  → {out}", fg="bright_white"))


@cli.command()
@config_option
@click.option("--out", "-o", default=None, type=click.Path(file_okay=False, writable=True), help="Sweep output directory.")
@click.option("--force", "-f", is_flag=True, help="Re-run completed runs.")
@click.option("--jobs", "-j", default=None, type=click.IntRange(min=1), help="Concurrent runs (overrides experiment.jobs).")
@click.option("--trace", "-t", is_flag=True, help="Dump per-step sampler traces.")
@verbose_option
def sweep(config: str, out: str | None, force: bool, jobs: int | None, trace: bool, verbose: bool) -> None:
    """Run every sweep point × method × seed and write summary.csv."""
    _configure_logging(verbose)
    _banner()
    spec = _load(config)
    out = out or spec.output_dir
    n_runs = len(spec.sweep_points()) * len(spec.methods) * len(spec.seeds)
    click.echo(click.style(f"  Sweeping {n_runs} runs → {out}", fg="bright_white"))
    try:
        summary, records = run_experiment(spec, out_dir=out, force=force, jobs=jobs, trace=trace)
    except Exception as exc:
        _fail(str(exc), EXIT_RUN_FAILURE)

    click.echo(report(summary, "markdown"))
    skipped = sum(r.status == "skipped" for r in records)
    if skipped:
        click.echo(click.style(f"  ↷ {skipped} completed run(s) skipped", fg="yellow"))
    if summary.failures:
        for failure in summary.failures:
            click.echo(click.style(f"  ✗ {failure['run_dir']}: {failure['error']}", fg="red"))
        _fail(f"{len(summary.failures)} run(s) failed", EXIT_RUN_FAILURE)
    click.echo(click.style("  ✓ Sweep complete!", fg="green", bold=True))
    click.echo(click.style(f"  → {os.path.join(out, 'summary.csv')}", fg="bright_white"))


@cli.command(name="report")
@click.option(
    "--summary", "-s", "summary_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="summary.csv or summary.json written by sweep.",
)
@click.option("--format", "-F", "fmt", default="markdown", show_default=True, type=click.Choice(REPORT_FORMATS))
@click.option("--output", "-o", default=None, type=click.Path(dir_okay=False, writable=True), help="Write to a file instead of stdout.")
def report_cmd(summary_path: str, fmt: str, output: str | None) -> None:
    """Render a sweep summary as csv, json or a markdown table."""
    try:
        rendered = report(load_summary(summary_path), fmt)
    except (OSError, KeyError, ValueError) as exc:
        _fail(f"could not read summary: {exc}", EXIT_CONFIG_ERROR)
    if output:
        with open(output, "w") as fh:
            fh.write(rendered)
        click.echo(click.style(f"  ✓ Report written → {output}", fg="green"))
    else:
        click.echo(rendered, nl=False)


@cli.command()
@click.option("--seed", "-s", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--samples", "-n", default=0, show_default=True, type=click.IntRange(min=0), help="Monte-Carlo samples for the sampler check (0 = exact moments only).")
@verbose_option
def verify(seed: int, samples: int, verbose: bool) -> None:
    """Run the analytic oracle checks and print pass/fail."""
    _configure_logging(verbose)
    _banner()
    results = run_verification(seed=seed, n_samples=samples)
    for result in results:
        mark = click.style("  ✓ ", fg="green") if result.passed else click.style("  ✗ ", fg="red", bold=True)
        click.echo(mark + f"{result.name}: {result.error:.2e} (tol {result.tolerance:.0e}) {result.detail}".rstrip())
    failed = [r for r in results if not r.passed]
    if failed:
        _fail(f"{len(failed)} of {len(results)} checks failed", EXIT_RUN_FAILURE)
    click.echo(click.style(f"  ✓ All {len(results)} checks passed", fg="green", bold=True))


def main() -> None:
    cli()
