"""
xreg - Cross-Regularization Experiments
Command line for the cross-regularization experiments: train with the
regularization parameters fitted on a held-out set, compare with oracles and
baselines, and write plot-ready CSV / JSON artifacts.

    xreg run l2 --seed 1
    xreg run sweep --seed 1 --param mc_samples --values 1,3,5,10
    xreg summarize results/noise-mlp
"""

from pathlib import Path
from typing import List, Optional

import typer
from tqdm import tqdm

from src.experiments import (
    EXPERIMENTS,
    PASS_SHARE,
    WORKERS_ENV,
    ConfigError,
    SummaryError,
    load_config,
    max_workers,
    run_experiment,
    run_sweep,
    summarize,
)

APP_NAME = "xreg"
APP_VERSION = "0.1.0"

EXIT_FAILED = 1
EXIT_CONFIG = 2

app = typer.Typer(
    add_completion=False,
    no_args_is_help=True,
    help=f"{APP_NAME} {APP_VERSION}: cross-regularization experiments. "
         f"{WORKERS_ENV} bounds the number of worker processes.",
)


def parse_values(text: str) -> List[float]:
    """'1,3,5,10' -> [1.0, 3.0, 5.0, 10.0]."""
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected comma-separated numbers, got '{text}'") from None


def cli_overrides(seed, out, fmt, seeds, oracle, checks, param, values) -> dict:
    """Flags that were given, as a nested config mapping (flags win over the file)."""
    overrides = {}
    for key, value in (("seed", seed), ("out_dir", out), ("format", fmt), ("n_seeds", seeds),
                       ("oracle", oracle), ("checks", checks)):
        if value is not None:
            overrides[key] = str(value) if isinstance(value, Path) else value
    sweep = {}
    if param is not None:
        sweep["param"] = param
    if values is not None:
        sweep["values"] = parse_values(values)
    if sweep:
        overrides["sweep"] = sweep
    return overrides


class ProgressBar:
    """tqdm bar driven by (fraction, description) progress callbacks."""

    def __init__(self, total: int, description: str):
        self.total = total
        self.bar = tqdm(total=total, desc=description, unit="run", disable=total <= 1)

    def __call__(self, fraction: float, description: str):
        self.bar.n = min(self.total, round(fraction * self.total))
        self.bar.set_postfix_str(description, refresh=True)

    def close(self):
        self.bar.close()


def report_checks(checks: dict, shares: Optional[dict] = None):
    for name, ok in checks.items():
        share = f" ({shares[name]:.0%} of seeds)" if shares and name in shares else ""
        typer.echo(f"  {'pass' if ok else 'FAIL'}  {name}{share}")


@app.command()
def run(
    experiment: str = typer.Argument(..., help=f"One of: {', '.join(EXPERIMENTS)}"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="YAML config file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Root seed (required here or in the file)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Results folder"),
    fmt: Optional[str] = typer.Option(None, "--format", help="Trace format: csv or json"),
    seeds: Optional[int] = typer.Option(None, "--seeds", help="Number of seeds"),
    param: Optional[str] = typer.Option(None, "--param", help="Sweep: setting to vary"),
    values: Optional[str] = typer.Option(None, "--values", help="Sweep: comma-separated values"),
    oracle: Optional[bool] = typer.Option(None, "--oracle/--no-oracle", help="Fit the oracle grid"),
    checks: Optional[bool] = typer.Option(None, "--checks/--no-checks", help="Evaluate pass/fail checks"),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help=f"Overrides {WORKERS_ENV}"),
):
    """Run an experiment; exit status 0 iff it completed and every check passed."""
    if experiment != "sweep" and (param is not None or values is not None):
        raise typer.BadParameter("--param and --values only apply to the sweep experiment")
    try:
        cfg = load_config(experiment, config,
                          cli_overrides(seed, out, fmt, seeds, oracle, checks, param, values))
        n_workers = workers or max_workers()
    except (ConfigError, ValueError) as exc:
        typer.echo(str(exc), err=True)
        raise typer.Exit(EXIT_CONFIG)

    typer.echo(f"{APP_NAME} {APP_VERSION}: {experiment}, seed {cfg.seed}, "
               f"{cfg.n_seeds} seed(s), {n_workers} worker(s), results in {cfg.out_dir}")
    n_jobs = cfg.n_seeds * (len(cfg.sweep.values) if experiment == "sweep" else 1)
    progress = ProgressBar(n_jobs, experiment)
    try:
        if experiment == "sweep":
            result = run_sweep(cfg, n_workers, progress)
            typer.echo(result.table.to_string(index=False))
            report_checks(result.checks)
            passed = result.passed
        else:
            batch = run_experiment(cfg, n_workers, progress)
            for summary in batch.summaries:
                if summary["status"] != "completed":
                    typer.echo(f"Seed {summary['seed']} {summary['status']}: {summary['message']}", err=True)
            shares = batch.pass_shares if cfg.n_seeds > 1 else None
            report_checks({name: share >= PASS_SHARE for name, share in batch.pass_shares.items()}, shares)
            passed = batch.passed
    except ConfigError as exc:
        typer.echo(str(exc), err=True)
        raise typer.Exit(EXIT_CONFIG)
    finally:
        progress.close()

    typer.echo("PASSED" if passed else "FAILED")
    raise typer.Exit(0 if passed else EXIT_FAILED)


@app.command("summarize")
def summarize_command(directory: Path = typer.Argument(..., help="Results folder to aggregate")):
    """Aggregate every summary.json below DIRECTORY into summary_aggregate.csv."""
    try:
        frame = summarize(directory)
    except SummaryError as exc:
        typer.echo(str(exc), err=True)
        raise typer.Exit(EXIT_FAILED)
    typer.echo(frame.to_string(index=False))
    typer.echo(f"Wrote {directory / 'summary_aggregate.csv'}")


if __name__ == "__main__":
    app()
