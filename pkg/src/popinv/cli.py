"""Command line front end.

Exit codes: 0 success, 2 bad configuration or usage, 3 data problem
(malformed or inconsistent files), 4 aborted run, 5 failed verification.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import autodiff as ad
from .datagen import generate_population, load_population, save_population
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    IntegrationDiverged,
    IntegrityError,
    RunAborted,
)
from .experiments import load_config
from .inference import convergence_study, run_inference
from .verify import run_verify


def _resolve_seed(seed):
    """Explicit flag wins, then the POPINV_SEED environment variable."""
    if seed is not None:
        return seed
    env = os.environ.get("POPINV_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"POPINV_SEED must be an integer, got {env!r}") from None
    return None


def _guarded(fn):
    try:
        fn()
    except (ConfigError, click.ClickException) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except (DataFormatError, IntegrityError, DomainError) as exc:
        extra = f" (byte offset {exc.offset})" if getattr(exc, "offset", None) is not None else ""
        click.echo(f"data error: {exc}{extra}", err=True)
        sys.exit(3)
    except (RunAborted, IntegrationDiverged) as exc:
        click.echo(f"aborted: {exc}", err=True)
        sys.exit(4)


@click.group()
def main():
    """Learn input and noise distributions from population observations."""


@main.command()
@click.argument("config")
@click.option("--out", required=True, type=click.Path(), help="Dataset CSV to write.")
@click.option("--n", type=int, default=None, help="Override the population size.")
@click.option("--seed", type=int, default=None, help="Dataset seed (default POPINV_SEED, then the config's).")
@click.option("--threads", type=int, default=1, show_default=True)
def generate(config, out, n, seed, threads):
    """Draw a synthetic observed population for an experiment."""

    def body():
        cfg = load_config(config)
        ds = generate_population(cfg, n=n, seed=_resolve_seed(seed), threads=threads)
        save_population(ds, out)
        click.echo(
            f"wrote {ds.n} x {ds.d_y} population for {cfg.name} "
            f"(seed {ds.meta['seed']}, {ds.meta['resampled']} resampled) to {out}"
        )

    _guarded(body)


@main.command()
@click.argument("config")
@click.option("--data", "data_path", required=True, type=click.Path(), help="Population CSV to fit.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Fresh directory for run artifacts.")
@click.option("--seed", type=int, default=None, help="Run seed (default POPINV_SEED, then the config's).")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--plots", is_flag=True, help="Also write SVG figures into the run directory.")
@click.option("--resume", is_flag=True, help="Not supported; runs always start fresh.")
@click.option("--quiet", is_flag=True, help="Suppress per-iteration progress.")
def infer(config, data_path, out_dir, seed, threads, plots, resume, quiet):
    """Fit the input and noise distributions to an observed population."""

    def body():
        if resume:
            raise ConfigError(
                "resuming a run is not supported; point --out at a fresh directory"
            )
        if os.path.isdir(out_dir) and os.listdir(out_dir):
            raise ConfigError(f"output directory {out_dir!r} is not empty")
        cfg = load_config(config)
        ds = load_population(data_path)
        if ds.meta["config_hash"] != cfg.config_hash():
            click.echo(
                "note: dataset was generated under a different config "
                f"({ds.meta['experiment']})", err=True
            )
        progress = None if quiet else (lambda msg: click.echo(msg))
        result = run_inference(
            cfg, ds.samples, seed=_resolve_seed(seed), out_dir=out_dir,
            threads=threads, progress=progress,
        )
        for entry in result.summary["report"]:
            click.echo(
                f"{entry['label']:10s} estimate {entry['estimate']:.6g} "
                f"truth {entry['truth']:.6g} rel err {entry['rel_err']:.4f}"
            )
        if plots:
            from .plots import render_run_plots

            for path in render_run_plots(result, out_dir):
                click.echo(f"figure {path}")
        click.echo(f"artifacts in {out_dir}")

    _guarded(body)


@main.command()
@click.option("--modes", default="cut,standard", show_default=True)
@click.option("--n-grid", default="250,500,1000,2000", show_default=True)
@click.option("--gamma-grid", default="0.05", show_default=True)
@click.option("--repeats", type=int, default=20, show_default=True)
@click.option("--iterations", type=int, default=400, show_default=True)
@click.option("--out", "out_csv", required=True, type=click.Path(), help="Aggregate CSV to write.")
@click.option("--seed", type=int, default=None, help="Base seed (default POPINV_SEED, then 0).")
@click.option("--plots", is_flag=True, help="Also write an error-vs-N figure next to the CSV.")
@click.option("--quiet", is_flag=True)
def study(modes, n_grid, gamma_grid, repeats, iterations, out_csv, seed, plots, quiet):
    """Sweep population size and noise scale, aggregating recovery error."""

    def body():
        try:
            mode_list = tuple(m.strip() for m in modes.split(",") if m.strip())
            n_values = [int(v) for v in n_grid.split(",") if v.strip()]
            gamma_values = [float(v) for v in gamma_grid.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad grid value: {exc}") from None
        if not mode_list or not n_values or not gamma_values:
            raise ConfigError("modes, --n-grid and --gamma-grid must be non-empty")
        for m in mode_list:
            if m not in ("cut", "standard"):
                raise ConfigError(f"unknown gradient mode {m!r}")
        base_seed = _resolve_seed(seed)
        rows = convergence_study(
            n_values,
            gamma_values,
            modes=mode_list,
            repeats=repeats,
            iterations=iterations,
            base_seed=0 if base_seed is None else base_seed,
            out_csv=out_csv,
            progress=None if quiet else (lambda msg: click.echo(msg)),
        )
        for row in rows:
            click.echo(
                f"{row['mode']:8s} N={row['N']:<6d} gamma={row['gamma_dagger']:<8g} "
                f"rel err {row['mean_rel_err']:.4f} +/- {row['std_rel_err']:.4f} "
                f"({row['runs']} runs)"
            )
        if plots:
            from .plots import plot_study

            fig = os.path.splitext(out_csv)[0] + ".svg"
            plot_study(rows, fig)
            click.echo(f"figure {fig}")
        click.echo(f"wrote {out_csv}")

    _guarded(body)


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(), help="Finished run directory.")
def score(run_dir):
    """Recompute a finished run's report from its trace and cross-check it."""

    def body():
        summary_path = os.path.join(run_dir, "summary.json")
        trace_path = os.path.join(run_dir, "trace.csv")
        try:
            with open(summary_path) as fh:
                summary = json.load(fh)
        except FileNotFoundError:
            raise DataFormatError(f"no summary.json in {run_dir}") from None
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"summary.json is not valid JSON: {exc}") from None
        from .experiments import ExperimentConfig

        cfg = ExperimentConfig.from_dict(summary["config"])
        try:
            with open(trace_path, newline="") as fh:
                import csv as _csv

                reader = _csv.reader(fh)
                header = next(reader, None)
                if header is None:
                    raise DataFormatError("trace.csv is empty")
                rows = [dict(zip(header, (float(v) for v in line))) for line in reader]
        except FileNotFoundError:
            raise DataFormatError(f"no trace.csv in {run_dir}") from None
        window = int(cfg.learn.get("window", 100))
        mismatch = 0.0
        for entry, stored in zip(cfg.report, summary["report"]):
            col = entry["column"]
            if rows and col not in rows[0]:
                raise IntegrityError(f"trace is missing reported column {col!r}")
            series = np.asarray([r[col] for r in rows[-window:]]) if rows else None
            if series is None:
                estimate = stored["estimate"]
            else:
                if entry["transform"] == "exp":
                    series = np.exp(series)
                estimate = float(series.mean())
            rel = abs(estimate - entry["truth"]) / abs(entry["truth"])
            mismatch = max(mismatch, abs(rel - stored["rel_err"]))
            click.echo(
                f"{entry['label']:10s} estimate {estimate:.6g} truth {entry['truth']:.6g} "
                f"rel err {rel:.4f}"
            )
        if mismatch > 1e-9:
            raise IntegrityError(
                f"recomputed errors disagree with summary.json by {mismatch:.3e}"
            )
        click.echo(f"score consistent with summary ({len(rows)} iterations)")

    _guarded(body)


@main.command()
@click.option("--filter", "pattern", default=None, help="Run only checks whose name contains this.")
@click.option("--inject-fault", "fault", default=None, hidden=True, type=click.Choice(["sort-adjoint"]))
def verify(pattern, fault):
    """Run the built-in self-checks."""
    if fault == "sort-adjoint":
        ad._SORT_ADJOINT_FAULT = True
    ok = run_verify(pattern=pattern, echo=click.echo)
    if not ok:
        sys.exit(5)


if __name__ == "__main__":
    main()
