"""Command-line entry point ``flowutil``.

Exit status: 0 all suites pass, 1 a suite failed, 2 configuration or usage
error (detected before any simulation), 3 runtime error inside a module.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .config import SUITE_NAMES, ConfigError, ExperimentConfig, bundled_configs
from .container import field_to_csv, save_ensemble, save_field
from .errors import FlowUtilError
from .pipeline import CONFIG_LOCUS, prepare, run_suites, simulate
from .reporting import (
    ArtifactMismatchError,
    FAILED_MARKER,
    emit_plots,
    emit_report,
    load_reports,
    write_failed_marker,
    write_manifest,
)
from .utility import conjugate_via_flow, fenchel_conjugate

EXIT_OK, EXIT_SUITE_FAILED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("flowutil")


def _formats(value: str | None):
    if value is None:
        return None
    return ("json", "csv") if value == "both" else (value,)


def load_config(config, seed=None, paths=None, suites=(), out=None, fmt=None) -> ExperimentConfig:
    if config is None:
        raise ConfigError("no config given (positional CONFIG or --config)")
    cfg = ExperimentConfig.from_file(config)
    return cfg.with_run(seed=seed, paths=paths, suites=list(suites) or None, directory=out, formats=_formats(fmt))


def execute(cfg: ExperimentConfig, write_artifacts: bool = True, plots: bool | None = None) -> int:
    """Run the configured pipeline into cfg.output.directory; returns the exit status."""
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    reports = []
    try:
        exp = prepare(cfg)
        if write_artifacts:
            save_field(exp.field, out / "field.fupe", {"config_hash": cfg.config_hash})
        reports = run_suites(exp, cfg.suites)
        emit_report(reports, out, cfg.output.formats, cfg.config_hash)
        if cfg.output.plots if plots is None else plots:
            emit_plots(exp, out)
    except FlowUtilError as exc:
        module = getattr(exc, "module", "flowutil")
        message = f"{module}: {type(exc).__name__} at {CONFIG_LOCUS.get(module, '[run]')}: {exc}"
        write_failed_marker(out, message)
        write_manifest(out, cfg, reports, EXIT_RUNTIME, error=message)
        click.echo(f"error: {message}", err=True)
        return EXIT_RUNTIME
    status = EXIT_OK if all(r.passed for r in reports) else EXIT_SUITE_FAILED
    write_manifest(out, cfg, reports, status)
    for r in reports:
        click.echo(r.summary())
    if status:
        failing = [r.suite for r in reports if not r.passed]
        click.echo(f"FAILED suites: {', '.join(failing)}")
    return status


def _config_options(f):
    f = click.option("--config", "config_opt", type=str, help="Config file or bundled config name.")(f)
    f = click.option("--seed", type=int, help="Override [run] seed.")(f)
    f = click.option("--paths", type=int, help="Override [run] paths.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), help="Output directory.")(f)
    f = click.option("--format", "fmt", type=click.Choice(["json", "csv", "both"]), help="Report formats.")(f)
    f = click.option("--suite", "suites", multiple=True, help=f"Suite to run (repeatable): {', '.join(SUITE_NAMES)}.")(f)
    return f


def _guard(fn):
    """Map configuration errors to exit 2 and module errors to exit 3."""
    try:
        return fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except FlowUtilError as exc:
        click.echo(f"error: {getattr(exc, 'module', 'flowutil')}: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Forward utilities from optimal-wealth flows: build, verify, report."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", required=False)
@_config_options
@click.option("--plots/--no-plots", default=None, help="Write static plots (default from config).")
def run(config, config_opt, seed, paths, out, fmt, suites, plots):
    """Simulate, build, verify and report in one go."""
    cfg = _guard(lambda: load_config(config or config_opt, seed, paths, suites, out, fmt))
    sys.exit(execute(cfg, plots=plots))


@main.command()
@click.argument("config", required=False)
@_config_options
def verify(config, config_opt, seed, paths, out, fmt, suites):
    """Run verification suites and write reports (no field artifacts)."""
    cfg = _guard(lambda: load_config(config or config_opt, seed, paths, suites, out, fmt))
    sys.exit(execute(cfg, write_artifacts=False, plots=False))


@main.command("simulate")
@click.argument("config", required=False)
@_config_options
def simulate_cmd(config, config_opt, seed, paths, out, fmt, suites):
    """Simulate the path ensemble and store it as ensemble.fupe."""
    cfg = _guard(lambda: load_config(config or config_opt, seed, paths, suites, out, fmt))
    target = Path(cfg.output.directory)
    target.mkdir(parents=True, exist_ok=True)
    ens = _guard(lambda: simulate(cfg))
    path = save_ensemble(ens, target / "ensemble.fupe")
    click.echo(f"wrote {path} ({ens.n_paths} paths, {ens.n_steps} steps, scenario {ens.scenario.scenario_hash()})")


@main.command()
@click.argument("config", required=False)
@_config_options
@click.option("--csv-paths", type=int, default=10, show_default=True, help="Paths written to field.csv.")
def build(config, config_opt, seed, paths, out, fmt, suites, csv_paths):
    """Build flow, dual and utility field; store field.fupe and field.csv."""
    cfg = _guard(lambda: load_config(config or config_opt, seed, paths, suites, out, fmt))
    target = Path(cfg.output.directory)
    target.mkdir(parents=True, exist_ok=True)
    exp = _guard(lambda: prepare(cfg))
    save_field(exp.field, target / "field.fupe", {"config_hash": cfg.config_hash})
    field_to_csv(exp.field, target / "field.csv", range(min(csv_paths, exp.field.n_paths)))
    click.echo(f"wrote {target / 'field.fupe'} and {target / 'field.csv'} ({exp.field.provenance})")


@main.command()
@click.argument("config", required=False)
@_config_options
@click.option("--t", "t", type=float, required=True, help="Time on the flow grid.")
@click.option("--y", "ys", type=float, multiple=True, required=True, help="Dual level (repeatable).")
@click.option("--path", "path_index", type=int, default=0, show_default=True)
def conjugate(config, config_opt, seed, paths, out, fmt, suites, t, ys, path_index):
    """Evaluate the conjugate by grid maximization, marginal inversion and the flow integral."""
    cfg = _guard(lambda: load_config(config or config_opt, seed, paths, suites, out, fmt))
    exp = _guard(lambda: prepare(cfg))
    y = np.asarray(ys)

    def compute():
        return {
            "t": t,
            "path": path_index,
            "y": y.tolist(),
            "grid": np.atleast_1d(fenchel_conjugate(exp.field, t, y, path_index)).tolist(),
            "legendre": np.atleast_1d(fenchel_conjugate(exp.field, t, y, path_index, route="legendre")).tolist(),
            "via_flow": np.atleast_1d(conjugate_via_flow(exp.flow, exp.dual, t, y, path_index)).tolist(),
        }

    click.echo(json.dumps(_guard(compute), indent=2))


@main.command()
@click.argument("dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
def report(dirs):
    """Summarize stored suite reports; rejects artifacts from mixed configs or versions."""
    try:
        docs = load_reports(dirs)
    except ArtifactMismatchError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if not docs:
        click.echo("no suite reports found")
        sys.exit(EXIT_OK)
    failed = False
    for doc in docs:
        bad = [c["name"] for c in doc["cases"] if c["verdict"] != "pass"]
        failed |= bool(bad)
        click.echo(f"{doc['suite']}: {doc['verdict']} ({len(doc['cases']) - len(bad)}/{len(doc['cases'])}) [{doc.get('config_hash')}]")
        for name in bad[:10]:
            click.echo(f"  FAIL {name}")
    sys.exit(EXIT_SUITE_FAILED if failed else EXIT_OK)


@main.command("configs")
def configs_cmd():
    """List bundled configs."""
    for name in bundled_configs():
        click.echo(name)


if __name__ == "__main__":
    main()
