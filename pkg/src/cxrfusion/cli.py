"""Command-line entry point: ``cxrfusion {ingest,notegen,run,evaluate,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 partial success, 4 total failure.
Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .config import apply_overrides, load_config
from .core import CxrFusionError
from .orchestrator import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_FAILED = 0, 2, 3, 4
_STATUS_CODES = {pipeline.OK: EXIT_OK, pipeline.PARTIAL: EXIT_PARTIAL, pipeline.FAILED: EXIT_FAILED}


def _error(command: str, kind: str, exc: BaseException, code: int):
    record = {"command": command, "error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(code)


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), help="YAML or JSON run config.")
    @click.option("--mode", type=click.Choice(["unimodal", "multimodal"]))
    @click.option("--threshold", type=float, help="Consensus similarity threshold.")
    @click.option("--seed", type=int, help="Sampling seed (also the notegen seed unless that is set).")
    @click.option("--sample", type=int, help="Seeded sample size.")
    @click.option("--out", type=click.Path(file_okay=False, path_type=Path), help="Output directory.")
    @click.option("--backend", "backends", multiple=True, help="ID=replay:PATH or ID=mock:SENS,SPEC[,SEED]; repeatable.")
    @click.option("-v", "--verbose", count=True)
    @functools.wraps(fn)
    def wrapper(config_path, mode, threshold, seed, sample, out, backends, verbose, **kwargs):
        logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        command = click.get_current_context().info_name
        try:
            cfg = apply_overrides(load_config(config_path), mode, threshold, seed, sample, out, backends)
        except (ConfigError, ValueError) as exc:
            _error(command, "config", exc, EXIT_CONFIG)
        try:
            result = fn(cfg, **kwargs)
        except ConfigError as exc:
            _error(command, "config", exc, EXIT_CONFIG)
        except (CxrFusionError, OSError) as exc:
            _error(command, "failed", exc, EXIT_FAILED)
        click.echo(json.dumps({"command": command, "status": result.status, **result.counts}, sort_keys=True, default=str))
        sys.exit(_STATUS_CODES[result.status])

    return wrapper


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Two-model chest X-ray triage with a similarity-gated consensus."""


@main.command()
@common_options
def ingest(cfg):
    """Read the dataset index, encode images and write the manifest."""
    return pipeline.run_ingest(cfg)


@main.command()
@common_options
@click.option("--audit/--no-audit", default=None, help="Re-extract labels from every note and abort on mismatch.")
def notegen(cfg, audit):
    """Generate one templated clinical note per case."""
    return pipeline.run_notegen(cfg, audit)


@main.command()
@common_options
@click.option("--resume", is_flag=True, help="Skip cases whose outputs are already persisted.")
def run(cfg, resume):
    """Query every backend for every case and fuse the answers."""
    return pipeline.run_inference(cfg, resume=resume)


@main.command()
@common_options
def evaluate(cfg):
    """Compute metrics, agreement, McNemar tests and the sensitivity table."""
    return pipeline.run_evaluate(cfg)


@main.command("sweep")
@common_options
@click.option("--grid", help="Comma-separated ascending thresholds; defaults to the config grid.")
def sweep_cmd(cfg, grid):
    """Re-gate stored similarities over a threshold grid."""
    thresholds = None
    if grid:
        try:
            thresholds = [float(t) for t in grid.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad --grid {grid!r}") from exc
    return pipeline.run_sweep(cfg, thresholds)


if __name__ == "__main__":
    main()
