"""Command-line entry points.

All commands take --config/--seed/--out and exit 0 on success; failures
print a machine-readable JSON error line to stderr and exit nonzero.
Single-threaded torch (--threads 1, the default) makes same-seed runs
byte-identical.
"""

from __future__ import annotations

import json
import sys
import traceback
from pathlib import Path

import click
import torch

from . import stages
from .config import ConfigError, load_run_config
from .reference import generate_references, save_reference_set
from ..plant import Plant


def _fail(kind: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    sys.exit(1)


def _run_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=False))(fn)
    fn = click.option("--seed", default=0, type=int, show_default=True)(fn)
    fn = click.option("--out", "out_dir", required=True, type=click.Path())(fn)
    fn = click.option("--threads", default=1, type=int, show_default=True,
                      help="torch threads; 1 keeps runs byte-deterministic")(fn)
    return fn


def _load(config_path, seed, out_dir, threads):
    torch.set_num_threads(max(1, threads))
    return load_run_config(config_path, seed, out_dir)


@click.group()
def main():
    """Muscle-driven key-press control pipeline."""


@main.command("train-track")
@_run_options
def train_track(config_path, seed, out_dir, threads):
    """Stage 1: train the musculotendon tracking policy."""
    try:
        run = _load(config_path, seed, out_dir, threads)
        path = stages.stage_track(run)
    except (ConfigError, stages.StageError) as exc:
        _fail("config", exc)
    except Exception as exc:   # pragma: no cover - last-resort reporting
        traceback.print_exc()
        _fail("internal", exc)
    click.echo(str(path))


@main.command("distill")
@_run_options
@click.option("--track-ckpt", default=None, type=click.Path(),
              help="stage-1 checkpoint (defaults to the config entry)")
def distill_cmd(config_path, seed, out_dir, threads, track_ckpt):
    """Stage 2: distill the tracker into a latent encoder/decoder."""
    try:
        run = _load(config_path, seed, out_dir, threads)
        path = stages.stage_distill(run, track_ckpt)
    except (ConfigError, stages.StageError) as exc:
        _fail("config", exc)
    except Exception as exc:   # pragma: no cover
        traceback.print_exc()
        _fail("internal", exc)
    click.echo(str(path))


@main.command("train-high")
@_run_options
@click.option("--decoder", "decoders", multiple=True, type=click.Path(),
              help="stage-2 checkpoint per hand (defaults to config entries)")
def train_high(config_path, seed, out_dir, threads, decoders):
    """Stage 3: train latent-space key-press policies."""
    try:
        run = _load(config_path, seed, out_dir, threads)
        path = stages.stage_high(run, list(decoders) or None)
    except (ConfigError, stages.StageError) as exc:
        _fail("config", exc)
    except Exception as exc:   # pragma: no cover
        traceback.print_exc()
        _fail("internal", exc)
    click.echo(str(path))


@main.command("eval")
@_run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--episodes", default=1, type=int, show_default=True)
def eval_cmd(config_path, seed, out_dir, threads, checkpoint, episodes):
    """Evaluate a checkpoint: tracking errors or frame-level F1."""
    try:
        run = _load(config_path, seed, out_dir, threads)
        report = stages.evaluate(run, checkpoint, episodes)
    except (ConfigError, stages.StageError) as exc:
        _fail("config", exc)
    except Exception as exc:   # pragma: no cover
        traceback.print_exc()
        _fail("internal", exc)
    click.echo(json.dumps(report, sort_keys=True))


@main.command("play")
@_run_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--trajectory", default=None, type=click.Path(),
              help="output CSV path (default <out>/trajectory.csv)")
def play_cmd(config_path, seed, out_dir, threads, checkpoint, trajectory):
    """Roll out a trained key-press policy and write trajectory CSVs."""
    try:
        run = _load(config_path, seed, out_dir, threads)
        path = stages.play(run, checkpoint, trajectory)
    except (ConfigError, stages.StageError) as exc:
        _fail("config", exc)
    except Exception as exc:   # pragma: no cover
        traceback.print_exc()
        _fail("internal", exc)
    click.echo(str(path))


@main.command("gen-ref")
@_run_options
@click.option("--count", default=None, type=int,
              help="override the configured reference count")
def gen_ref(config_path, seed, out_dir, threads, count):
    """Generate the synthetic reference motion set as CSV files."""
    try:
        run = _load(config_path, seed, out_dir, threads)
        ts = run.track()
        plant = Plant(run.plant_config())
        keyboard = run.keyboard_config() if run.raw.get("keyboard") else None
        refs = generate_references(plant, keyboard, ts.reference_kinds,
                                   count or ts.reference_count,
                                   ts.reference_seconds, ts.reference_seed)
        paths = save_reference_set(Path(out_dir) / "references", refs)
    except (ConfigError, stages.StageError) as exc:
        _fail("config", exc)
    except Exception as exc:   # pragma: no cover
        traceback.print_exc()
        _fail("internal", exc)
    click.echo("\n".join(str(p) for p in paths))


if __name__ == "__main__":
    main()
