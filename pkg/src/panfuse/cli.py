"""Command-line front end.

Every verb loads a flat key-value config (plus `-o key=value` overrides),
runs one pipeline stage, and prints a small JSON summary on stdout. Failures
exit nonzero with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .config import config_hash, load_config
from .errors import PanfuseError
from . import pipeline


def _fail(kind: str, message: str, diagnostics=None) -> None:
    record = {"error": kind, "message": message}
    if diagnostics:
        record["diagnostics"] = diagnostics
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(1)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PanfuseError as exc:
            _fail(type(exc).__name__, str(exc), getattr(exc, "diagnostics", None))
        except (FileNotFoundError, OSError) as exc:
            _fail(type(exc).__name__, str(exc))

    return wrapper


def _emit(summary: dict) -> None:
    click.echo(json.dumps(summary, sort_keys=True))


def _cfg(config_path: str, overrides: tuple[str, ...]):
    kv = {}
    for item in overrides:
        if "=" not in item:
            _fail("ConfigError", f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        kv[key.strip()] = value.strip()
    return load_config(config_path, kv)


config_option = click.option(
    "--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
    help="Flat key-value config file.",
)
override_option = click.option(
    "-o", "--override", "overrides", multiple=True, metavar="KEY=VALUE",
    help="Override a config key (repeatable).",
)
run_dir_option = click.option(
    "--run-dir", required=True, type=click.Path(file_okay=False),
    help="Directory for checkpoints and event logs.",
)


@click.group()
def main():
    """Pan-sharpening toolkit: data simulation, training, fusion, evaluation."""


@main.command("make-toy-data")
@config_option
@override_option
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="Dataset root (default: config data_dir).")
@_guarded
def make_toy_data_cmd(config_path, overrides, out_dir):
    """Build synthetic train/val datasets."""
    cfg = _cfg(config_path, overrides)
    _emit(pipeline.make_toy_data(cfg, out_dir))


@main.command("pretrain-spatial")
@config_option
@override_option
@run_dir_option
@_guarded
def pretrain_spatial_cmd(config_path, overrides, run_dir):
    """Stage 1: masked-reconstruction pretraining of the conv encoder."""
    cfg = _cfg(config_path, overrides)
    path = pipeline.run_pretrain_spatial(cfg, run_dir)
    _emit({"checkpoint": str(path), "config_hash": config_hash(cfg)})


@main.command("pretrain-spectral")
@config_option
@override_option
@run_dir_option
@_guarded
def pretrain_spectral_cmd(config_path, overrides, run_dir):
    """Stage 2: masked-token pretraining of the spatial-spectral transformer."""
    cfg = _cfg(config_path, overrides)
    path = pipeline.run_pretrain_spectral(cfg, run_dir)
    _emit({"checkpoint": str(path), "config_hash": config_hash(cfg)})


@main.command("train")
@config_option
@override_option
@run_dir_option
@click.option("--stage1", default=None, type=click.Path(dir_okay=False),
              help="Spatial-prior checkpoint (default: <run-dir>/stage1_cmae.pt).")
@click.option("--stage2", default=None, type=click.Path(dir_okay=False),
              help="Loss-prior checkpoint (default: <run-dir>/stage2_tmae.pt).")
@click.option("--allow-mismatch", is_flag=True,
              help="Accept pretrained checkpoints from a different config hash.")
@_guarded
def train_cmd(config_path, overrides, run_dir, stage1, stage2, allow_mismatch):
    """Stages 3-4: train the unfolding fusion model."""
    cfg = _cfg(config_path, overrides)
    path = pipeline.run_train(cfg, run_dir, stage1=stage1, stage2=stage2,
                              allow_mismatch=allow_mismatch)
    _emit({"checkpoint": str(path), "config_hash": config_hash(cfg)})


@main.command("fuse")
@click.option("--method", required=True,
              help="bicubic, ihs, brovey, gs, sfim, gfpca, or unfolding.")
@click.option("--lrms", "lrms_path", required=True, type=click.Path(),
              help="Low-res MS raster (path without extension).")
@click.option("--pan", "pan_path", required=True, type=click.Path(),
              help="PAN raster (path without extension).")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Output raster path (without extension).")
@click.option("--checkpoint", default=None, type=click.Path(dir_okay=False),
              help="Trained model (required for method=unfolding).")
@_guarded
def fuse_cmd(method, lrms_path, pan_path, out_path, checkpoint):
    """Fuse one LRMS/PAN pair into a high-resolution MS raster."""
    path = pipeline.run_fuse(method, lrms_path, pan_path, out_path, checkpoint)
    _emit({"fused": str(path), "method": method})


@main.command("evaluate")
@click.option("--fused-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--dataset-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", required=True, type=click.Choice(["reduced", "full"]))
@click.option("--out-json", required=True, type=click.Path(dir_okay=False))
@click.option("--out-csv", required=True, type=click.Path(dir_okay=False))
@_guarded
def evaluate_cmd(fused_dir, dataset_dir, mode, out_json, out_csv):
    """Score fused rasters and write JSON + CSV reports."""
    payload = pipeline.run_evaluate(fused_dir, dataset_dir, mode, out_json, out_csv)
    _emit({"mode": mode, "rows": len(payload["rows"]),
           "aggregate": payload["aggregate"], "json": str(out_json), "csv": str(out_csv)})


@main.command("ablate-stages")
@config_option
@override_option
@run_dir_option
@click.option("--stages", "k_list", required=True,
              help="Comma-separated stage counts, e.g. 1,2,4.")
@_guarded
def ablate_stages_cmd(config_path, overrides, run_dir, k_list):
    """Train and score one model per stage count under the same budget."""
    cfg = _cfg(config_path, overrides)
    try:
        ks = [int(part) for part in k_list.split(",") if part.strip()]
    except ValueError:
        _fail("ValidationError", f"--stages must be comma-separated integers, got {k_list!r}")
    rows = pipeline.run_ablate_stages(cfg, run_dir, ks)
    _emit({"rows": rows, "csv": str(Path(run_dir) / "ablation.csv")})


if __name__ == "__main__":
    main()
