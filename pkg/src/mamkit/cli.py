"""Command-line entry point: ``mamkit <command>``."""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from .labels import manifest_stats, read_manifest, resplit, validate_manifest, write_manifest


def _echo_json(doc) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ----------------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------------


@main.group()
def manifest() -> None:
    """Manifest validation, splitting and statistics."""


@manifest.command("validate")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
def manifest_validate(file: str) -> None:
    report = validate_manifest(file)
    for line in report.lines():
        click.echo(line)
    click.echo(f"{report.records} records, {len(report.errors)} problems")
    sys.exit(0 if report.ok else 1)


@manifest.command("split")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Write here instead of stdout.")
def manifest_split(file: str, seed: int, out: str | None) -> None:
    """Reassign 80/10/10 splits by original id; drops records with exclusion tags."""
    records, dropped = resplit(read_manifest(file), seed)
    if out:
        write_manifest(out, records)
    else:
        for rec in records:
            click.echo(json.dumps(rec.to_json()))
    click.echo(f"{len(records)} records written, {dropped} excluded", err=True)


@manifest.command("stats")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--images", type=click.Path(file_okay=False), help="Image root for PSNR (default: manifest dir).")
@click.option("--no-psnr", is_flag=True)
def manifest_stats_cmd(file: str, images: str | None, no_psnr: bool) -> None:
    records = read_manifest(file)
    root = None if no_psnr else Path(images or Path(file).parent)
    _echo_json(manifest_stats(records, root))


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------


@main.group()
def metrics() -> None:
    """Evaluation indicators from prediction files."""


@metrics.command("eval")
@click.option("--pred", "preds", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False),
              help="Prediction JSON-lines; repeat once per trial.")
@click.option("--trials", type=int, default=None, help="Expected number of trial files to average.")
@click.option("--out", type=click.Path(dir_okay=False))
def metrics_eval(preds: tuple[str, ...], trials: int | None, out: str | None) -> None:
    from .metrics import aggregate, average_trials, read_predictions, write_report

    if trials is not None and trials != len(preds):
        raise click.BadParameter(f"--trials {trials} but {len(preds)} --pred files", param_hint="--pred")
    reports = [aggregate(read_predictions(p)) for p in preds]
    report = reports[0] if len(reports) == 1 else average_trials(reports, expected=len(reports))
    if out:
        write_report(out, report)
    _echo_json(report.to_json())


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------


@main.group()
def synth() -> None:
    """Synthetic four-factor face data."""


@synth.command("generate")
@click.option("--n", "count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--canvas", type=int, default=64, show_default=True)
@click.option("--fractions", default="0.8,0.1,0.1", show_default=True, help="train,val,test fractions")
def synth_generate_cmd(count: int, seed: int, out: str, canvas: int, fractions: str) -> None:
    from .synth import SyntheticSpec, synth_generate, write_synthetic

    fr = tuple(float(f) for f in fractions.split(","))
    data = synth_generate(count, _seed(seed), SyntheticSpec(canvas=canvas), fr)
    click.echo(str(write_synthetic(data, out)))


@main.command("augment")
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def augment_cmd(in_dir: str, out_dir: str, seed: int) -> None:
    """Blur / PNG-or-JPEG round trip every image; writes records.jsonl alongside."""
    from .augment import augment_directory

    rows = augment_directory(in_dir, out_dir, _seed(seed))
    click.echo(f"{len(rows)} images augmented into {out_dir}")


def _seed(value: int) -> int:
    env = os.environ.get("MAMKIT_SEED")
    return int(env) if env else value


def _load_split(manifest_path: str, split: str):
    import numpy as np

    from .synth import load_images

    records = [r for r in read_manifest(manifest_path) if r.split == split and not r.exclusions]
    images = load_images(records, Path(manifest_path).parent)
    labels = np.array([r.annotation.levels for r in records], dtype=np.int64).reshape(-1, 4)
    return images, labels, records


# ----------------------------------------------------------------------------
# training and evaluation
# ----------------------------------------------------------------------------


@main.command("train")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--batch-size", type=int)
@click.option("--lr-cnn", type=float)
@click.option("--lr-transformer", type=float)
@click.option("--epochs", type=int)
@click.option("--patience", type=int)
@click.option("--rates", help="Comma-separated, fractions allowed: 1/64,1/16,1/4,1")
@click.option("--temperature", type=float)
@click.option("--model-width", type=int)
@click.option("--depth", type=int)
@click.option("--heads", type=int)
@click.option("--seed", type=int)
@click.option("--no-augment", is_flag=True)
def train_cmd(manifest_path: str, out: str, config_path: str | None, no_augment: bool, **flags) -> None:
    """Train on the manifest's train split; writes checkpoint.bin and run_log.jsonl."""
    from dataclasses import replace

    from .model import MamNet
    from .training import build_configs, load_config_file, save_checkpoint, train, write_run_log

    values = load_config_file(config_path)
    values.update({k: v for k, v in flags.items() if v is not None})
    tcfg, mcfg = build_configs(values)
    if no_augment:
        tcfg = replace(tcfg, augment=False)
    x_tr, y_tr, _ = _load_split(manifest_path, "train")
    x_va, y_va, _ = _load_split(manifest_path, "val")
    if len(x_tr):
        mcfg = replace(mcfg, input_size=tuple(x_tr.shape[1:3]))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = MamNet(mcfg, seed=tcfg.seed)
    start = time.perf_counter()
    result = train(model, (x_tr, y_tr), (x_va, y_va), tcfg,
                   on_epoch=lambda e: click.echo(
                       f"epoch {e.epoch:3d} train_loss {e.train_loss:.4f} val_loss {e.val_loss:.4f}", err=True))
    write_run_log(out_dir / "run_log.jsonl", result.history)
    save_checkpoint(out_dir / "checkpoint.bin", result.model,
                    {"best_epoch": result.best_epoch, "seed": tcfg.seed})
    click.echo(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.4f}), "
               f"{time.perf_counter() - start:.0f}s; checkpoint in {out_dir}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--trials", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def eval_cmd(checkpoint: str, manifest_path: str, split: str, trials: int, seed: int, out: str) -> None:
    """Five-trial (by default) augmented evaluation; writes report.json and per-trial files."""
    from .metrics import write_predictions, write_report
    from .training import evaluate, load_checkpoint, to_records

    if not Path(checkpoint).is_file():
        raise click.BadParameter(f"checkpoint {checkpoint} does not exist", param_hint="--checkpoint")
    model, _ = load_checkpoint(checkpoint)
    images, labels, records = _load_split(manifest_path, split)
    result = evaluate(model, images, labels, trials=trials, seed=_seed(seed))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, (rep, pred) in enumerate(zip(result.trials, result.predictions), start=1):
        write_report(out_dir / f"trial_{t}.json", rep)
        write_predictions(out_dir / f"predictions_{t}.jsonl", to_records(pred, labels, [r.id for r in records]))
    write_report(out_dir / "report.json", result.average)
    click.echo(result.average.summary())


@main.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck_cmd(seed: int) -> None:
    """Finite-difference check of every differentiable operation; nonzero exit on failure."""
    from .gradcheck import gradcheck_all

    results = gradcheck_all(seed)
    for r in results:
        click.echo(r.line())
    failed = [r for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
