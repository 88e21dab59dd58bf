"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
error (NaN/Inf detected during computation).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError


@click.group()
def cli():
    """TextMage: train, run, and evaluate a Bangla image-caption model."""


@cli.command("gen-data")
@click.option("--n", type=int, required=True, help="Number of images to generate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--shapes", type=int, default=3, show_default=True, help="Number of shape classes.")
@click.option("--duplicate-captions", is_flag=True,
              help="Write the same caption twice instead of two distinct templates.")
def gen_data(n, seed, out_dir, image_size, shapes, duplicate_captions):
    """Generate a synthetic shape/color dataset with Bangla captions."""
    from .data import generate_synthetic_dataset

    manifest = generate_synthetic_dataset(
        n, seed, out_dir, image_size=image_size, num_shapes=shapes,
        distinct_captions=not duplicate_captions)
    click.echo(f"wrote {len(manifest)} images, {manifest.caption_count} captions "
               f"to {Path(out_dir) / 'manifest.jsonl'}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON run config; defaults apply when omitted.")
@click.option("--stage", type=click.Choice(["1", "2", "3", "all"]), default="all",
              show_default=True)
@click.option("--data", "data_path", type=click.Path(), required=True,
              help="Manifest (JSON Lines).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--from-scratch", is_flag=True,
              help="Stage 3 reinitializes instead of loading stage checkpoints.")
def train(config_path, stage, data_path, out_dir, from_scratch):
    """Run the training protocol (stage 1: CNN, 2: LSTM, 3: joint)."""
    import dataclasses

    from . import pipeline as P
    from .data import load_manifest

    config = P.load_run_config(config_path) if config_path else P.RunConfig()
    if from_scratch:
        config = dataclasses.replace(config, joint_from_scratch=True)
    manifest = load_manifest(data_path)
    out = Path(out_dir)

    def done(name, result):
        line = f"{name}: done"
        if "val_accuracy" in result.info:
            line += f" (val acc {result.info['val_accuracy']:.4f})"
        elif "train_accuracy" in result.info:
            line += f" (train acc {result.info['train_accuracy']:.4f})"
        click.echo(line)

    if stage in ("1", "all"):
        done("stage1", P.train_stage1(config, manifest, out))
    if stage in ("2", "all"):
        ckpt = P.load_checkpoint(out / "stage1.ckpt")
        done("stage2", P.train_stage2(config, manifest, ckpt, out))
    if stage in ("3", "all"):
        ckpt = P.load_checkpoint(out / "stage2.ckpt")
        done("stage3", P.train_joint(config, manifest, ckpt, out))


@cli.command("caption")
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
@click.option("--image", "image_path", type=click.Path(), required=True)
@click.option("--beam", type=int, default=None, help="Beam width; greedy when omitted.")
def caption(ckpt_path, image_path, beam):
    """Caption one image with a trained checkpoint."""
    from . import pipeline as P

    ckpt = P.load_checkpoint(ckpt_path)
    click.echo(P.caption_image(ckpt, image_path, beam_width=beam))


@cli.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--report", "report_path", type=click.Path(), required=True)
@click.option("--hidden-sweep", "hidden_sweep", type=str, default=None,
              help="Comma-separated hidden sizes; retrains the decoder per size.")
def eval_cmd(ckpt_path, data_path, report_path, hidden_sweep):
    """Evaluate BLEU-1..4 and METEOR on the validation split of a manifest."""
    from . import pipeline as P
    from .data import load_manifest

    ckpt = P.load_checkpoint(ckpt_path)
    manifest = load_manifest(data_path)
    if hidden_sweep:
        try:
            sizes = [int(s) for s in hidden_sweep.split(",") if s.strip()]
        except ValueError:
            raise click.UsageError(f"--hidden-sweep must be comma-separated ints, got '{hidden_sweep}'")
        report = P.run_hidden_sweep(ckpt, manifest, sizes)
        for row in report["sweep"]:
            click.echo(f"hidden {row['hidden_size']}: BLEU-1 {row['bleu']['1']:.1f} "
                       f"METEOR {row['meteor_x100']:.2f}")
    else:
        prep = P.prepare_data(ckpt.run_config, manifest)
        if not prep.val:
            raise DataError("validation split is empty; nothing to evaluate")
        report = P.evaluate_checkpoint(ckpt, prep.val)
        click.echo(f"BLEU-1 {report['bleu']['1']:.1f}  BLEU-4 {report['bleu']['4']:.1f}  "
                   f"METEOR {report['meteor']:.4f} (x100: {report['meteor_x100']:.2f})")
    P.write_report(report, report_path)
    click.echo(f"report written to {report_path}")


@cli.command("stats")
@click.option("--data", "data_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Also write class_frequency.csv and .png here.")
def stats(data_path, out_dir):
    """Print the class-frequency table of a manifest."""
    from .data import load_manifest

    manifest = load_manifest(data_path)
    counts = manifest.class_counts
    click.echo("class,count")
    for class_id, count in counts.items():
        click.echo(f"{class_id},{count}")
    click.echo(f"# images={len(manifest)} captions={manifest.caption_count}")
    if out_dir:
        from .figures import render_class_frequency

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["class,count"] + [f"{c},{n}" for c, n in counts.items()]
        (out / "class_frequency.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        render_class_frequency(counts, out / "class_frequency.png")


def main(argv=None) -> int:
    """Run the CLI with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except (DataError, ConfigError, CheckpointError, ShapeError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return 3
    return 0


def entry() -> None:
    sys.exit(main())
