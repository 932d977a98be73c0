"""Command-line interface exposing every pipeline stage.

Every subcommand reads a run configuration JSON (defaults apply when the
flag is omitted), applies flag overrides, writes its artifacts under the
output directory, and echoes the fully resolved configuration there.
Exit codes: 0 success, 2 validation failure (bad flags, config, or input
schema), 1 runtime failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import config as C
from . import pipeline as P
from . import qa as Q
from .attention import ConfigError
from .geometry import GeometryError, convert_dataset
from .metrics import MetricsError
from .qa import QAError
from .segmenter import SegmenterError, save_checkpoint
from .synth import SynthError, generate_dataset, image_to_png, write_dataset
from .tensor import ShapeError

_VALIDATION_ERRORS = (C.RunConfigError, SynthError, GeometryError, QAError,
                      SegmenterError, MetricsError, ShapeError, ConfigError,
                      FileNotFoundError, KeyError, json.JSONDecodeError)


def _load_config(config_path, seed, threads) -> C.RunConfig:
    cfg = C.load(config_path) if config_path else C.RunConfig()
    if seed is not None:
        cfg.seed = seed
        cfg.synth = dataclasses.replace(cfg.synth, seed=seed)
    if threads is not None:
        if threads < 1:
            raise C.RunConfigError("threads must be >= 1")
        cfg.threads = threads
    return cfg


def _run(command, *args, **kwargs):
    try:
        command(*args, **kwargs)
    except _VALIDATION_ERRORS as err:
        click.echo(f"validation error: {err}", err=True)
        sys.exit(2)
    except Exception as err:  # runtime failure
        click.echo(f"runtime error: {err}", err=True)
        sys.exit(1)
    sys.exit(0)


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="run configuration JSON")(fn)
    fn = click.option("--seed", type=int, default=None, help="override the config seed")(fn)
    fn = click.option("--threads", type=int, default=None, help="worker cap")(fn)
    return fn


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")


@click.group()
def main():
    """Chart segmentation and chart question answering, desk scale."""


@main.command()
@common_options
@click.option("--out", "out_dir", required=True, type=click.Path(), help="dataset directory")
def synth(config_path, seed, threads, out_dir):
    """Render synthetic charts with keypoint ground truth and QA pairs."""

    def run():
        cfg = _load_config(config_path, seed, threads)
        C.echo(cfg, out_dir)
        samples = generate_dataset(cfg.synth)
        summary = write_dataset(samples, out_dir, cfg.synth)
        _write_json(Path(out_dir) / "synth_summary.json", summary)
        click.echo(json.dumps(summary, sort_keys=True))

    _run(run)


@main.command()
@common_options
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="keypoints.json")
@click.option("--out", "out_path", required=True, type=click.Path(), help="instances.json")
@click.option("--points-per-radian", type=float, default=None)
@click.option("--thickness-frac", type=float, default=None)
def convert(config_path, seed, threads, in_path, out_path, points_per_radian, thickness_frac):
    """Convert keypoint annotations to polygon instance annotations."""

    def run():
        cfg = _load_config(config_path, seed, threads)
        ppr = points_per_radian if points_per_radian is not None else 5.0
        frac = thickness_frac if thickness_frac is not None else cfg.synth.line_thickness_frac
        report = convert_dataset(in_path, out_path, points_per_radian=ppr, thickness_frac=frac)
        _write_json(str(out_path) + ".report.json", report.to_dict())
        click.echo(json.dumps(report.to_dict(), sort_keys=True))

    _run(run)


@main.command(name="train-seg")
@common_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True),
              help="directory with instances.json and images/")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=None, help="override training steps")
def train_seg(config_path, seed, threads, data_dir, out_dir, steps):
    """Train the segmentation model and checkpoint it."""

    def run():
        cfg = _load_config(config_path, seed, threads)
        if steps is not None:
            cfg.seg_train = dataclasses.replace(cfg.seg_train, steps=steps)
        C.echo(cfg, out_dir)
        dataset = P.load_seg_dataset(data_dir)
        result = P.train_segmentation(dataset, cfg, log=click.echo)
        save_checkpoint(Path(out_dir) / "seg.ckpt", result["model"])
        _write_json(Path(out_dir) / "loss_trace.json",
                    {"losses": result["losses"], "evals": result["evals"]})
        final = result["evals"][-1] if result["evals"] else {}
        click.echo(json.dumps({"steps": len(result["losses"]), **final}, sort_keys=True))

    _run(run)


@main.command(name="infer-seg")
@common_options
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(), help="seg_pred.json")
def infer_seg(config_path, seed, threads, ckpt_path, data_dir, out_path):
    """Dump per-image detections (class, score, RLE mask, box)."""

    def run():
        from .segmenter import load_checkpoint

        model = load_checkpoint(ckpt_path)
        dataset = P.load_seg_dataset(data_dir)
        _write_json(out_path, P.seg_inference(model, dataset))
        click.echo(f"wrote {out_path}")

    _run(run)


@main.command(name="eval-seg")
@common_options
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(), help="eval_report.json")
def eval_seg(config_path, seed, threads, pred_path, gt_path, out_path):
    """Detection metrics: mAP, mAP50, mAP75 and the per-category table."""

    def run():
        report = P.seg_eval(pred_path, gt_path)
        _write_json(out_path, report.to_dict())
        click.echo(json.dumps({"mAP": report.map, "mAP50": report.map50,
                               "mAP75": report.map75}, sort_keys=True))

    _run(run)


@main.command(name="train-qa")
@common_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True),
              help="directory with qa_dataset.json and images/")
@click.option("--seg-ckpt", "seg_ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--mode", type=str, default=None,
              help="fusion mode override, or 'all' for the ablation runner")
@click.option("--steps", type=int, default=None)
def train_qa(config_path, seed, threads, data_dir, seg_ckpt, out_dir, mode, steps):
    """Train the QA model (or run the four-mode ablation)."""

    def run():
        cfg = _load_config(config_path, seed, threads)
        if steps is not None:
            cfg.qa_train = dataclasses.replace(cfg.qa_train, steps=steps)
        C.echo(cfg, out_dir)
        samples, _ = P.load_qa_samples(data_dir)
        if mode == "all":
            report = P.run_ablation(samples, seg_ckpt, cfg, log=click.echo)
            _write_json(Path(out_dir) / "ablation_report.json", report)
            click.echo(json.dumps(report, sort_keys=True))
            return
        if mode is not None:
            cfg.qa = dataclasses.replace(cfg.qa, fusion_mode=mode)
        result = P.train_qa(samples, seg_ckpt, cfg, log=click.echo)
        Q.save_qa_checkpoint(Path(out_dir) / "qa.ckpt", result["model"])
        _write_json(Path(out_dir) / "qa_loss_trace.json",
                    {"losses": result["losses"], "evals": result["evals"]})
        final = result["evals"][-1] if result["evals"] else {}
        click.echo(json.dumps({"steps": len(result["losses"]), **final}, sort_keys=True))

    _run(run)


@main.command(name="infer-qa")
@common_options
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path(), help="answers.json")
def infer_qa(config_path, seed, threads, ckpt_path, data_dir, out_path):
    """Greedy-decode answers for every sample in the dataset."""

    def run():
        model = Q.load_qa_checkpoint(ckpt_path)
        samples, _ = P.load_qa_samples(data_dir, vocab=model.vocab)
        _write_json(out_path, P.qa_inference(model, samples))
        click.echo(f"wrote {out_path}")

    _run(run)


@main.command(name="eval-qa")
@common_options
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_qa(config_path, seed, threads, pred_path, out_path):
    """Relaxed accuracy over an answers.json dump."""

    def run():
        answers = json.loads(Path(pred_path).read_text(encoding="utf-8"))
        report = P.qa_eval(answers)
        _write_json(out_path, report)
        click.echo(json.dumps(report, sort_keys=True))

    _run(run)


@main.command()
@common_options
@click.option("--scope", type=click.Choice(["ops", "models", "all"]), default="all")
@click.option("--out", "out_path", type=click.Path(), default="gradcheck_report.json")
def gradcheck(config_path, seed, threads, scope, out_path):
    """Finite-difference checks for every differentiable op and block."""

    def run():
        cfg = _load_config(config_path, seed, threads)
        report = {}
        if scope in ("ops", "all"):
            report.update(P.gradcheck_suite(seed=cfg.seed))
        if scope in ("models", "all"):
            report.update(P.gradcheck_model_end_to_end(seed=cfg.seed))
        _write_json(out_path, report)
        worst = max(report.values())
        click.echo(json.dumps({"checks": len(report), "max_rel_err": worst}, sort_keys=True))
        if worst >= 1e-4:
            raise RuntimeError(f"gradcheck failed: max rel err {worst:.3e}")

    _run(run)


@main.command(name="dump-points")
@common_options
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True),
              help="QA checkpoint")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--index", type=int, default=0, help="sample index")
@click.option("--out", "out_path", required=True, type=click.Path(), help="overlay JSON")
@click.option("--raster", "raster_path", type=click.Path(), default=None,
              help="optional PNG with the points drawn in")
def dump_points(config_path, seed, threads, ckpt_path, data_dir, index, out_path, raster_path):
    """Write the question-guided deformed sample points for one sample."""

    def run():
        model = Q.load_qa_checkpoint(ckpt_path)
        samples, _ = P.load_qa_samples(data_dir, vocab=model.vocab)
        if not (0 <= index < len(samples)):
            raise QAError(f"sample index {index} out of range (0..{len(samples) - 1})")
        sample = samples[index]
        overlay = Q.dump_deformed_points(model, sample, image_name=f"sample_{index}")
        _write_json(out_path, overlay)
        if raster_path:
            image = sample.image.transpose(1, 2, 0).copy()
            h, w = image.shape[:2]
            for x, y in overlay["points"]:
                r0, c0 = int(round(y)), int(round(x))
                image[max(0, r0 - 1):min(h, r0 + 2), max(0, c0 - 1):min(w, c0 + 2)] = (1.0, 0.0, 0.0)
            image_to_png(image, raster_path)
        click.echo(f"wrote {out_path} ({len(overlay['points'])} points)")

    _run(run)


if __name__ == "__main__":
    main()
