"""Command-line interface for the full watermarking pipeline.

The run-directory root comes from ROBUSTMARK_RUNS (default ./runs). Every
training command echoes its resolved config into the run directory before
touching any parameters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from pathlib import Path

import click
import torch

from . import corpus as corpus_mod
from . import pipeline, report as report_mod
from .adversarial import AdvBudget, SurrogateConfig, train_surrogate
from .config import echo_config, parse_config
from .distortions import parse_attack_spec
from .evaluate import run_evaluation, write_records
from .metrics import bit_accuracy, psnr, round_message
from .models import (clean_metrics, decode, encode, init_models,
                     load_checkpoint, pretrain_base, save_checkpoint)
from .regeneration import load_denoiser, save_denoiser, train_denoiser
from .seeding import derive_seed
from .stage1 import run_stage1, train_eat_baseline, train_jat_baseline
from .stage2 import optimize_image
from .theorem import verify_theorem


def _run_root() -> Path:
    return Path(os.environ.get("ROBUSTMARK_RUNS", "runs"))


def _load_cfg(config_path, seed, overrides=()):
    cli_overrides = {}
    for item in overrides:
        key, _, val = item.partition("=")
        if not val:
            raise click.BadParameter(f"override must be key=value, got {item!r}")
        cli_overrides[key] = val
    if seed is not None:
        cli_overrides["eval.seed"] = seed
    return parse_config(config_path, cli_overrides)


def _prepare_run(cfg: dict, name: str) -> Path:
    run_dir = _run_root() / f"{name}_{time.strftime('%Y%m%d_%H%M%S')}"
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run_dir)
    return run_dir


def _checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _provenance(run_dir: Path, cfg: dict, checkpoints: dict) -> None:
    with open(run_dir / "provenance.json", "w") as f:
        json.dump({
            "seed": cfg["eval"]["seed"],
            "checkpoints": {k: _checkpoint_hash(v) for k, v in checkpoints.items()},
        }, f, indent=2)


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="YAML config file."),
    click.option("--seed", type=int, default=None, help="Master seed override."),
    click.option("--set", "overrides", multiple=True,
                 help="Config override, e.g. --set stage2.psnr_floor=36."),
]


def with_common(f):
    for opt in reversed(common_options):
        f = opt(f)
    return f


@click.group()
def main():
    """Two-stage robust watermarking pipeline."""


@main.command("gen-corpus")
@with_common
@click.option("--out", type=click.Path(), required=True)
def gen_corpus(config_path, seed, overrides, out):
    """Generate the deterministic synthetic corpus (or ingest a folder)."""
    cfg = _load_cfg(config_path, seed, overrides)
    c = cfg["corpus"]
    if c["source_folder"]:
        images = corpus_mod.load_corpus(c["source_folder"], c["height"], c["width"])
    else:
        images = corpus_mod.generate_corpus(c["count"], c["height"], c["width"],
                                            seed=cfg["eval"]["seed"])
    corpus_mod.save_corpus(images, out)
    cov = corpus_mod.histogram_coverage(images)
    click.echo(f"wrote {len(images)} images to {out} (histogram coverage {cov:.2f})")


def _load_images(folder, cfg):
    c = cfg["corpus"]
    return corpus_mod.load_corpus(folder, c["height"], c["width"])


@main.command("pretrain")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def pretrain(config_path, seed, overrides, corpus_dir, out):
    """Base encoder/decoder pretraining with a light noise layer."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = _prepare_run(cfg, "pretrain")
    images = _load_images(corpus_dir, cfg)
    bundle = init_models(pipeline.arch_meta(cfg), seed=cfg["eval"]["seed"])
    bundle = pretrain_base(bundle, images,
                           pipeline.pretrain_config(cfg, cfg["eval"]["seed"]))
    save_checkpoint(bundle, out)
    _provenance(run_dir, cfg, {"model": out})
    click.echo(f"clean BA {bundle.history['pretrain_clean_ba']:.4f}, "
               f"PSNR {bundle.history['pretrain_psnr']:.2f} dB -> {out}")


def _epoch_log(run_dir: Path, bundle, key: str) -> None:
    rows = bundle.history.get(key, [])
    with open(run_dir / "epoch_metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "adversarial_ba"])
        for i, v in enumerate(rows):
            writer.writerow([i, f"{v:.6f}"])


@main.command("finetune-stage1")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def finetune_stage1(config_path, seed, overrides, corpus_dir, model_path, out):
    """Adversarial encoder fine-tuning with conditional decoder update."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = _prepare_run(cfg, "stage1")
    _provenance(run_dir, cfg, {"model_in": model_path})
    images = _load_images(corpus_dir, cfg)
    bundle = load_checkpoint(model_path)
    bundle = run_stage1(bundle, images,
                        pipeline.stage1_config(cfg, cfg["eval"]["seed"]))
    save_checkpoint(bundle, out)
    _epoch_log(run_dir, bundle, "stage1_epoch_adv_ba")
    click.echo(f"decoder steps {bundle.history['stage1_decoder_steps']} / "
               f"{bundle.history['stage1_batches']} batches -> {out}")


@main.command("train-eat")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def train_eat(config_path, seed, overrides, corpus_dir, model_path, out):
    """Encoder-only adversarial fine-tuning baseline (decoder frozen)."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = _prepare_run(cfg, "eat")
    _provenance(run_dir, cfg, {"model_in": model_path})
    images = _load_images(corpus_dir, cfg)
    bundle = train_eat_baseline(load_checkpoint(model_path), images,
                                pipeline.stage1_config(cfg, cfg["eval"]["seed"]))
    save_checkpoint(bundle, out)
    _epoch_log(run_dir, bundle, "stage1_epoch_adv_ba")
    click.echo(f"EAT baseline -> {out}")


@main.command("train-jat")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def train_jat(config_path, seed, overrides, corpus_dir, model_path, out):
    """Joint adversarial training baseline."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = _prepare_run(cfg, "jat")
    _provenance(run_dir, cfg, {"model_in": model_path})
    images = _load_images(corpus_dir, cfg)
    bundle = train_jat_baseline(load_checkpoint(model_path), images,
                                cfg=pipeline.jat_config(cfg, cfg["eval"]["seed"]))
    save_checkpoint(bundle, out)
    click.echo(f"JAT baseline -> {out}")


@main.command("train-denoiser")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--train-seed", type=int, default=0,
              help="Denoiser seed (use two seeds for the proxy pair).")
def train_denoiser_cmd(config_path, seed, overrides, corpus_dir, out, train_seed):
    """Train one regeneration-proxy denoiser."""
    cfg = _load_cfg(config_path, seed, overrides)
    images = _load_images(corpus_dir, cfg)
    d = train_denoiser(images, pipeline.denoiser_config(cfg, train_seed))
    save_denoiser(d, out)
    click.echo(f"denoiser holdout PSNR {d.history['holdout_psnr']:.2f} dB -> {out}")


@main.command("optimize-stage2")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True),
              default=None)
@click.option("--out-dir", type=click.Path(), required=True)
def optimize_stage2(config_path, seed, overrides, corpus_dir, model_path,
                    denoiser_path, out_dir):
    """Per-image quality-constrained optimization; writes optimized images
    plus a per-image iterate log."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = _prepare_run(cfg, "stage2")
    _provenance(run_dir, cfg, {"model": model_path})
    images = _load_images(corpus_dir, cfg)
    bundle = load_checkpoint(model_path)
    denoiser = load_denoiser(denoiser_path) if denoiser_path else None
    s2cfg = pipeline.stage2_config(cfg, cfg["eval"]["seed"],
                                   with_regeneration=denoiser is not None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_rows = []
    optimized = []
    for i, x_o in enumerate(images):
        m = torch.randint(
            0, 2, (bundle.meta.n,),
            generator=torch.Generator().manual_seed(
                derive_seed(cfg["eval"]["seed"], f"msg_{i}") % (2**63))).float()
        iterate_log: list = []
        x_w2 = optimize_image(bundle, x_o, m, cfg=s2cfg, denoiser=denoiser,
                              iterate_log=iterate_log)
        optimized.append(x_w2)
        for row in iterate_log:
            log_rows.append([i, row["iteration"], row["attack"],
                             f"{row['ba']:.4f}", f"{row['psnr']:.4f}",
                             row["accepted"]])
    corpus_mod.save_corpus(torch.stack(optimized), out_dir)
    with open(run_dir / "stage2_iterates.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "iteration", "attack", "ba", "psnr", "accepted"])
        writer.writerows(log_rows)
    click.echo(f"optimized {len(optimized)} images -> {out_dir} "
               f"(iterate log in {run_dir})")


@main.command("attack")
@with_common
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--attack", "attack_str", required=True,
              help="e.g. jpeg:Q=50 or wevade:r=0.078,steps=50")
@click.option("--out", type=click.Path(), required=True)
def attack_cmd(config_path, seed, overrides, model_path, image_path,
               attack_str, out):
    """Apply a single attack to one watermarked image and report BA."""
    from .distortions import (DIFFERENTIABLE_KINDS, GEOMETRIC_KINDS,
                              apply_distortion, apply_geometric)

    cfg = _load_cfg(config_path, seed, overrides)
    bundle = load_checkpoint(model_path)
    images = corpus_mod.load_corpus(Path(image_path).parent,
                                    cfg["corpus"]["height"], cfg["corpus"]["width"])
    x = images[0]
    spec = parse_attack_spec(attack_str)
    s = cfg["eval"]["seed"]
    if spec.kind == "wevade":
        from .adversarial import wevade_attack
        budget = AdvBudget(r=spec.params.get("r", cfg["attacks"]["wevade_r"]),
                           steps=int(spec.params.get("steps",
                                                     cfg["attacks"]["wevade_steps"])))
        x_att = wevade_attack(bundle, x, budget, seed=s)
    elif spec.kind in GEOMETRIC_KINDS:
        x_att = apply_geometric(x, spec, seed=s, cover=x)
    elif spec.kind in DIFFERENTIABLE_KINDS:
        x_att = apply_distortion(x, spec, seed=s)
    else:
        raise click.BadParameter(f"unknown attack kind {spec.kind!r}")
    corpus_mod.save_corpus(x_att.unsqueeze(0), Path(out).parent)
    with torch.no_grad():
        y_before = round_message(decode(bundle, x))
        y_after = round_message(decode(bundle, x_att))
    click.echo(f"bit agreement with pre-attack decode: "
               f"{bit_accuracy(y_before, y_after):.4f}, "
               f"PSNR {psnr(x_att, x):.2f} dB")


@main.command("evaluate")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--attacks", "attack_list", default="clean,jpeg,gaussian_noise",
              help="Comma-separated attack ids.")
@click.option("--model-tag", default="model")
@click.option("--stage2/--no-stage2", default=False)
@click.option("--denoiser-a", type=click.Path(exists=True), default=None)
@click.option("--denoiser-b", type=click.Path(exists=True), default=None)
@click.option("--run-dir", "run_dir_opt", type=click.Path(), default=None)
def evaluate_cmd(config_path, seed, overrides, corpus_dir, model_path,
                 attack_list, model_tag, stage2, denoiser_a, denoiser_b,
                 run_dir_opt):
    """Run the evaluation protocol and append a record CSV to the run dir."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = Path(run_dir_opt) if run_dir_opt else _prepare_run(cfg, "eval")
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run_dir)
    _provenance(run_dir, cfg, {"model": model_path})
    images = _load_images(corpus_dir, cfg)
    bundle = load_checkpoint(model_path)
    da = load_denoiser(denoiser_a) if denoiser_a else None
    db = load_denoiser(denoiser_b) if denoiser_b else None
    s2cfg = (pipeline.stage2_config(cfg, cfg["eval"]["seed"],
                                    with_regeneration=da is not None)
             if stage2 else None)
    records = run_evaluation(
        bundle, images, [a.strip() for a in attack_list.split(",")],
        cfg["attacks"], run_id=run_dir.name, model_tag=model_tag,
        seed=cfg["eval"]["seed"], stage2_cfg=s2cfg, denoiser_a=da,
        denoiser_b=db, max_images=cfg["eval"]["max_images"])
    path = write_records(records, run_dir / f"records_{model_tag}.csv")
    click.echo(f"{len(records)} records -> {path}")


@main.command("verify-theorem")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True),
              default=None)
@click.option("--samples", type=int, default=32)
def verify_theorem_cmd(config_path, seed, overrides, corpus_dir, model_path,
                       denoiser_path, samples):
    """Stage-2 optimize each image and verify the robustness-preservation
    bound; prints the per-corpus holds rate."""
    cfg = _load_cfg(config_path, seed, overrides)
    run_dir = _prepare_run(cfg, "theorem")
    images = _load_images(corpus_dir, cfg)
    bundle = load_checkpoint(model_path)
    denoiser = load_denoiser(denoiser_path) if denoiser_path else None
    s2cfg = pipeline.stage2_config(cfg, cfg["eval"]["seed"],
                                   with_regeneration=denoiser is not None)
    rows, holds = [], 0
    n_eval = 0
    for i, x_o in enumerate(images):
        m = torch.randint(
            0, 2, (bundle.meta.n,),
            generator=torch.Generator().manual_seed(
                derive_seed(cfg["eval"]["seed"], f"msg_{i}") % (2**63))).float()
        with torch.no_grad():
            x_w1 = encode(bundle, x_o, m)
        x_w2 = optimize_image(bundle, x_o, m, x_w1, s2cfg, denoiser=denoiser)
        rep = verify_theorem(bundle, x_o, m, x_w1, x_w2, samples=samples,
                             seed=cfg["eval"]["seed"])
        rows.append([i, f"{rep.alpha:.6f}", f"{rep.delta:.6f}",
                     f"{rep.eta2_bound:.6f}", rep.samples, rep.holds])
        if rep.holds is not None:
            n_eval += 1
            holds += int(rep.holds)
    with open(run_dir / "theorem.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "alpha", "delta", "eta2_bound", "samples",
                         "holds"])
        writer.writerows(rows)
    rate = holds / max(1, n_eval)
    click.echo(f"holds on {holds}/{n_eval} images ({rate:.1%}) -> "
               f"{run_dir / 'theorem.csv'}")


@main.command("report")
@click.option("--run-dir", type=click.Path(exists=True), required=True)
def report_cmd(run_dir):
    """Render tables and plots from a run directory's record CSVs."""
    outputs = report_mod.report(run_dir)
    for p in outputs:
        click.echo(str(p))


if __name__ == "__main__":
    main()
