"""Command line front end. Every command wraps one library call; images move
between commands as PNG directories so each step can be inspected on disk.

The `run` command drives a whole experiment from a config file and writes
report.json, rows.csv, timing.json, and plots/ into the output directory.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .attacker import (
    AttackConfig,
    Critic,
    apply_attack,
    load_critic,
    load_generator,
    replace_watermark,
    save_critic,
    save_generator,
    select_checkpoint,
    train_attack,
)
from .baselines import run_baseline_suite, train_autoencoder
from .codec import CodecTrainConfig, load_codec, save_codec, train_codec
from .datasets import load_image_dir, load_labels, save_image_dir, save_tensor_dir, synth_corpus
from .features import load_extractor, save_extractor, train_feature_extractor
from .messages import BitMessage, VerificationPolicy, verify as verify_message
from .pipeline import ExperimentConfig, run_experiment, timing_report
from .purifier import (
    DenoiserTrainConfig,
    PurifyConfig,
    load_denoiser,
    purify,
    sample_mediators,
    save_denoiser,
    train_denoiser,
)
from .utils import read_json, write_json


@click.group()
def main():
    """Watermark embedding, removal/forging attacks, and their evaluation."""


@main.command("make-data")
@click.option("--n", type=int, required=True, help="number of images")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size", type=int, default=32, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def make_data(n, seed, size, out):
    """Generate a synthetic image directory."""
    images, labels = synth_corpus(n, seed=seed, size=size)
    names = save_image_dir(out, images, labels)
    click.echo(f"wrote {len(names)} images to {out}")


@main.command("train-codec")
@click.option("--data", type=click.Path(exists=True), required=True, help="training image dir")
@click.option("--bits", type=int, default=8, show_default=True)
@click.option("--epochs", type=int, default=60, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def train_codec_cmd(data, bits, epochs, seed, out):
    """Train the encoder/decoder pair on an image directory."""
    images, _ = load_image_dir(data)
    cfg = CodecTrainConfig(bits=bits, image_size=images.shape[-1], epochs=epochs, seed=seed)
    codec = train_codec(images, cfg)
    save_codec(codec, out)
    click.echo(f"saved codec to {out}")


@main.command()
@click.option("--codec", "codec_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--message", required=True, help="bit string, e.g. 10001000")
@click.option("--out", type=click.Path(), required=True)
def embed(codec_path, data, message, out):
    """Watermark every image in a directory."""
    codec = load_codec(codec_path)
    images, names = load_image_dir(data)
    marked = codec.embed_batch(images, BitMessage.parse(message))
    save_tensor_dir(out, marked, names)
    click.echo(f"wrote {len(names)} watermarked images to {out}")


@main.command()
@click.option("--codec", "codec_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--message", required=True)
@click.option("--tau", type=float, default=0.8, show_default=True)
@click.option("--per-image", is_flag=True, help="emit one JSON line per image")
def verify(codec_path, data, message, tau, per_image):
    """Decode a directory and verify against a message; prints JSON."""
    codec = load_codec(codec_path)
    images, names = load_image_dir(data)
    target = BitMessage.parse(message)
    policy = VerificationPolicy(tau)
    rows = []
    for name, img in zip(names, images):
        res = verify_message(target, codec.decode(img), policy)
        rows.append({"file": name, **res.to_dict()})
        if per_image:
            click.echo(json.dumps(rows[-1]))
    summary = {
        "n": len(rows),
        "bit_acc": float(np.mean([r["bit_acc"] for r in rows])),
        "hd_mean": float(np.mean([r["hd"] for r in rows])),
        "verify_rate": float(np.mean([r["pass"] for r in rows])),
        "tau": tau,
    }
    click.echo(json.dumps(summary))


@main.command("train-denoiser")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--base", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def train_denoiser_cmd(data, epochs, base, seed, out):
    """Train the diffusion denoiser on an image directory."""
    images, _ = load_image_dir(data)
    model = train_denoiser(
        images, DenoiserTrainConfig(epochs=epochs, base_channels=base, seed=seed)
    )
    save_denoiser(model, out)
    click.echo(f"saved denoiser to {out}")


@main.command("purify")
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--noise-scale", type=int, default=150, show_default=True)
@click.option("--steps", type=int, default=30, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def purify_cmd(denoiser_path, data, noise_scale, steps, seed, out):
    """Noise-then-denoise a directory into mediator images."""
    model = load_denoiser(denoiser_path)
    images, names = load_image_dir(data)
    result = purify(
        model, images, PurifyConfig(noise_scale=noise_scale, sample_steps=steps), seed=seed
    )
    save_tensor_dir(out, result.images, names)
    click.echo(f"wrote {len(names)} purified images to {out}")


@main.command("sample-mediators")
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True), required=True)
@click.option("--n", type=int, required=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def sample_mediators_cmd(denoiser_path, n, steps, seed, out):
    """Sample unconditional mediator images from the denoiser."""
    model = load_denoiser(denoiser_path)
    result = sample_mediators(model, n, seed=seed, steps=steps)
    save_tensor_dir(out, result.images)
    click.echo(f"wrote {n} sampled mediators to {out}")


@main.command("train-extractor")
@click.option("--data", type=click.Path(exists=True), required=True, help="labeled image dir")
@click.option("--epochs", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def train_extractor_cmd(data, epochs, seed, out):
    """Train the feature extractor used by the quality metrics."""
    images, names = load_image_dir(data)
    labels = load_labels(data, names)
    if labels is None:
        raise click.ClickException(f"{data} has no label manifest")
    model = train_feature_extractor(images, labels, epochs=epochs, seed=seed)
    save_extractor(model, out)
    click.echo(f"saved extractor to {out}")


@main.command("train-attack")
@click.option("--watermarked", type=click.Path(exists=True), required=True)
@click.option("--mediators", type=click.Path(exists=True), required=True)
@click.option("--direction", type=click.Choice(["remove", "forge"]), required=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--w-g", type=float, default=800.0, show_default=True)
@click.option("--w-x", type=float, default=15.0, show_default=True)
@click.option("--log", "log_path", type=click.Path(), default=None, help="JSON-lines metrics log")
@click.option("--out", type=click.Path(), required=True)
@click.option("--critic-out", type=click.Path(), default=None, help="save the critic too (for later fine-tuning)")
def train_attack_cmd(watermarked, mediators, direction, epochs, seed, w_g, w_x, log_path, out, critic_out):
    """Train a removal or forging generator from two image directories."""
    wm, _ = load_image_dir(watermarked)
    meds, _ = load_image_dir(mediators)
    cfg = AttackConfig(direction=direction, epochs=epochs, seed=seed, w_G=w_g, w_x=w_x)
    critic = Critic(base=cfg.critic_base)
    generator, records = train_attack(wm, meds, cfg, log_path=log_path, critic=critic)
    save_generator(generator, out, config=cfg, record=select_checkpoint(records))
    if critic_out:
        save_critic(critic, critic_out)
    click.echo(f"saved {direction} generator to {out}")


@main.command()
@click.option("--generator", "generator_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def attack(generator_path, data, out):
    """Apply a trained generator to a directory."""
    generator = load_generator(generator_path)
    images, names = load_image_dir(data)
    save_tensor_dir(out, apply_attack(generator, images), names)
    click.echo(f"wrote {len(names)} attacked images to {out}")


@main.command()
@click.option("--generator", "generator_path", type=click.Path(exists=True), required=True)
@click.option("--critic", "critic_path", type=click.Path(exists=True), required=True)
@click.option("--watermarked", type=click.Path(exists=True), required=True, help="few-shot samples of the new message")
@click.option("--mediators", type=click.Path(exists=True), required=True)
@click.option("--epochs", type=int, default=15, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def finetune(generator_path, critic_path, watermarked, mediators, epochs, seed, out):
    """Adapt a trained generator to a new message from a few samples."""
    from .attacker import finetune_fewshot

    generator = load_generator(generator_path)
    critic = load_critic(critic_path)
    wm, _ = load_image_dir(watermarked)
    meds, _ = load_image_dir(mediators)
    cfg = AttackConfig(direction=generator.direction, epochs=epochs, seed=seed)
    generator, records = finetune_fewshot(generator, critic, wm, meds, cfg)
    save_generator(generator, out, config=cfg, record=select_checkpoint(records))
    click.echo(f"saved fine-tuned generator to {out}")


@main.command()
@click.option("--remove", "remove_path", type=click.Path(exists=True), required=True)
@click.option("--forge", "forge_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def replace(remove_path, forge_path, data, out):
    """Strip the old watermark and forge the new one in one pass."""
    gen_r = load_generator(remove_path)
    gen_f = load_generator(forge_path)
    images, names = load_image_dir(data)
    save_tensor_dir(out, replace_watermark(gen_r, gen_f, images), names)
    click.echo(f"wrote {len(names)} re-watermarked images to {out}")


@main.command()
@click.option("--codec", "codec_path", type=click.Path(exists=True), required=True)
@click.option("--watermarked", type=click.Path(exists=True), required=True)
@click.option("--clean", type=click.Path(exists=True), required=True)
@click.option("--message", required=True)
@click.option("--extractor", "extractor_path", type=click.Path(exists=True), required=True)
@click.option("--denoiser", "denoiser_path", type=click.Path(exists=True), default=None)
@click.option("--suite", type=click.Choice(["transforms", "regen", "full"]), default="transforms", show_default=True)
@click.option("--draws", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def baseline(codec_path, watermarked, clean, message, extractor_path, denoiser_path, suite, draws, seed, out):
    """Run the transform/regeneration baseline suite; writes JSON."""
    codec = load_codec(codec_path)
    wm, _ = load_image_dir(watermarked)
    ref, _ = load_image_dir(clean)
    extractor = load_extractor(extractor_path)
    denoiser = load_denoiser(denoiser_path) if denoiser_path else None
    autoencoder = None
    if suite in ("regen", "full"):
        autoencoder = train_autoencoder(ref, seed=seed)
    result = run_baseline_suite(
        codec,
        wm,
        ref,
        BitMessage.parse(message),
        extractor,
        denoiser=denoiser,
        autoencoder=autoencoder,
        suite=suite,
        seed=seed,
        draws=draws,
    )
    write_json(out, result)
    click.echo(f"wrote baseline suite ({len(result['rows'])} rows) to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
def run(config_path):
    """Run a full experiment from a config file."""
    try:
        config = ExperimentConfig.from_file(config_path)
        report = run_experiment(config)
    except Exception as err:
        click.echo(f"experiment failed: {err}", err=True)
        sys.exit(1)
    click.echo(json.dumps({"out_dir": config.out_dir, "status": report.status}))


@main.command("show-timing")
@click.option("--run-dir", type=click.Path(exists=True), required=True)
def show_timing(run_dir):
    """Print the timing table of a finished run."""
    from .pipeline import RunReport, StageTiming

    report = RunReport.from_dict(read_json(Path(run_dir) / "report.json"))
    timing = read_json(Path(run_dir) / "timing.json")
    report.stage_timings = [StageTiming(**t) for t in timing["stage_timings"]]
    report.throughput = timing.get("throughput", {})
    for row in timing_report(report):
        click.echo(json.dumps(row))


if __name__ == "__main__":
    main()
