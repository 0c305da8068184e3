"""End-to-end experiment orchestration: provider simulation, cached stages,
attack training and evaluation, baseline suites, timing, reports, and plots.

An experiment is one flat key=value config file. Stages run in a fixed order
(data -> codec -> provider sim -> denoiser -> mediators -> extractor ->
attack -> evaluate -> baselines -> report); every training stage is cached on
disk keyed by a content hash of its config slice plus upstream stage keys, so
sweeps that share a codec or purifier reuse them and a rerun with an
unchanged config retrains nothing.

Threat model: the attack-training stage receives only the collected
watermarked images and mediator images. That is enforced structurally (the
trainer takes raw tensors, never a codec) and re-checked at runtime by hash
membership against the adversary's view. Decoding happens only in
evaluation code, which plays the role of the experimenter, not the attacker.

Deterministic metric numbers go to report.json (and rows.csv); wall-clock
numbers go to timing.json so reruns of the same config can be compared
field by field.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .attacker import (
    AttackConfig,
    AttackGenerator,
    Critic,
    apply_attack,
    finetune_fewshot,
    replace_watermark,
    select_checkpoint,
    train_attack,
)
from .baselines import run_baseline_suite, train_autoencoder
from .codec import Codec, CodecTrainConfig, load_codec, save_codec, train_codec
from .datasets import synth_corpus
from .features import load_extractor, save_extractor, train_feature_extractor
from .messages import BitMessage, VerificationPolicy, bit_accuracy, verify
from .metrics import decode_stats, embedding_similarity, frechet_distance, psnr, ssim
from .purifier import (
    DenoiserTrainConfig,
    PurifyConfig,
    load_denoiser,
    purify,
    sample_mediators,
    save_denoiser,
    train_denoiser,
)
from .utils import (
    TrainingFailure,
    config_hash,
    derive_seed,
    read_jsonl,
    resolve_device,
    seed_everything,
    sha256_array,
    sha256_file,
    write_json,
)

EXPERIMENT_KINDS = ("remove", "forge", "replace", "fewshot", "group")
BASELINE_SUITES = ("", "transforms", "regen", "full")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one experiment, loadable from a flat key=value file."""

    name: str = "run"
    kind: str = "remove"
    out_dir: str = "runs/run"
    cache_dir: str = ""  # empty -> <out_dir>/artifacts
    seed: int = 0
    # data splits (provider trains the codec; public trains adversary tools;
    # collection is watermarked and handed over; eval stays held out)
    image_size: int = 32
    n_provider: int = 25000
    n_public: int = 10000
    n_collection: int = 5000
    n_eval: int = 1000
    data_seed: int = 100
    # watermark
    bits: int = 8
    message: str = ""  # empty -> derived from seed
    message_new: str = ""  # replace/fewshot/group second message
    group_hd: int = 12
    tau: float = 0.8
    # codec training
    codec_epochs: int = 60
    codec_batch_size: int = 64
    codec_lr: float = 1e-3
    codec_base: int = 32
    # denoiser training
    denoiser_epochs: int = 40
    denoiser_batch_size: int = 64
    denoiser_lr: float = 2e-4
    denoiser_base: int = 48
    # mediators
    plus_mode: bool = False
    noise_scale: int = 150
    sample_steps: int = 30
    mediator_steps: int = 50
    # attack
    attack_epochs: int = 40
    attack_batch_size: int = 32
    attack_lr: float = 1e-4
    w_d: float = 10.0
    w_g: float = 800.0
    w_x: float = 15.0
    critic_steps: int = 5
    gen_channels: int = 16
    gen_blocks: int = 4
    critic_base: int = 16
    fewshot_n: int = 100
    fewshot_epochs: int = 15
    # evaluation extras
    baselines: str = ""
    baseline_draws: int = 5
    baseline_images: int = 200
    extractor_epochs: int = 5
    timing_images: int = 256  # 0 disables the throughput measurement
    curve_probe: int = 128

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if self.baselines not in BASELINE_SUITES:
            raise ValueError(f"baselines must be one of {BASELINE_SUITES}, got {self.baselines!r}")
        if not 4 <= self.bits <= 64:
            raise ValueError(f"bits must be in [4, 64], got {self.bits}")
        if not 0.5 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0.5, 1.0], got {self.tau}")
        for key in ("n_provider", "n_public", "n_collection", "n_eval", "fewshot_n"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.kind == "group" and not 0 < self.group_hd <= self.bits:
            raise ValueError(f"group_hd must be in (0, bits], got {self.group_hd}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_file(cls, path: Path | str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        if not parser.read(Path(path)):
            raise ValueError(f"cannot read config file {path}")
        if not parser.has_section("experiment"):
            raise ValueError("config file needs an [experiment] section")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in parser.items("experiment"):
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            typ = fields[key].type
            if typ == "int":
                kwargs[key] = int(raw)
            elif typ == "float":
                kwargs[key] = float(raw)
            elif typ == "bool":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                kwargs[key] = raw
        return cls(**kwargs)


def resolve_messages(config: ExperimentConfig) -> tuple[BitMessage, BitMessage | None]:
    """Primary message plus the second one used by replace/fewshot/group."""
    rng = np.random.default_rng(derive_seed(config.seed, "message"))
    primary = (
        BitMessage.parse(config.message) if config.message else BitMessage.random(config.bits, rng)
    )
    if len(primary) != config.bits:
        raise ValueError(f"message length {len(primary)} != bits {config.bits}")
    if config.kind in ("remove", "forge"):
        return primary, None
    if config.message_new:
        secondary = BitMessage.parse(config.message_new)
        if len(secondary) != config.bits:
            raise ValueError(f"message_new length {len(secondary)} != bits {config.bits}")
    elif config.kind == "group":
        # a groupmate at the configured Hamming distance
        flip = rng.choice(config.bits, size=config.group_hd, replace=False)
        bits = list(primary.bits)
        for i in flip:
            bits[i] = 1 - bits[i]
        secondary = BitMessage(tuple(bits))
    else:
        secondary = BitMessage.random(config.bits, rng)
        while secondary.bits == primary.bits:
            secondary = BitMessage.random(config.bits, rng)
    if secondary.bits == primary.bits:
        raise ValueError("second message must differ from the primary one")
    return primary, secondary


# ----------------------------------------------------------------- provider


def simulate_provider(
    clean_images: torch.Tensor,
    codec: Codec,
    user_messages: dict,
    seed: int = 0,
    batch_size: int = 256,
) -> tuple[dict, dict]:
    """Watermark the provider's outputs, one collection per user.

    `user_messages` maps user id -> BitMessage or sequence of them (a group);
    each image draws its message uniformly from the user's group. Images are
    shared contiguously and evenly between users. Collections come back
    quantized to the 8-bit grid, as delivered images would be. The manifest
    (messages, assignments) stays on the provider side; adversary-facing code
    must only ever see the image tensors.
    """
    users = list(user_messages)
    manifest: dict = {"seed": seed, "users": {}}
    collections: dict[str, torch.Tensor] = {}
    if not users:
        return collections, manifest
    share, spare = divmod(len(clean_images), len(users))
    start = 0
    for pos, uid in enumerate(users):
        msgs = user_messages[uid]
        msgs = (msgs,) if isinstance(msgs, BitMessage) else tuple(msgs)
        if not msgs:
            raise ValueError(f"user {uid!r} has no messages")
        count = share + (1 if pos < spare else 0)
        images = clean_images[start : start + count]
        start += count
        rng = np.random.default_rng(derive_seed(seed, "assign", uid))
        assignment = rng.integers(len(msgs), size=len(images))
        out = torch.empty_like(images)
        for mi, message in enumerate(msgs):
            idx = np.nonzero(assignment == mi)[0]
            for lo in range(0, len(idx), batch_size):
                sel = torch.from_numpy(idx[lo : lo + batch_size]).long()
                out[sel] = codec.embed_batch(images[sel], message)
        collections[uid] = torch.round(out.clamp(0, 1) * 255) / 255
        manifest["users"][uid] = {
            "messages": [str(m) for m in msgs],
            "count": int(len(images)),
            "assignment": assignment.tolist(),
        }
    return collections, manifest


# ------------------------------------------------------------ tensor helpers


def _to_u8(images: torch.Tensor) -> torch.Tensor:
    return torch.round(images.clamp(0, 1) * 255).to(torch.uint8)


def _to_f32(images: torch.Tensor) -> torch.Tensor:
    return images.float() / 255.0 if images.dtype == torch.uint8 else images.float()


def tensor_hashes(images: torch.Tensor) -> frozenset:
    """Per-image content hashes on the 8-bit grid (split bookkeeping)."""
    u8 = _to_u8(_to_f32(images)).numpy()
    return frozenset(sha256_array(u8[i]) for i in range(len(u8)))


def _assert_splits_disjoint(splits: dict[str, torch.Tensor]) -> None:
    names = list(splits)
    hashes = {n: tensor_hashes(splits[n]) for n in names}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = hashes[a] & hashes[b]
            if overlap:
                raise ValueError(f"splits {a!r} and {b!r} share {len(overlap)} images")


def assert_adversary_inputs(tensors: dict, allowed: frozenset) -> None:
    """Runtime guard: attack training sees only collected or mediator images."""
    for name, t in tensors.items():
        outside = tensor_hashes(t) - allowed
        if outside:
            raise RuntimeError(
                f"threat-model violation: {name!r} holds {len(outside)} images "
                "outside the adversary's view"
            )


# -------------------------------------------------------------- stage runner


@dataclass
class StageTiming:
    stage: str
    seconds: float
    cached: bool
    artifact: str = ""

    def to_dict(self) -> dict:
        return dict(vars(self))


class _Stages:
    """Content-addressed artifact cache; records one timing row per stage."""

    def __init__(self, cache_dir: Path, timings: list):
        self.cache_dir = cache_dir
        self.timings = timings
        self.current = ""
        self.keys: dict[str, str] = {}

    def run(self, stage: str, key_obj: dict, build, save, load, suffix: str = ".pt"):
        self.current = stage
        key = config_hash(key_obj)
        self.keys[stage] = key
        path = self.cache_dir / f"{stage}-{key}{suffix}"
        start = time.perf_counter()
        if path.exists():
            artifact = load(path)
            cached = True
        else:
            artifact = build()
            save(artifact, path)
            write_json(path.with_suffix(path.suffix + ".keys.json"), {"stage": stage, "key": key_obj})
            cached = False
        self.timings.append(
            StageTiming(stage, time.perf_counter() - start, cached, str(path))
        )
        return artifact, path


def _save_bundle(obj: dict, path: Path) -> None:
    torch.save(obj, path)


def _load_bundle(path: Path) -> dict:
    return torch.load(path, weights_only=True)


def _load_autoencoder(path: Path):
    from .baselines import ConvAutoencoder

    model = ConvAutoencoder()
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    model.trained = True
    return model


# -------------------------------------------------------------------- report


@dataclass
class RunReport:
    """Everything one experiment produced, split into deterministic numbers
    (report.json, rows.csv) and wall-clock numbers (timing.json)."""

    name: str
    kind: str
    seed: int
    config: dict
    config_hash: str
    status: str = "ok"
    results: dict = field(default_factory=dict)
    checkpoint: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    stage_timings: list = field(default_factory=list)
    throughput: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "status": self.status,
            "results": self.results,
            "checkpoint": self.checkpoint,
            "artifacts": self.artifacts,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        timings = [StageTiming(**t) for t in d.get("stage_timings", [])]
        return cls(
            name=d["name"],
            kind=d["kind"],
            seed=d["seed"],
            config=d["config"],
            config_hash=d["config_hash"],
            status=d.get("status", "ok"),
            results=d.get("results", {}),
            checkpoint=d.get("checkpoint", {}),
            artifacts=d.get("artifacts", {}),
            stage_timings=timings,
            throughput=d.get("throughput", {}),
            notes=d.get("notes", []),
        )

    def save(self, out_dir: Path | str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "report.json", self.to_dict())
        write_json(
            out_dir / "timing.json",
            {
                "device": str(resolve_device()),
                "stage_timings": [t.to_dict() for t in self.stage_timings],
                "throughput": self.throughput,
                "total_seconds": float(sum(t.seconds for t in self.stage_timings)),
            },
        )
        _write_rows_csv(self, out_dir / "rows.csv")


def timing_report(report: RunReport) -> list[dict]:
    """Flat table: one row per stage, then the inference throughput rows."""
    rows = [t.to_dict() for t in report.stage_timings]
    for key, value in report.throughput.items():
        rows.append({"stage": f"throughput/{key}", "seconds": value, "cached": False})
    return rows


# ----------------------------------------------------------------- evaluation


def _decode_eval(codec: Codec, images: torch.Tensor, message: BitMessage, tau: float) -> dict:
    policy = VerificationPolicy(tau)
    accs, passes = [], 0
    for start in range(0, len(images), 256):
        for decoded in codec.decode_batch(images[start : start + 256]):
            accs.append(bit_accuracy(message, decoded))
            passes += int(verify(message, decoded, policy).passed)
    return {
        "bit_acc": float(np.mean(accs)),
        "verify_rate": passes / len(accs),
        "n": len(accs),
    }


def _pair_metrics(reference: torch.Tensor, candidate: torch.Tensor, extractor) -> dict:
    return {
        "psnr_vs_input": float(np.mean([psnr(a, b) for a, b in zip(reference, candidate)])),
        "ssim_vs_input": float(np.mean([ssim(a, b) for a, b in zip(reference, candidate)])),
        "emb_sim_vs_input": embedding_similarity(reference, candidate, extractor),
    }


def _attack_eval(
    generator: AttackGenerator,
    inputs: torch.Tensor,
    codec: Codec,
    message: BitMessage,
    tau: float,
    extractor,
    fid_reference: torch.Tensor | None = None,
) -> tuple[dict, torch.Tensor]:
    attacked = apply_attack(generator, inputs)
    row = _decode_eval(codec, attacked, message, tau)
    row.update(_pair_metrics(inputs, attacked, extractor))
    if fid_reference is not None:
        row["fid_vs_clean"] = frechet_distance(fid_reference, attacked, extractor)
    return row, attacked


def _epoch_curve(
    records,
    direction: str,
    channels: int,
    blocks: int,
    probe_inputs: torch.Tensor,
    codec: Codec,
    message: BitMessage,
) -> list[dict]:
    """Per-epoch decoded accuracy on a small probe, for the training curves."""
    rows = []
    probe = AttackGenerator(direction, channels=channels, blocks=blocks)
    for record in records:
        probe.load_state_dict(record.state)
        probe.eval()
        attacked = apply_attack(probe, probe_inputs)
        acc, _ = decode_stats(codec, attacked, message)
        row = record.to_log()
        row.update(direction=direction, bit_acc=acc)
        rows.append(row)
    return rows


# ------------------------------------------------------------ run_experiment


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Execute every stage for one config; see the module docstring for the
    stage order. Failures still write a partial report, then re-raise."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(config.cache_dir) if config.cache_dir else out_dir / "artifacts"
    cache_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)

    report = RunReport(
        name=config.name,
        kind=config.kind,
        seed=config.seed,
        config=config.to_dict(),
        config_hash=config.hash,
    )
    stages = _Stages(cache_dir, report.stage_timings)
    try:
        _execute(config, out_dir, stages, report)
    except Exception as err:
        report.status = "failed"
        note = f"stage {stages.current!r} failed: {err}"
        if isinstance(err, TrainingFailure) and err.payload:
            note += f" (payload keys: {sorted(err.payload)})"
        report.notes.append(note)
        report.save(out_dir)
        raise
    report.save(out_dir)
    return report


def _execute(config: ExperimentConfig, out_dir: Path, stages: _Stages, report: RunReport) -> None:
    primary, secondary = resolve_messages(config)
    report.results["messages"] = {
        "primary": str(primary),
        "secondary": str(secondary) if secondary else None,
    }

    # ---- data: one deterministic corpus cut into disjoint splits
    n_users = 2 if config.kind == "replace" else 1
    n_collection = config.n_collection * n_users
    n_fewshot = config.fewshot_n if config.kind == "fewshot" else 0
    data_key = {
        "image_size": config.image_size,
        "n_provider": config.n_provider,
        "n_public": config.n_public,
        "n_collection": n_collection,
        "n_eval": config.n_eval,
        "n_fewshot": n_fewshot,
        "data_seed": config.data_seed,
    }

    def build_data():
        total = config.n_provider + config.n_public + n_collection + config.n_eval + n_fewshot
        images, labels = synth_corpus(total, seed=config.data_seed, size=config.image_size)
        u8 = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
        splits, start = {}, 0
        for name, count in [
            ("provider", config.n_provider),
            ("public", config.n_public),
            ("collection_src", n_collection),
            ("eval_src", config.n_eval),
            ("fewshot_src", n_fewshot),
        ]:
            splits[name] = u8[start : start + count]
            start += count
        _assert_splits_disjoint({k: v for k, v in splits.items() if len(v)})
        splits["public_labels"] = torch.from_numpy(
            labels[config.n_provider : config.n_provider + config.n_public].copy()
        )
        return splits

    data, _ = stages.run("data", data_key, build_data, _save_bundle, _load_bundle)

    # splits are carved from the corpus front, so models trained on the
    # provider or public split can key on just that prefix and stay shared
    # across experiment kinds whose collection/fewshot tails differ
    provider_key = {
        "image_size": config.image_size,
        "data_seed": config.data_seed,
        "n_provider": config.n_provider,
    }
    public_key = {**provider_key, "n_public": config.n_public}

    # ---- codec (provider side; seeded off data_seed so sweeps share it)
    codec_cfg = CodecTrainConfig(
        bits=config.bits,
        image_size=config.image_size,
        epochs=config.codec_epochs,
        batch_size=config.codec_batch_size,
        lr=config.codec_lr,
        base_channels=config.codec_base,
        holdout=min(1000, max(100, config.n_provider // 6)),
        seed=derive_seed(config.data_seed, "codec"),
    )
    codec, _ = stages.run(
        "codec",
        {"cfg": codec_cfg.to_dict(), "corpus": provider_key},
        lambda: train_codec(_to_f32(data["provider"]), codec_cfg),
        save_codec,
        load_codec,
    )
    report.results["codec"] = {
        "holdout": codec_cfg.holdout,
        **{k: v for k, v in codec.manifest["curve"][-1].items() if k != "weight_scale"},
    }

    # ---- provider simulation: collections, held-out eval marks, few-shot set
    if config.kind == "group":
        collection_users = {"user0": (primary, secondary)}
        eval_users = {"eval_a": primary, "eval_b": secondary}
    elif config.kind == "replace":
        collection_users = {"user_a": primary, "user_b": secondary}
        eval_users = {"eval": primary}
    elif config.kind == "fewshot":
        collection_users = {"user0": primary}
        eval_users = {"eval": secondary}
    else:
        collection_users = {"user0": primary}
        eval_users = {"eval": primary}

    sim_key = {
        "codec": stages.keys["codec"],
        "data": stages.keys["data"],
        "collection": {u: [str(m) for m in (v if isinstance(v, tuple) else (v,))] for u, v in collection_users.items()},
        "eval": {u: str(m) for u, m in eval_users.items()},
        "seed": derive_seed(config.seed, "provider"),
    }

    def build_sim():
        collections, manifest = simulate_provider(
            _to_f32(data["collection_src"]), codec, collection_users, seed=sim_key["seed"]
        )
        eval_marks, eval_manifest = simulate_provider(
            _to_f32(data["eval_src"]), codec, eval_users, seed=derive_seed(sim_key["seed"], "eval")
        )
        bundle = {
            "collections": {u: _to_u8(t) for u, t in collections.items()},
            "eval": {u: _to_u8(t) for u, t in eval_marks.items()},
            "manifest": {"collection": manifest, "eval": eval_manifest},
        }
        if config.kind == "fewshot":
            few, few_manifest = simulate_provider(
                _to_f32(data["fewshot_src"]),
                codec,
                {"user_new": secondary},
                seed=derive_seed(sim_key["seed"], "fewshot"),
            )
            bundle["fewshot"] = _to_u8(few["user_new"])
            bundle["manifest"]["fewshot"] = few_manifest
        return bundle

    sim, _ = stages.run("provider_sim", sim_key, build_sim, _save_bundle, _load_bundle)
    collection_all = torch.cat([sim["collections"][u] for u in sorted(sim["collections"])])

    # collection sanity rows (provider-side decode check)
    coll_rows = {}
    for uid in sorted(sim["collections"]):
        probe = _to_f32(sim["collections"][uid][:512])
        msgs = collection_users[uid]
        msgs = msgs if isinstance(msgs, tuple) else (msgs,)
        coll_rows[uid] = {
            f"bit_acc_vs_{name}": decode_stats(codec, probe, m)[0]
            for name, m in zip(("primary", "secondary"), msgs)
        }
    report.results["collection"] = coll_rows

    # ---- denoiser (adversary tool, trained on the public split)
    denoiser_cfg = DenoiserTrainConfig(
        epochs=config.denoiser_epochs,
        batch_size=config.denoiser_batch_size,
        lr=config.denoiser_lr,
        base_channels=config.denoiser_base,
        seed=derive_seed(config.data_seed, "denoiser"),
    )
    denoiser, _ = stages.run(
        "denoiser",
        {"cfg": dict(vars(denoiser_cfg)), "corpus": public_key},
        lambda: train_denoiser(_to_f32(data["public"]), denoiser_cfg),
        save_denoiser,
        load_denoiser,
    )

    # ---- mediators: purify the collection, or sample fresh in plus mode
    purify_cfg = PurifyConfig(noise_scale=config.noise_scale, sample_steps=config.sample_steps)
    med_key = {
        "denoiser": stages.keys["denoiser"],
        "sim": stages.keys["provider_sim"],
        "plus_mode": config.plus_mode,
        "purify": [config.noise_scale, config.sample_steps],
        "mediator_steps": config.mediator_steps,
        "seed": derive_seed(config.seed, "mediators"),
    }

    def build_mediators():
        if config.plus_mode:
            train = sample_mediators(
                denoiser, len(collection_all), seed=med_key["seed"], steps=config.mediator_steps
            ).images
            eval_meds = sample_mediators(
                denoiser,
                config.n_eval,
                seed=derive_seed(med_key["seed"], "eval"),
                steps=config.mediator_steps,
            ).images
        else:
            train = purify(denoiser, _to_f32(collection_all), purify_cfg, seed=med_key["seed"]).images
            eval_wm = torch.cat([sim["eval"][u] for u in sorted(sim["eval"])])
            eval_meds = purify(
                denoiser, _to_f32(eval_wm), purify_cfg, seed=derive_seed(med_key["seed"], "eval")
            ).images
        return {"train": _to_u8(train), "eval": _to_u8(eval_meds)}

    mediators, _ = stages.run(
        "mediators", med_key, build_mediators, _save_bundle, _load_bundle
    )
    report.results["mediators"] = {
        "provenance": "sampled" if config.plus_mode else "purified",
        **{
            k: v
            for k, v in _decode_eval(
                codec, _to_f32(mediators["train"][:512]), primary, config.tau
            ).items()
        },
    }

    # ---- feature extractor for report metrics
    extractor, _ = stages.run(
        "extractor",
        {
            "epochs": config.extractor_epochs,
            "corpus": public_key,
            "seed": derive_seed(config.data_seed, "extractor"),
        },
        lambda: train_feature_extractor(
            _to_f32(data["public"]),
            data["public_labels"].numpy(),
            epochs=config.extractor_epochs,
            seed=derive_seed(config.data_seed, "extractor"),
        ),
        save_extractor,
        load_extractor,
    )

    # ---- attack training (black-box: tensors in, tensors out)
    adversary_view = tensor_hashes(collection_all) | tensor_hashes(mediators["train"])
    if config.kind == "fewshot":
        adversary_view = adversary_view | tensor_hashes(sim["fewshot"])
    eval_wm = {u: _to_f32(t) for u, t in sim["eval"].items()}
    mediator_eval = _to_f32(mediators["eval"])
    logs_dir = out_dir / "logs"
    logs_dir.mkdir(exist_ok=True)

    def attack_config(direction: str, epochs: int, salt: str) -> AttackConfig:
        return AttackConfig(
            direction=direction,
            w_D=config.w_d,
            w_G=config.w_g,
            w_x=config.w_x,
            lr=config.attack_lr,
            batch_size=config.attack_batch_size,
            critic_steps_per_gen=config.critic_steps,
            epochs=epochs,
            seed=derive_seed(config.seed, "attack", salt),
            gen_channels=config.gen_channels,
            gen_blocks=config.gen_blocks,
            critic_base=config.critic_base,
        )

    def train_one(
        label: str,
        direction: str,
        watermarked_u8: torch.Tensor,
        probe_inputs: torch.Tensor,
        probe_message: BitMessage,
        epochs: int | None = None,
        finetune_from: tuple | None = None,
    ):
        """One cached attack-training stage, with its decoded-accuracy curve."""
        cfg = attack_config(direction, epochs or config.attack_epochs, label)
        key = {
            "cfg": cfg.to_dict(),
            "mediators": stages.keys["mediators"],
            "sim": stages.keys["provider_sim"],
            "inputs": sha256_array(watermarked_u8.numpy()),
            "curve_probe": config.curve_probe,
            "finetune_from": str(finetune_from[2]) if finetune_from else "",
        }

        def build():
            wm = _to_f32(watermarked_u8)
            meds = _to_f32(mediators["train"])
            assert_adversary_inputs({"watermarked": wm, "mediators": meds}, adversary_view)
            live_log = logs_dir / f"attack_{label}.live.jsonl"
            live_log.unlink(missing_ok=True)
            critic = Critic(base=config.critic_base)
            if finetune_from:
                base_gen, base_critic, _ = finetune_from
                critic.load_state_dict(base_critic.state_dict())
                gen = AttackGenerator(
                    direction, channels=config.gen_channels, blocks=config.gen_blocks
                )
                gen.load_state_dict(base_gen.state_dict())
                generator, records = finetune_fewshot(gen, critic, wm, meds, cfg, log_path=live_log)
            else:
                generator, records = train_attack(wm, meds, cfg, critic=critic, log_path=live_log)
            curve = _epoch_curve(
                records,
                direction,
                config.gen_channels,
                config.gen_blocks,
                probe_inputs[: config.curve_probe],
                codec,
                probe_message,
            )
            chosen = select_checkpoint(records)
            return {
                "generator": generator.state_dict(),
                "critic": critic.state_dict(),
                "direction": direction,
                "channels": config.gen_channels,
                "blocks": config.gen_blocks,
                "curve": curve,
                "chosen": chosen.to_log(),
            }

        bundle, path = stages.run(f"attack_{label}", key, build, _save_bundle, _load_bundle)
        generator = AttackGenerator(
            direction, channels=bundle["channels"], blocks=bundle["blocks"]
        )
        generator.load_state_dict(bundle["generator"])
        generator.eval()
        critic = Critic(base=config.critic_base)
        critic.load_state_dict(bundle["critic"])
        log_path = logs_dir / f"attack_{label}.jsonl"
        log_path.write_text("".join(f"{_json_line(r)}\n" for r in bundle["curve"]))
        (logs_dir / f"attack_{label}.live.jsonl").unlink(missing_ok=True)
        report.checkpoint[label] = bundle["chosen"]
        return generator, critic, path

    results = report.results
    if config.kind == "remove":
        gen_r, _, _ = train_one("remove", "remove", collection_all, eval_wm["eval"], primary)
        row, _ = _attack_eval(
            gen_r, eval_wm["eval"], codec, primary, config.tau, extractor,
            fid_reference=_to_f32(data["eval_src"]),
        )
        results["attack"] = {"remove": row}
        timing_generator = gen_r
    elif config.kind == "forge":
        gen_f, _, _ = train_one("forge", "forge", collection_all, mediator_eval, primary)
        row, _ = _attack_eval(
            gen_f, mediator_eval, codec, primary, config.tau, extractor,
            fid_reference=_to_f32(data["eval_src"]),
        )
        results["attack"] = {"forge": row}
        timing_generator = gen_f
    elif config.kind == "replace":
        gen_r, _, _ = train_one(
            "remove", "remove", sim["collections"]["user_a"], eval_wm["eval"], primary
        )
        gen_f, _, _ = train_one(
            "forge", "forge", sim["collections"]["user_b"], mediator_eval, secondary
        )
        replaced = replace_watermark(gen_r, gen_f, eval_wm["eval"])
        results["attack"] = {
            "replaced_vs_new": _decode_eval(codec, replaced, secondary, config.tau),
            "replaced_vs_old": _decode_eval(codec, replaced, primary, config.tau),
            **{"pixel": _pair_metrics(eval_wm["eval"], replaced, extractor)},
        }
        timing_generator = gen_r
    elif config.kind == "fewshot":
        base_r = train_one("remove_base", "remove", collection_all, eval_wm["eval"], secondary)
        base_f = train_one("forge_base", "forge", collection_all, mediator_eval, secondary)
        gen_r, _, _ = train_one(
            "remove_finetune",
            "remove",
            sim["fewshot"],
            eval_wm["eval"],
            secondary,
            epochs=config.fewshot_epochs,
            finetune_from=base_r,
        )
        gen_f, _, _ = train_one(
            "forge_finetune",
            "forge",
            sim["fewshot"],
            mediator_eval,
            secondary,
            epochs=config.fewshot_epochs,
            finetune_from=base_f,
        )
        remove_row, _ = _attack_eval(
            gen_r, eval_wm["eval"], codec, secondary, config.tau, extractor
        )
        forge_row, _ = _attack_eval(
            gen_f, mediator_eval, codec, secondary, config.tau, extractor
        )
        results["attack"] = {"remove_finetuned": remove_row, "forge_finetuned": forge_row}
        timing_generator = gen_f
    else:  # group
        gen_r, _, _ = train_one("remove", "remove", collection_all, eval_wm["eval_a"], primary)
        row_a, _ = _attack_eval(gen_r, eval_wm["eval_a"], codec, primary, config.tau, extractor)
        row_b, _ = _attack_eval(gen_r, eval_wm["eval_b"], codec, secondary, config.tau, extractor)
        results["attack"] = {"remove_vs_primary": row_a, "remove_vs_secondary": row_b}
        timing_generator = gen_r

    # ---- baselines (optional)
    if config.baselines:
        n_b = min(config.baseline_images, config.n_eval)
        base_eval_user = sorted(sim["eval"])[0]
        base_message = eval_users[base_eval_user]
        autoencoder = None
        if config.baselines in ("regen", "full"):
            autoencoder, _ = stages.run(
                "autoencoder",
                {"corpus": public_key, "seed": derive_seed(config.data_seed, "ae")},
                lambda: train_autoencoder(
                    _to_f32(data["public"]), seed=derive_seed(config.data_seed, "ae")
                ),
                lambda model, p: torch.save(model.state_dict(), p),
                _load_autoencoder,
            )

        def build_baselines():
            return run_baseline_suite(
                codec,
                _to_f32(sim["eval"][base_eval_user][:n_b]),
                _to_f32(data["eval_src"][:n_b]),
                base_message,
                extractor,
                denoiser=denoiser,
                autoencoder=autoencoder,
                suite=config.baselines,
                seed=derive_seed(config.seed, "baselines"),
                draws=config.baseline_draws,
            )

        suite, _ = stages.run(
            "baselines",
            {
                "suite": config.baselines,
                "draws": config.baseline_draws,
                "n": n_b,
                "codec": stages.keys["codec"],
                "sim": stages.keys["provider_sim"],
                "denoiser": stages.keys["denoiser"],
                "extractor": stages.keys["extractor"],
                "seed": derive_seed(config.seed, "baselines"),
            },
            build_baselines,
            lambda obj, p: write_json(p, obj),
            lambda p: __import__("json").loads(Path(p).read_text()),
            suffix=".json",
        )
        results["baselines"] = suite

    # ---- throughput: generator pass vs diffusion purification, per 1k images
    if config.timing_images > 0:
        stages.current = "timing"
        sample = eval_wm[sorted(eval_wm)[0]][: config.timing_images]
        start = time.perf_counter()
        apply_attack(timing_generator, sample)
        attack_s = (time.perf_counter() - start) / len(sample) * 1000.0
        start = time.perf_counter()
        purify(denoiser, sample, purify_cfg, seed=0)
        purify_s = (time.perf_counter() - start) / len(sample) * 1000.0
        report.throughput = {
            "n_images": int(len(sample)),
            "apply_attack_s_per_1k": attack_s,
            "purify_s_per_1k": purify_s,
            "purify_over_attack": purify_s / attack_s,
        }

    # ---- artifact ledger + plots
    for stage, timing in [(t.stage, t) for t in report.stage_timings]:
        if timing.artifact:
            report.artifacts[stage] = {
                "path": timing.artifact,
                "sha256": sha256_file(timing.artifact)[:16],
            }
    stages.current = "plots"
    export_plots(logs_dir, report, out_dir / "plots")


def _json_line(record: dict) -> str:
    import json

    return json.dumps(record, sort_keys=True)


# --------------------------------------------------------------------- plots


def export_plots(training_log: Path | str, report: RunReport | dict, out_dir: Path | str) -> list[Path]:
    """Training curves plus the baseline comparison chart, with exact-value
    JSON sidecars (no smoothing); returns the written file paths."""
    log_path = Path(training_log)
    if not log_path.exists():
        raise ValueError(f"training log {log_path} does not exist")
    log_files = sorted(log_path.glob("*.jsonl")) if log_path.is_dir() else [log_path]
    if not log_files:
        raise ValueError(f"no .jsonl training logs under {log_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(report, RunReport):
        report = report.to_dict()
    written: list[Path] = []

    series = []
    for path in log_files:
        rows = read_jsonl(path)
        if not rows:
            continue
        series.append(
            {
                "label": path.stem.replace("attack_", ""),
                "direction": rows[0].get("direction", ""),
                "epoch": [r["epoch"] for r in rows],
                "bit_acc": [r["bit_acc"] for r in rows],
            }
        )
    if series:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for s in series:
            ax.plot(s["epoch"], s["bit_acc"], marker="o", markersize=3, label=s["label"])
        ax.set_xlabel("epoch")
        ax.set_ylabel("decoded bit accuracy (%)")
        ax.set_ylim(0, 102)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        curve_png = out_dir / "training_curves.png"
        fig.savefig(curve_png, dpi=120)
        plt.close(fig)
        write_json(out_dir / "training_curves.json", {"series": series})
        written += [curve_png, out_dir / "training_curves.json"]

    bars = _comparison_rows(report)
    if bars:
        labels = [b["name"] for b in bars]
        removal = [b["bit_acc_removal"] for b in bars]
        fig, ax = plt.subplots(figsize=(max(7, 0.6 * len(bars)), 4.5))
        x = np.arange(len(bars))
        ax.bar(x, [v if v is not None else 0.0 for v in removal], width=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel("decoded bit accuracy after attack (%)")
        ax.axhline(50.0, color="gray", linestyle="--", linewidth=1)
        ax.grid(alpha=0.3, axis="y")
        fig.tight_layout()
        bars_png = out_dir / "method_comparison.png"
        fig.savefig(bars_png, dpi=120)
        plt.close(fig)
        write_json(out_dir / "method_comparison.json", {"rows": bars})
        written += [bars_png, out_dir / "method_comparison.json"]
    return written


def _comparison_rows(report: dict) -> list[dict]:
    """Removal rows for the comparison chart / CSV: baselines, then attacks."""
    rows = []
    baselines = (report.get("results") or {}).get("baselines") or {}
    for row in baselines.get("rows", []):
        rows.append(
            {
                "name": row["name"],
                "bit_acc_removal": row.get("bit_acc_removal"),
                "bit_acc_forge": row.get("bit_acc_forge"),
                "fid_proxy": row.get("fid_proxy"),
                "psnr": row.get("psnr"),
                "ssim": row.get("ssim"),
                "emb_sim": row.get("emb_sim"),
            }
        )
    attack = (report.get("results") or {}).get("attack") or {}
    for label, row in attack.items():
        if not isinstance(row, dict) or "bit_acc" not in row:
            continue
        is_forge = "forge" in label or "new" in label
        rows.append(
            {
                "name": f"attack_{label}",
                "bit_acc_removal": None if is_forge else row["bit_acc"],
                "bit_acc_forge": row["bit_acc"] if is_forge else None,
                "fid_proxy": row.get("fid_vs_clean"),
                "psnr": row.get("psnr_vs_input"),
                "ssim": row.get("ssim_vs_input"),
                "emb_sim": row.get("emb_sim_vs_input"),
            }
        )
    return rows


def _write_rows_csv(report: RunReport, path: Path) -> None:
    rows = _comparison_rows(report.to_dict())
    fields = ["name", "bit_acc_removal", "bit_acc_forge", "fid_proxy", "psnr", "ssim", "emb_sim"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fields})
