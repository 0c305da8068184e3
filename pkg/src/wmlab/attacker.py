"""The unified image-to-image attack: one WGAN-GP code path that either
strips a watermark (watermarked -> mediator-like) or forges one
(mediator -> watermarked-like), depending only on which set plays "real".

Removal feeds the generator watermarked images and treats mediators as the
real distribution; forging swaps the two sets. Swapping the sets and the
direction flag therefore produces bit-identical losses, which the tests pin.

The generator is a cascade of residual blocks whose output layer starts at
zero, so an untrained generator is exactly the identity. Training never
touches codec parameters or decode: checkpoint quality is judged from image
metrics only (PSNR/SSIM against the generator's own inputs, plus a Fréchet
proxy on frozen random features against the real set).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import RandomFeatureNet, perceptual_distance
from .purifier import MediatorSet
from .utils import TrainingFailure, append_jsonl, config_hash, torch_generator

DIRECTIONS = ("remove", "forge")
FD_PROBE_SEED = 4321


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm1 = _gn(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = _gn(ch)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(x + h)


class AttackGenerator(nn.Module):
    """Residual generator: output = clamp(input + residual(input), 0, 1)."""

    def __init__(self, direction: str, channels: int = 16, blocks: int = 4):
        super().__init__()
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        self.direction = direction
        self.channels = channels
        self.blocks = blocks
        self.stem = nn.Conv2d(3, channels, 3, padding=1)
        self.body = nn.Sequential(*[_ResBlock(channels) for _ in range(blocks)])
        self.head = nn.Conv2d(channels, 3, 3, padding=1)
        # identity at init: the residual path contributes exactly zero
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(F.silu(self.stem(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x + self.residual(x)).clamp(0.0, 1.0)


class Critic(nn.Module):
    """Four strided conv layers to a scalar; no output constraint."""

    def __init__(self, base: int = 16):
        super().__init__()
        chans = (base, base * 2, base * 4, base * 8)
        layers: list[nn.Module] = []
        prev = 3
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.SiLU()]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x).mean(dim=(2, 3))).squeeze(1)


@dataclass
class AttackConfig:
    direction: str
    w_D: float = 10.0
    w_G: float = 800.0
    w_x: float = 15.0
    lr: float = 1e-4
    batch_size: int = 32
    critic_steps_per_gen: int = 5
    epochs: int = 40
    seed: int = 0
    optimizer: str = "rmsprop"
    perceptual_weight: float = 0.0
    gen_channels: int = 16
    gen_blocks: int = 4
    critic_base: int = 16
    ema_decay: float | None = None
    probe_size: int = 128
    fd_probe_size: int = 256

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if min(self.w_D, self.w_G, self.w_x) <= 0:
            raise ValueError("loss weights must all be positive")
        if self.critic_steps_per_gen < 1:
            raise ValueError("critic_steps_per_gen must be >= 1")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class CheckpointRecord:
    epoch: int
    psnr: float
    ssim: float
    fd_proxy: float
    state: dict = field(repr=False, default_factory=dict)

    def to_log(self) -> dict:
        return {
            "epoch": self.epoch,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "fd_proxy": self.fd_proxy,
        }


# ------------------------------------------------------------------- losses


def gradient_penalty(
    critic: Critic, real: torch.Tensor, fake: torch.Tensor, gen: torch.Generator | None = None
) -> torch.Tensor:
    """E[(||grad D at alpha*real + (1-alpha)*fake||_2 - 1)^2], alpha ~ U[0,1]."""
    alpha = torch.rand((len(real), 1, 1, 1), generator=gen, dtype=real.dtype)
    mix = (alpha * real + (1.0 - alpha) * fake).requires_grad_(True)
    scores = critic(mix)
    (grads,) = torch.autograd.grad(scores.sum(), mix, create_graph=True, allow_unused=True)
    if grads is None:
        # critic ignores its input entirely: gradient is identically zero
        grads = torch.zeros_like(mix)
    norms = grads.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(
    critic: Critic,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    w_D: float,
    gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Wasserstein gap plus weighted gradient penalty."""
    if real_batch.shape != fake_batch.shape:
        raise ValueError(
            f"batch shapes differ: {tuple(real_batch.shape)} vs {tuple(fake_batch.shape)}"
        )
    gap = critic(fake_batch).mean() - critic(real_batch).mean()
    return gap + w_D * gradient_penalty(critic, real_batch, fake_batch, gen)


def generator_loss(
    generator: AttackGenerator,
    critic: Critic,
    input_batch: torch.Tensor,
    w_G: float,
    w_x: float,
    perceptual_net: nn.Module | None = None,
    perceptual_weight: float = 0.0,
) -> torch.Tensor:
    """-w_G E[D(G(x))] + w_x (L1 + MSE + perceptual)(G(x), x).

    Reconstruction compares the generator output against its own input.
    """
    out = generator(input_batch)
    recon = F.l1_loss(out, input_batch) + F.mse_loss(out, input_batch)
    if perceptual_net is not None and perceptual_weight > 0:
        recon = recon + perceptual_weight * perceptual_distance(out, input_batch, perceptual_net)
    return -w_G * critic(out).mean() + w_x * recon


# ----------------------------------------------------------------- training


def _resolve_sets(
    direction: str, watermarked: torch.Tensor, mediators: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator inputs, real-distribution set) for the given direction."""
    if direction == "remove":
        return watermarked, mediators
    if direction == "forge":
        return mediators, watermarked
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _mediator_tensor(mediators) -> torch.Tensor:
    return mediators.images if isinstance(mediators, MediatorSet) else mediators


def _make_optimizer(params, config: AttackConfig):
    if config.optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=config.lr)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, betas=(0.5, 0.9))
    raise ValueError(f"unknown optimizer: {config.optimizer!r}")


@torch.no_grad()
def _fd_proxy(outputs: torch.Tensor, reals: torch.Tensor, net: RandomFeatureNet) -> float:
    from .metrics import frechet_from_embeddings

    def emb(batch):
        outs = []
        for start in range(0, len(batch), 256):
            feats = net.features(batch[start : start + 256])[-1]
            outs.append(feats.mean(dim=(2, 3)))
        return torch.cat(outs)

    return frechet_from_embeddings(emb(outputs), emb(reals))


@torch.no_grad()
def _probe_metrics(
    generator: AttackGenerator,
    probe_inputs: torch.Tensor,
    fd_reals: torch.Tensor,
    fd_inputs: torch.Tensor,
    net: RandomFeatureNet,
) -> dict:
    from .metrics import psnr, ssim

    outs = generator(probe_inputs)
    psnr_mean = float(np.mean([psnr(a, b) for a, b in zip(probe_inputs, outs)]))
    ssim_mean = ssim(probe_inputs, outs)
    fd = _fd_proxy(generator(fd_inputs), fd_reals, net)
    return {"psnr": psnr_mean, "ssim": ssim_mean, "fd_proxy": fd}


class _EMA:
    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = copy.deepcopy(module.state_dict())

    def update(self, module: nn.Module):
        with torch.no_grad():
            for key, value in module.state_dict().items():
                if value.dtype.is_floating_point:
                    self.shadow[key].mul_(self.decay).add_(value, alpha=1 - self.decay)
                else:
                    self.shadow[key].copy_(value)


def train_attack(
    watermarked: torch.Tensor,
    mediators,
    config: AttackConfig,
    log_path: Path | str | None = None,
    generator: AttackGenerator | None = None,
    critic: Critic | None = None,
) -> tuple[AttackGenerator, list[CheckpointRecord]]:
    """Adversarial training; returns the select_checkpoint generator plus the
    full per-epoch record list. Never touches a codec."""
    mediators = _mediator_tensor(mediators)
    if len(watermarked) == 0 or len(mediators) == 0:
        raise ValueError("both image sets must be non-empty")
    if watermarked.shape[1:] != mediators.shape[1:]:
        raise ValueError(
            f"set shapes differ: {tuple(watermarked.shape[1:])} vs {tuple(mediators.shape[1:])}"
        )

    torch.manual_seed(config.seed)
    if generator is None:
        generator = AttackGenerator(
            config.direction, channels=config.gen_channels, blocks=config.gen_blocks
        )
    elif generator.direction != config.direction:
        raise ValueError(
            f"generator direction {generator.direction!r} != config {config.direction!r}"
        )
    if critic is None:
        critic = Critic(base=config.critic_base)

    inputs, reals = _resolve_sets(config.direction, watermarked, mediators)
    opt_g = _make_optimizer(generator.parameters(), config)
    opt_d = _make_optimizer(critic.parameters(), config)
    gen = torch_generator(config.seed + 1)
    feat_net = RandomFeatureNet(seed=FD_PROBE_SEED)
    ema = _EMA(generator, config.ema_decay) if config.ema_decay else None

    probe_inputs = inputs[: config.probe_size]
    fd_gen = torch_generator(config.seed + 2)
    fd_inputs = inputs[torch.randperm(len(inputs), generator=fd_gen)[: config.fd_probe_size]]
    fd_reals = reals[torch.randperm(len(reals), generator=fd_gen)[: config.fd_probe_size]]

    def real_batches():
        if len(reals) < config.batch_size:
            while True:
                idx = torch.randint(len(reals), (config.batch_size,), generator=gen)
                yield reals[idx]
        while True:
            order = torch.randperm(len(reals), generator=gen)
            for start in range(0, len(reals) - config.batch_size + 1, config.batch_size):
                yield reals[order[start : start + config.batch_size]]

    records: list[CheckpointRecord] = []
    real_stream = real_batches()
    steps_per_epoch = max(len(inputs) // (config.batch_size * config.critic_steps_per_gen), 1)

    def input_batch():
        idx = torch.randint(len(inputs), (config.batch_size,), generator=gen)
        return inputs[idx]

    for epoch in range(config.epochs):
        generator.train()
        critic.train()
        for _ in range(steps_per_epoch):
            for _ in range(config.critic_steps_per_gen):
                with torch.no_grad():
                    fake = generator(input_batch())
                loss_d = critic_loss(critic, next(real_stream), fake, config.w_D, gen)
                if not torch.isfinite(loss_d):
                    raise TrainingFailure(
                        "critic loss non-finite",
                        payload={"records": [r.to_log() for r in records], "epoch": epoch},
                    )
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
            loss_g = generator_loss(
                generator,
                critic,
                input_batch(),
                config.w_G,
                config.w_x,
                feat_net,
                config.perceptual_weight,
            )
            if not torch.isfinite(loss_g):
                raise TrainingFailure(
                    "generator loss non-finite",
                    payload={"records": [r.to_log() for r in records], "epoch": epoch},
                )
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            if ema is not None:
                ema.update(generator)

        generator.eval()
        snapshot_src = ema.shadow if ema is not None else generator.state_dict()
        snapshot = {k: v.detach().clone() for k, v in snapshot_src.items()}
        eval_gen = _clone_with_state(generator, snapshot)
        metrics = _probe_metrics(eval_gen, probe_inputs, fd_reals, fd_inputs, feat_net)
        record = CheckpointRecord(epoch=epoch, state=snapshot, **metrics)
        records.append(record)
        if log_path is not None:
            append_jsonl(log_path, {"direction": config.direction, **record.to_log()})

    chosen = select_checkpoint(records)
    generator.load_state_dict(chosen.state)
    generator.eval()
    return generator, records


def _clone_with_state(generator: AttackGenerator, state: dict) -> AttackGenerator:
    clone = AttackGenerator(generator.direction, channels=generator.channels, blocks=generator.blocks)
    clone.load_state_dict(state)
    clone.eval()
    return clone


def select_checkpoint(records: list[CheckpointRecord]) -> CheckpointRecord:
    """From the final third of epochs: minimal Fréchet proxy, tie-break by
    maximal PSNR+SSIM, then by latest epoch."""
    if not records:
        raise ValueError("empty checkpoint list")
    n = len(records)
    pool = records[n - max((n + 2) // 3, 1) :]
    return min(pool, key=lambda r: (r.fd_proxy, -(r.psnr + r.ssim), -r.epoch))


@torch.no_grad()
def apply_attack(generator: AttackGenerator, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Push images through a frozen generator; accepts one image or a batch."""
    generator.eval()
    single = images.dim() == 3
    batch = images.unsqueeze(0) if single else images
    outs = [generator(batch[s : s + batch_size]) for s in range(0, len(batch), batch_size)]
    out = torch.cat(outs)
    return out[0] if single else out


def finetune_fewshot(
    generator: AttackGenerator,
    critic: Critic,
    new_watermarked: torch.Tensor,
    mediators,
    config: AttackConfig,
    log_path: Path | str | None = None,
) -> tuple[AttackGenerator, list[CheckpointRecord]]:
    """Adapt a trained generator to a new message from a small sample set."""
    if len(new_watermarked) == 0:
        raise ValueError("few-shot sample set is empty")
    return train_attack(
        new_watermarked,
        _mediator_tensor(mediators),
        config,
        log_path=log_path,
        generator=generator,
        critic=critic,
    )


def replace_watermark(
    gen_remove: AttackGenerator, gen_forge: AttackGenerator, images: torch.Tensor
) -> torch.Tensor:
    """Remove the old watermark, then forge the new one: G_f(G_r(x))."""
    if gen_remove.direction != "remove":
        raise ValueError(f"gen_remove has direction {gen_remove.direction!r}")
    if gen_forge.direction != "forge":
        raise ValueError(f"gen_forge has direction {gen_forge.direction!r}")
    return apply_attack(gen_forge, apply_attack(gen_remove, images))


# --------------------------------------------------------------------- disk


def save_generator(
    generator: AttackGenerator,
    path: Path | str,
    config: AttackConfig | None = None,
    record: CheckpointRecord | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "direction": generator.direction,
        "config_hash": config_hash(config.to_dict()) if config else "",
        "epoch": record.epoch if record else None,
        "probe_metrics": record.to_log() if record else None,
    }
    torch.save(
        {
            "kind": "attack_generator",
            "direction": generator.direction,
            "channels": generator.channels,
            "blocks": generator.blocks,
            "state": generator.state_dict(),
            "manifest": manifest,
        },
        path,
    )
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))


def load_generator(path: Path | str) -> AttackGenerator:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "attack_generator":
        raise ValueError(f"not an attack generator checkpoint: {path}")
    generator = AttackGenerator(blob["direction"], channels=blob["channels"], blocks=blob["blocks"])
    generator.load_state_dict(blob["state"])
    generator.eval()
    return generator


def save_critic(critic: Critic, path: Path | str) -> None:
    base = critic.body[0].out_channels
    torch.save({"kind": "critic", "base": base, "state": critic.state_dict()}, path)


def load_critic(path: Path | str) -> Critic:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "critic":
        raise ValueError(f"not a critic checkpoint: {path}")
    critic = Critic(base=blob["base"])
    critic.load_state_dict(blob["state"])
    return critic
