"""Mediator production: a small denoising diffusion model trained on the
auxiliary split, used two ways. Purification pushes watermarked images
through noise-then-denoise at a chosen timestep; plus-mode sampling draws
unconditional images from pure noise. Either way the output set carries no
usable watermark.

The network operates in [-1, 1]; every public entry point takes and returns
[0, 1] images. "Noise scale" is the forward-diffusion timestep index t* at
which noise is injected; the reverse chain then runs `sample_steps` strided
deterministic (DDIM) updates down to 0.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datasets import iter_batches
from .utils import TrainingFailure, config_hash, torch_generator

TOTAL_TIMESTEPS = 1000


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: torch.Tensor
    alpha_bar: torch.Tensor

    @classmethod
    def linear(
        cls, timesteps: int = TOTAL_TIMESTEPS, beta_start: float = 1e-4, beta_end: float = 0.02
    ) -> "DiffusionSchedule":
        if timesteps < 100:
            raise ValueError(f"total timesteps must be >= 100, got {timesteps}")
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        if not (alpha_bar[1:] < alpha_bar[:-1]).all():
            raise ValueError("cumulative noise must be strictly increasing")
        return cls(betas=betas.float(), alpha_bar=alpha_bar.float())

    @property
    def timesteps(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class PurifyConfig:
    noise_scale: int
    sample_steps: int

    def __post_init__(self):
        if not (0 <= self.noise_scale < TOTAL_TIMESTEPS):
            raise ValueError(f"noise_scale must be in [0, {TOTAL_TIMESTEPS}), got {self.noise_scale}")
        if self.sample_steps < 1:
            raise ValueError(f"sample_steps must be >= 1, got {self.sample_steps}")


@dataclass
class MediatorSet:
    images: torch.Tensor
    provenance: str
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in ("purified", "sampled"):
            raise ValueError(f"unknown provenance: {self.provenance}")


def _time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.temb = nn.Linear(tdim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Tiny UNet predicting the noise component epsilon."""

    def __init__(self, base: int = 32, tdim: int = 64):
        super().__init__()
        self.tdim = tdim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inc = nn.Conv2d(3, base, 3, padding=1)
        self.down1 = _Block(base, base * 2, tdim)
        self.down2 = _Block(base * 2, base * 2, tdim)
        self.mid = _Block(base * 2, base * 2, tdim)
        self.up1 = _Block(base * 4, base * 2, tdim)
        self.up2 = _Block(base * 3, base, tdim)
        self.out = nn.Conv2d(base, 3, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(_time_embedding(t, self.tdim))
        h0 = self.inc(x)
        h1 = self.down1(F.avg_pool2d(h0, 2), temb)
        h2 = self.down2(F.avg_pool2d(h1, 2), temb)
        m = self.mid(h2, temb)
        u1 = self.up1(torch.cat([F.interpolate(m, scale_factor=2), h1], dim=1), temb)
        u2 = self.up2(torch.cat([F.interpolate(u1, scale_factor=2), h0], dim=1), temb)
        return self.out(u2)


@dataclass
class DenoiserModel:
    net: Denoiser
    schedule: DiffusionSchedule
    image_size: int
    manifest: dict = field(default_factory=dict)

    @property
    def total_timesteps(self) -> int:
        return self.schedule.timesteps


@dataclass
class DenoiserTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-4
    base_channels: int = 32
    seed: int = 0


def train_denoiser(aux_images: torch.Tensor, config: DenoiserTrainConfig) -> DenoiserModel:
    """Fit the epsilon-prediction objective on the auxiliary split."""
    if len(aux_images) < 1:
        raise ValueError("empty training set")
    sizes = {tuple(img.shape) for img in aux_images[:64]}
    if len(sizes) != 1:
        raise ValueError(f"inconsistent image shapes: {sizes}")
    started = time.perf_counter()
    torch.manual_seed(config.seed)
    net = Denoiser(base=config.base_channels)
    schedule = DiffusionSchedule.linear()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    gen = torch_generator(config.seed + 1)
    data = aux_images * 2.0 - 1.0
    curve = []
    for epoch in range(config.epochs):
        losses = []
        for idx in iter_batches(len(data), config.batch_size, gen):
            x0 = data[idx]
            t = torch.randint(0, schedule.timesteps, (len(x0),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            ab = schedule.alpha_bar[t][:, None, None, None]
            xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
            loss = F.mse_loss(net(xt, t), eps)
            if not torch.isfinite(loss):
                raise TrainingFailure("denoiser loss diverged", payload={"curve": curve})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    net.eval()
    manifest = {
        "epochs": config.epochs,
        "seed": config.seed,
        "config_hash": config_hash(vars(config)),
        "loss_curve": curve,
        "train_seconds": time.perf_counter() - started,
    }
    return DenoiserModel(net=net, schedule=schedule, image_size=aux_images.shape[-1], manifest=manifest)


def _ddim_chain(
    model: DenoiserModel, x: torch.Tensor, t_start: int, steps: int
) -> torch.Tensor:
    """Deterministic strided reverse updates from t_start down to 0."""
    schedule = model.schedule
    grid = np.unique(np.linspace(0, t_start, min(steps, t_start) + 1).round().astype(int))[::-1]
    net = model.net
    with torch.no_grad():
        for t_hi, t_lo in zip(grid[:-1], grid[1:]):
            t = torch.full((len(x),), int(t_hi), dtype=torch.long)
            eps_hat = net(x, t)
            ab_hi = schedule.alpha_bar[t_hi]
            x0_hat = ((x - (1 - ab_hi).sqrt() * eps_hat) / ab_hi.sqrt()).clamp(-1, 1)
            if t_lo == 0:
                x = x0_hat
            else:
                ab_lo = schedule.alpha_bar[t_lo]
                x = ab_lo.sqrt() * x0_hat + (1 - ab_lo).sqrt() * eps_hat
    return x


def _check_shape(model: DenoiserModel, images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != 3 or images.shape[-1] != model.image_size:
        raise ValueError(
            f"images {tuple(images.shape)} do not match denoiser size {model.image_size}"
        )


def purify(
    model: DenoiserModel,
    watermarked: torch.Tensor,
    cfg: PurifyConfig,
    seed: int = 0,
    batch_size: int = 128,
    source_hash: str = "",
) -> MediatorSet:
    """Noise-then-denoise each image at timestep cfg.noise_scale."""
    _check_shape(model, watermarked)
    if cfg.noise_scale == 0:
        out = watermarked.clone()
    else:
        gen = torch_generator(seed)
        ab = model.schedule.alpha_bar[cfg.noise_scale]
        chunks = []
        for start in range(0, len(watermarked), batch_size):
            x0 = watermarked[start : start + batch_size] * 2.0 - 1.0
            eps = torch.randn(x0.shape, generator=gen)
            xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
            xhat = _ddim_chain(model, xt, cfg.noise_scale, cfg.sample_steps)
            chunks.append(((xhat + 1.0) / 2.0).clamp(0, 1))
        out = torch.cat(chunks)
    manifest = {
        "provenance": "purified",
        "config": {"noise_scale": cfg.noise_scale, "sample_steps": cfg.sample_steps},
        "seed": seed,
        "source_hash": source_hash,
    }
    return MediatorSet(images=out, provenance="purified", manifest=manifest)


def sample_mediators(
    model: DenoiserModel,
    n: int,
    seed: int = 0,
    steps: int = 50,
    batch_size: int = 128,
) -> MediatorSet:
    """Unconditional images from pure noise (plus-mode mediators)."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    gen = torch_generator(seed)
    t_max = model.total_timesteps - 1
    chunks = []
    for start in range(0, n, batch_size):
        count = min(batch_size, n - start)
        x = torch.randn((count, 3, model.image_size, model.image_size), generator=gen)
        xhat = _ddim_chain(model, x, t_max, steps)
        chunks.append(((xhat + 1.0) / 2.0).clamp(0, 1))
    manifest = {
        "provenance": "sampled",
        "config": {"steps": steps},
        "seed": seed,
        "n": n,
    }
    return MediatorSet(images=torch.cat(chunks), provenance="sampled", manifest=manifest)


@torch.no_grad()
def reconstruction_psnr(model: DenoiserModel, images: torch.Tensor, t_star: int, seed: int = 0) -> float:
    """Mean PSNR of purified images against their originals."""
    from .metrics import psnr

    out = purify(model, images, PurifyConfig(t_star, max(t_star // 10, 5)), seed=seed)
    return float(np.mean([psnr(a, b) for a, b in zip(images, out.images)]))


def save_denoiser(model: DenoiserModel, path: Path | str) -> None:
    path = Path(path)
    base = model.net.inc.out_channels
    torch.save(
        {
            "kind": "denoiser",
            "base_channels": base,
            "image_size": model.image_size,
            "timesteps": model.total_timesteps,
            "state": model.net.state_dict(),
            "manifest": model.manifest,
        },
        path,
    )
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(model.manifest, indent=2))


def load_denoiser(path: Path | str) -> DenoiserModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "denoiser":
        raise ValueError(f"not a denoiser checkpoint: {path}")
    net = Denoiser(base=blob["base_channels"])
    net.load_state_dict(blob["state"])
    net.eval()
    return DenoiserModel(
        net=net,
        schedule=DiffusionSchedule.linear(blob["timesteps"]),
        image_size=blob["image_size"],
        manifest=blob.get("manifest", {}),
    )
