"""Invisible watermark codec: an encoder that hides a bit string in an image
as a low-amplitude residual, and a decoder that recovers it.

Training interleaves a distortion channel between encoder and decoder so the
decoder learns to survive the benchmark transforms (noise, blur, color
jitter, real JPEG bytes via straight-through gradients). The distortion loss
(L2 + perceptual) is ramped in from zero over the first 30% of steps so the
decoder first learns the channel; afterwards its weight is nudged each epoch
to keep watermarked PSNR inside a target band.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from . import baselines
from .datasets import iter_batches
from .features import RandomFeatureNet, perceptual_distance
from .messages import BitMessage
from .utils import TrainingFailure, config_hash, torch_generator

PERCEPTUAL_SEED = 1234


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class WatermarkEncoder(nn.Module):
    """image + message -> residual; caller adds and clamps."""

    def __init__(self, bits: int, image_size: int, base: int = 32, msg_channels: int = 8):
        super().__init__()
        self.image_size = image_size
        self.msg_channels = msg_channels
        self.coarse = image_size // 4
        self.fc = nn.Linear(bits, msg_channels * self.coarse * self.coarse)
        self.net = nn.Sequential(
            nn.Conv2d(3 + msg_channels, base, 3, padding=1),
            _gn(base),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, padding=1),
            _gn(base),
            nn.SiLU(),
            nn.Conv2d(base, 3, 3, padding=1),
        )

    def forward(self, images: torch.Tensor, messages: torch.Tensor) -> torch.Tensor:
        planes = self.fc(messages * 2.0 - 1.0)
        planes = planes.view(-1, self.msg_channels, self.coarse, self.coarse)
        planes = F.interpolate(planes, size=images.shape[-2:], mode="nearest")
        return self.net(torch.cat([images, planes], dim=1))


class WatermarkDecoder(nn.Module):
    """image -> L logits; sigmoid gives per-bit scores."""

    def __init__(self, bits: int, base: int = 32):
        super().__init__()
        chans = (base, base * 2, base * 4)
        layers: list[nn.Module] = []
        prev = 3
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), _gn(ch), nn.SiLU()]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, bits)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.body(images).mean(dim=(2, 3))
        return self.head(h)


class Codec:
    """Frozen encoder/decoder pair with the message-string interfaces."""

    def __init__(
        self,
        encoder: WatermarkEncoder,
        decoder: WatermarkDecoder,
        message_length: int,
        image_size: int,
        manifest: dict | None = None,
    ):
        self.encoder = encoder
        self.decoder = decoder
        self.message_length = message_length
        self.image_size = image_size
        self.image_shape = (image_size, image_size, 3)
        self.manifest = manifest or {}

    def _check_images(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-1] != self.image_size:
            raise ValueError(
                f"images {tuple(images.shape)} do not match codec size {self.image_size}"
            )

    def _messages_tensor(self, m: BitMessage, n: int) -> torch.Tensor:
        if len(m) != self.message_length:
            raise ValueError(f"message length {len(m)} != codec length {self.message_length}")
        return torch.from_numpy(m.as_array()).unsqueeze(0).repeat(n, 1)

    @torch.no_grad()
    def embed_batch(self, images: torch.Tensor, m: BitMessage, batch_size: int = 256) -> torch.Tensor:
        self._check_images(images)
        outs = []
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            msgs = self._messages_tensor(m, len(chunk))
            outs.append((chunk + self.encoder(chunk, msgs)).clamp(0.0, 1.0))
        return torch.cat(outs)

    def embed(self, image: torch.Tensor, m: BitMessage) -> torch.Tensor:
        if image.dim() != 3:
            raise ValueError(f"expected one (C,H,W) image, got {tuple(image.shape)}")
        return self.embed_batch(image.unsqueeze(0), m)[0]

    @torch.no_grad()
    def decode_scores(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return torch.sigmoid(self.decoder(images))

    def decode_batch(self, images: torch.Tensor) -> list[BitMessage]:
        scores = self.decode_scores(images)
        # ties at exactly 0.5 resolve to 1
        return [BitMessage(tuple(int(s >= 0.5) for s in row)) for row in scores]

    def decode(self, image: torch.Tensor) -> BitMessage:
        if image.dim() != 3:
            raise ValueError(f"expected one (C,H,W) image, got {tuple(image.shape)}")
        return self.decode_batch(image.unsqueeze(0))[0]


# ------------------------------------------------------------------ channel


def quantize_ste(x: torch.Tensor) -> torch.Tensor:
    """uint8 round-trip with a straight-through gradient."""
    q = torch.round(x.clamp(0, 1) * 255.0) / 255.0
    return x + (q - x).detach()


def _jpeg_ste(batch: torch.Tensor, quality: int) -> torch.Tensor:
    out = torch.stack([baselines.jpeg_roundtrip(img.detach(), quality) for img in batch])
    return batch + (out - batch).detach()


def _hue_ste(batch: torch.Tensor, shift: float) -> torch.Tensor:
    out = TF.adjust_hue(batch.detach().clamp(0, 1), shift)
    return batch + (out - batch).detach()


CHANNEL_KINDS = (
    "identity",
    "gaussian_noise",
    "gaussian_blur",
    "brightness",
    "contrast",
    "gamma",
    "hue",
    "jpeg",
    "jpeg",  # sampled twice as often: the hardest transform to survive
)


def channel_distort(batch: torch.Tensor, rng: np.random.Generator, gen: torch.Generator) -> torch.Tensor:
    """One randomly drawn benchmark distortion, differentiable or STE."""
    x = quantize_ste(batch)
    kind = CHANNEL_KINDS[rng.integers(len(CHANNEL_KINDS))]
    if kind == "identity":
        return x
    if kind == "gaussian_noise":
        sigma = float(rng.uniform(0.0, 0.1))
        return (x + sigma * torch.randn(x.shape, generator=gen)).clamp(0, 1)
    if kind == "gaussian_blur":
        k = int(rng.choice([3, 5, 7]))
        sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
        return TF.gaussian_blur(x, [k, k], [sigma, sigma]).clamp(0, 1)
    if kind == "brightness":
        f = torch.empty(len(x), 1, 1, 1).uniform_(0.5, 1.5, generator=gen)
        return (x * f).clamp(0, 1)
    if kind == "contrast":
        f = torch.empty(len(x), 1, 1, 1).uniform_(0.5, 1.5, generator=gen)
        gray = (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).mean(dim=(1, 2))
        gray = gray[:, None, None, None]
        return ((x - gray) * f + gray).clamp(0, 1)
    if kind == "gamma":
        g = torch.empty(len(x), 1, 1, 1).uniform_(0.5, 1.5, generator=gen)
        return (x.clamp(0, 1) + 1e-4).pow(g).clamp(0, 1)
    if kind == "hue":
        return _hue_ste(x, float(rng.uniform(-0.1, 0.1)))
    if kind == "jpeg":
        return _jpeg_ste(x, int(rng.integers(50, 101)))
    raise AssertionError(kind)


# ----------------------------------------------------------------- training


@dataclass
class CodecTrainConfig:
    bits: int
    image_size: int = 32
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    distortion_weight: float = 2.0
    perceptual_weight: float = 0.5
    ramp_frac: float = 0.3
    psnr_band: tuple[float, float] = (24.0, 27.0)
    holdout: int = 1000
    seed: int = 0
    base_channels: int = 32
    target_acc: float = 99.5
    robust_target: float = 97.0
    min_epochs: int = 8
    convergence_floor: float = 90.0

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["psnr_band"] = list(self.psnr_band)
        return d


@torch.no_grad()
def _holdout_stats(
    codec: Codec, images: torch.Tensor, gen: torch.Generator, probe: int = 256
) -> dict:
    """Clean bit accuracy, PSNR, and a worst-case robustness probe."""
    from .metrics import psnr as psnr_fn

    msgs = (torch.rand((len(images), codec.message_length), generator=gen) < 0.5).float()
    wm = []
    for start in range(0, len(images), 256):
        chunk = images[start : start + 256]
        wm.append((chunk + codec.encoder(chunk, msgs[start : start + 256])).clamp(0, 1))
    wm = torch.cat(wm)
    wmq = torch.round(wm * 255.0) / 255.0

    def acc_of(batch_imgs):
        accs = []
        for start in range(0, len(batch_imgs), 256):
            scores = torch.sigmoid(codec.decoder(batch_imgs[start : start + 256]))
            bits = (scores >= 0.5).float()
            accs.append((bits == msgs[start : start + 256]).float().mean(dim=1))
        return float(torch.cat(accs).mean() * 100.0)

    psnr_mean = float(np.mean([psnr_fn(a, b) for a, b in zip(images, wm)]))
    sub = wmq[:probe]
    noisy = (sub + 0.1 * torch.randn(sub.shape, generator=gen)).clamp(0, 1)
    jpegged = torch.stack([baselines.jpeg_roundtrip(img, 50) for img in sub])
    probe_msgs = msgs[:probe]

    def acc_against(batch_imgs, against):
        scores = torch.sigmoid(codec.decoder(batch_imgs))
        return float(((scores >= 0.5).float() == against).float().mean() * 100.0)

    return {
        "clean_acc": acc_of(wmq),
        "psnr": psnr_mean,
        "robust_noise": acc_against(noisy, probe_msgs),
        "robust_jpeg": acc_against(jpegged, probe_msgs),
    }


def train_codec(clean_images: torch.Tensor, config: CodecTrainConfig) -> Codec:
    """Fit the codec; raises TrainingFailure (with the curve) on non-convergence."""
    if len(clean_images) < 1000:
        raise ValueError(f"need >= 1000 training images, got {len(clean_images)}")
    sizes = {tuple(img.shape) for img in clean_images[:64]}
    if len(sizes) != 1:
        raise ValueError(f"inconsistent image shapes: {sizes}")
    if clean_images.shape[-1] != config.image_size:
        raise ValueError("image size does not match config")

    started = time.perf_counter()
    torch.manual_seed(config.seed)
    encoder = WatermarkEncoder(config.bits, config.image_size, base=config.base_channels)
    decoder = WatermarkDecoder(config.bits, base=config.base_channels)
    codec = Codec(encoder, decoder, config.bits, config.image_size)
    perceptual = RandomFeatureNet(seed=PERCEPTUAL_SEED)
    opt = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()), lr=config.lr
    )

    gen = torch_generator(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    perm = torch.randperm(len(clean_images), generator=gen)
    holdout_n = min(config.holdout, len(clean_images) // 10)
    holdout = clean_images[perm[:holdout_n]]
    train = clean_images[perm[holdout_n:]]

    steps_per_epoch = int(np.ceil(len(train) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    ramp_steps = max(int(config.ramp_frac * total_steps), 1)
    weight_scale = 1.0
    step = 0
    curve: list[dict] = []

    for epoch in range(config.epochs):
        encoder.train()
        decoder.train()
        for idx in iter_batches(len(train), config.batch_size, gen):
            x = train[idx]
            msgs = (torch.rand((len(x), config.bits), generator=gen) < 0.5).float()
            wm = (x + encoder(x, msgs)).clamp(0.0, 1.0)

            logits_clean = decoder(quantize_ste(wm))
            logits_dist = decoder(channel_distort(wm, rng, gen))
            msg_loss = F.binary_cross_entropy_with_logits(
                logits_clean, msgs
            ) + F.binary_cross_entropy_with_logits(logits_dist, msgs)

            ramp = min(step / ramp_steps, 1.0) * weight_scale
            dist_loss = config.distortion_weight * F.mse_loss(
                wm, x
            ) + config.perceptual_weight * perceptual_distance(wm, x, perceptual)
            loss = msg_loss + ramp * dist_loss
            if not torch.isfinite(loss):
                raise TrainingFailure("codec loss diverged", payload={"curve": curve})
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1

        encoder.eval()
        decoder.eval()
        stats = _holdout_stats(codec, holdout, torch_generator(config.seed + 3))
        stats["epoch"] = epoch
        stats["weight_scale"] = weight_scale
        curve.append(stats)

        # after the ramp, nudge the distortion weight to keep PSNR in band
        if step >= ramp_steps:
            lo, hi = config.psnr_band
            if stats["psnr"] < lo:
                weight_scale *= 1.25
            elif stats["psnr"] > hi:
                weight_scale *= 0.8
        done = (
            epoch + 1 >= config.min_epochs
            and stats["clean_acc"] >= config.target_acc
            and min(stats["robust_noise"], stats["robust_jpeg"]) >= config.robust_target
            and config.psnr_band[0] <= stats["psnr"] <= config.psnr_band[1]
        )
        if done:
            break

    final = curve[-1]
    if final["clean_acc"] < config.convergence_floor:
        raise TrainingFailure(
            f"held-out bit accuracy {final['clean_acc']:.2f}% below "
            f"{config.convergence_floor}% after budget",
            payload={"curve": curve},
        )
    codec.manifest = {
        "message_length": config.bits,
        "image_shape": [config.image_size, config.image_size, 3],
        "seed": config.seed,
        "config_hash": config_hash(config.to_dict()),
        "curve": curve,
        "base_channels": config.base_channels,
        "train_seconds": time.perf_counter() - started,
    }
    return codec


def save_codec(codec: Codec, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "codec",
            "message_length": codec.message_length,
            "image_size": codec.image_size,
            "base_channels": codec.manifest.get("base_channels", 32),
            "encoder": codec.encoder.state_dict(),
            "decoder": codec.decoder.state_dict(),
            "manifest": codec.manifest,
        },
        path,
    )
    slim = {k: v for k, v in codec.manifest.items() if k != "curve"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(slim, indent=2))


def load_codec(path: Path | str) -> Codec:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "codec":
        raise ValueError(f"not a codec checkpoint: {path}")
    encoder = WatermarkEncoder(
        blob["message_length"], blob["image_size"], base=blob["base_channels"]
    )
    decoder = WatermarkDecoder(blob["message_length"], base=blob["base_channels"])
    encoder.load_state_dict(blob["encoder"])
    decoder.load_state_dict(blob["decoder"])
    encoder.eval()
    decoder.eval()
    return Codec(
        encoder,
        decoder,
        blob["message_length"],
        blob["image_size"],
        manifest=blob.get("manifest", {}),
    )
