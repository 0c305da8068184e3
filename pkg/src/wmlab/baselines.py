"""Comparison attacks: randomized image transformations, regeneration through
the diffusion purifier, and a small autoencoder regeneration baseline.

Transform parameter ranges are fixed by the benchmark convention:
brightness/contrast/gamma factor in [0.5, 1.5], hue shift in [-0.1, 0.1],
blur kernel in {3, 5, 7}, noise sigma in [0, 0.1], JPEG quality in [50, 100],
center-crop side in [half, full]. JPEG goes through real codec bytes.

Cropped outputs are resized back to codec resolution (bilinear) so they can
be decoded at all; their pixel metrics are reported as not-applicable.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from torch import nn

from .datasets import iter_batches
from .messages import BitMessage
from .purifier import DenoiserModel, PurifyConfig, purify
from .utils import torch_generator

TRANSFORM_KINDS = (
    "brightness",
    "contrast",
    "gamma",
    "hue",
    "gaussian_blur",
    "gaussian_noise",
    "jpeg",
    "center_crop",
)

# crop never preserves the watermark at benchmark scale; every other
# transform is expected to leave it decodable
CROP_KINDS = ("center_crop",)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind: {self.kind!r}")


def sample_params(kind: str, rng: np.random.Generator, image_size: int) -> dict:
    """Draw one parameter setting from the kind's fixed range."""
    if kind in ("brightness", "contrast", "gamma"):
        return {"factor": float(rng.uniform(0.5, 1.5))}
    if kind == "hue":
        return {"shift": float(rng.uniform(-0.1, 0.1))}
    if kind == "gaussian_blur":
        return {"kernel": int(rng.choice([3, 5, 7]))}
    if kind == "gaussian_noise":
        return {"sigma": float(rng.uniform(0.0, 0.1)), "noise_seed": int(rng.integers(2**31))}
    if kind == "jpeg":
        return {"quality": int(rng.integers(50, 101))}
    if kind == "center_crop":
        return {"side": int(rng.integers(image_size // 2, image_size + 1))}
    raise ValueError(f"unknown transform kind: {kind!r}")


def jpeg_roundtrip(image: torch.Tensor, quality: int) -> torch.Tensor:
    """Encode through the real JPEG codec and decode back; deterministic."""
    arr = np.round(image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(back).permute(2, 0, 1)


def _blur_sigma(kernel: int) -> float:
    # torchvision's default kernel->sigma mapping
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


def apply_transform_params(image: torch.Tensor, kind: str, params: dict) -> torch.Tensor:
    """Apply one transform with explicit parameters. Pure given the params."""
    if image.dim() != 3:
        raise ValueError(f"expected one (C,H,W) image, got {tuple(image.shape)}")
    if kind == "brightness":
        out = image * params["factor"]
    elif kind == "contrast":
        gray = (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]).mean()
        out = (image - gray) * params["factor"] + gray
    elif kind == "gamma":
        out = image.clamp(0, 1).pow(params["factor"])
    elif kind == "hue":
        out = TF.adjust_hue(image.clamp(0, 1), params["shift"])
    elif kind == "gaussian_blur":
        k = params["kernel"]
        out = TF.gaussian_blur(image, [k, k], [_blur_sigma(k)] * 2)
    elif kind == "gaussian_noise":
        gen = torch_generator(params["noise_seed"])
        out = image + params["sigma"] * torch.randn(image.shape, generator=gen)
    elif kind == "jpeg":
        out = jpeg_roundtrip(image, params["quality"])
    elif kind == "center_crop":
        side = params["side"]
        size = image.shape[-1]
        cropped = TF.center_crop(image, [side, side])
        out = F.interpolate(
            cropped.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
        ).squeeze(0)
    else:
        raise ValueError(f"unknown transform kind: {kind!r}")
    return out.clamp(0.0, 1.0)


def apply_transform(image: torch.Tensor, spec: TransformSpec, rng: np.random.Generator) -> torch.Tensor:
    """Apply one transform with parameters sampled from its declared range."""
    return apply_transform_params(image, spec.kind, sample_params(spec.kind, rng, image.shape[-1]))


# --------------------------------------------------------------- autoencoder


class ConvAutoencoder(nn.Module):
    """Compressive conv autoencoder; the bottleneck discards fine residuals."""

    def __init__(self, base: int = 32, latent: int = 128):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base * 2, latent, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(latent, base * 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(base * 2, base, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(base, 3, 4, stride=2, padding=1),
        )
        self.trained = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(self.encoder(x)))


def train_autoencoder(
    train_images: torch.Tensor,
    epochs: int = 10,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    base: int = 32,
    latent: int = 128,
) -> ConvAutoencoder:
    torch.manual_seed(seed)
    model = ConvAutoencoder(base=base, latent=latent)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch_generator(seed + 1)
    for _ in range(epochs):
        for idx in iter_batches(len(train_images), batch_size, gen):
            batch = train_images[idx]
            loss = F.mse_loss(model(batch), batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    model.trained = True
    return model


@torch.no_grad()
def autoencoder_reconstruct(model: ConvAutoencoder, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    if not model.trained:
        raise ValueError("autoencoder has not been trained")
    outs = [model(images[s : s + batch_size]).clamp(0, 1) for s in range(0, len(images), batch_size)]
    return torch.cat(outs)


# --------------------------------------------------------------------- suite

TRANSFORM_DRAWS = 5


def _transform_set(
    images: torch.Tensor, kind: str, rng: np.random.Generator
) -> torch.Tensor:
    return torch.stack([apply_transform(img, TransformSpec(kind), rng) for img in images])


def _row(
    name: str,
    candidates: torch.Tensor | list[torch.Tensor],
    clean: torch.Tensor,
    codec,
    message: BitMessage,
    extractor,
    pixel_metrics: bool = True,
) -> dict:
    """One report row; `candidates` may hold several random draws to average."""
    from .metrics import decode_stats, embedding_similarity, frechet_distance, psnr, ssim

    draws = candidates if isinstance(candidates, list) else [candidates]
    row = {
        "name": name,
        "bit_acc_removal": float(np.mean([decode_stats(codec, d, message)[0] for d in draws])),
    }
    if pixel_metrics:
        row.update(
            fid_proxy=float(np.mean([frechet_distance(clean, d, extractor) for d in draws])),
            psnr=float(
                np.mean([psnr(a, b) for d in draws for a, b in zip(clean, d)])
            ),
            ssim=float(
                np.mean([ssim(a, b) for d in draws for a, b in zip(clean, d)])
            ),
            emb_sim=float(np.mean([embedding_similarity(clean, d, extractor) for d in draws])),
        )
    else:
        row.update(
            fid_proxy=None,
            psnr=None,
            ssim=None,
            emb_sim=None,
            not_applicable="crop discards pixel alignment",
        )
    return row


def run_baseline_suite(
    codec,
    watermarked: torch.Tensor,
    clean_reference: torch.Tensor,
    message: BitMessage,
    extractor,
    denoiser: DenoiserModel | None = None,
    autoencoder: ConvAutoencoder | None = None,
    suite: str = "full",
    seed: int = 0,
    draws: int = TRANSFORM_DRAWS,
) -> dict:
    """One report row per baseline: removal column decodes transformed
    watermarked images, forge column decodes transformed clean images."""
    from .metrics import decode_stats

    if suite not in ("full", "transforms", "regen"):
        raise ValueError(f"unknown suite: {suite!r}")
    if len(watermarked) == 0 or len(clean_reference) == 0:
        raise ValueError("empty image set")
    if len(watermarked) != len(clean_reference):
        raise ValueError("watermarked and clean sets must pair up")

    rows = []
    rng = np.random.default_rng(seed)
    if suite in ("full", "transforms"):
        for kind in TRANSFORM_KINDS:
            wm_draws = [_transform_set(watermarked, kind, rng) for _ in range(draws)]
            clean_draws = [_transform_set(clean_reference, kind, rng) for _ in range(draws)]
            row = _row(
                kind,
                wm_draws,
                clean_reference,
                codec,
                message,
                extractor,
                pixel_metrics=kind not in CROP_KINDS,
            )
            row["bit_acc_forge"] = float(
                np.mean([decode_stats(codec, c, message)[0] for c in clean_draws])
            )
            rows.append(row)
    if suite in ("full", "regen"):
        if denoiser is not None:
            for name, cfg in (
                ("regen_strong", PurifyConfig(noise_scale=150, sample_steps=30)),
                ("regen_weak", PurifyConfig(noise_scale=10, sample_steps=200)),
            ):
                wm_out = purify(denoiser, watermarked, cfg, seed=int(rng.integers(2**31))).images
                clean_out = purify(denoiser, clean_reference, cfg, seed=int(rng.integers(2**31))).images
                row = _row(name, wm_out, clean_reference, codec, message, extractor)
                row["bit_acc_forge"] = decode_stats(codec, clean_out, message)[0]
                row["config"] = {"noise_scale": cfg.noise_scale, "sample_steps": cfg.sample_steps}
                rows.append(row)
        if autoencoder is not None:
            wm_out = autoencoder_reconstruct(autoencoder, watermarked)
            clean_out = autoencoder_reconstruct(autoencoder, clean_reference)
            row = _row("autoencoder", wm_out, clean_reference, codec, message, extractor)
            row["bit_acc_forge"] = decode_stats(codec, clean_out, message)[0]
            rows.append(row)
    return {
        "suite": suite,
        "n_images": len(watermarked),
        "draws": draws,
        "seed": seed,
        "rows": rows,
    }
