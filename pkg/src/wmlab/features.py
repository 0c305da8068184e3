"""Pluggable feature networks: the embedding backbone behind the Fréchet
proxy and embedding similarity, plus a frozen random-feature net used as a
cheap perceptual distance during training.

Both expose .features(x) -> list of activation maps so perceptual_distance
accepts either one.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datasets import NUM_FAMILIES, iter_batches
from .utils import sha256_bytes, torch_generator

EMBED_DIM = 64


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class FeatureExtractor(nn.Module):
    """Small conv classifier; its penultimate embedding feeds the metrics."""

    def __init__(self, n_classes: int = NUM_FAMILIES, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        chans = (32, 64, 128)
        layers: list[nn.Module] = []
        prev = 3
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), _gn(ch), nn.SiLU()]
            prev = ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, embed_dim)
        self.classifier = nn.Linear(embed_dim, n_classes)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for layer in self.body:
            x = layer(x)
            if isinstance(layer, nn.SiLU):
                feats.append(x)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = self.body(x)
        h = h.mean(dim=(2, 3))
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x))


class RandomFeatureNet(nn.Module):
    """Frozen, seeded conv stack; a deterministic stand-in perceptual metric."""

    def __init__(self, seed: int = 0, chans: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        gen = torch_generator(seed)
        layers = []
        prev = 3
        for ch in chans:
            conv = nn.Conv2d(prev, ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / np.sqrt(prev * 9)
                )
                conv.bias.zero_()
            layers.append(conv)
            prev = ch
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.silu(conv(x))
            feats.append(x)
        return feats


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, net: nn.Module) -> torch.Tensor:
    """Mean squared distance between normalized feature maps, summed over layers."""
    fa, fb = net.features(a), net.features(b)
    total = a.new_zeros(())
    for xa, xb in zip(fa, fb):
        xa = xa / (xa.square().mean(dim=1, keepdim=True).sqrt() + 1e-6)
        xb = xb / (xb.square().mean(dim=1, keepdim=True).sqrt() + 1e-6)
        total = total + (xa - xb).square().mean()
    return total


def train_feature_extractor(
    images: torch.Tensor,
    labels: np.ndarray,
    epochs: int = 5,
    batch_size: int = 128,
    lr: float = 2e-3,
    seed: int = 0,
) -> FeatureExtractor:
    """Fit the classifier backbone on labeled auxiliary images."""
    torch.manual_seed(seed)
    model = FeatureExtractor()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    target = torch.from_numpy(labels).long()
    gen = torch_generator(seed + 1)
    model.train()
    for _ in range(epochs):
        for idx in iter_batches(len(images), batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(model(images[idx]), target[idx])
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def classifier_accuracy(model: FeatureExtractor, images: torch.Tensor, labels: np.ndarray) -> float:
    model.eval()
    preds = []
    for start in range(0, len(images), 256):
        preds.append(model(images[start : start + 256]).argmax(dim=1))
    return (torch.cat(preds) == torch.from_numpy(labels).long()).float().mean().item()


@torch.no_grad()
def embed_images(model: FeatureExtractor, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    outs = [model.embed(images[s : s + batch_size]) for s in range(0, len(images), batch_size)]
    return torch.cat(outs)


def extractor_hash(model: nn.Module) -> str:
    buf = io.BytesIO()
    for key, value in sorted(model.state_dict().items()):
        buf.write(key.encode())
        buf.write(value.detach().cpu().numpy().tobytes())
    return sha256_bytes(buf.getvalue())[:16]


def save_extractor(model: FeatureExtractor, path: Path | str) -> None:
    torch.save(
        {
            "kind": "feature_extractor",
            "n_classes": model.n_classes,
            "embed_dim": model.embed_dim,
            "state": model.state_dict(),
        },
        path,
    )


def load_extractor(path: Path | str) -> FeatureExtractor:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "feature_extractor":
        raise ValueError(f"not a feature extractor checkpoint: {path}")
    model = FeatureExtractor(n_classes=blob["n_classes"], embed_dim=blob["embed_dim"])
    model.load_state_dict(blob["state"])
    model.eval()
    return model
