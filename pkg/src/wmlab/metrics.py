"""Quality and attack-success metrics: PSNR, SSIM, a small-scale Fréchet
distance on learned embeddings, cosine embedding similarity, and the bundled
per-run MetricsReport.

All functions here are pure; randomness never enters a metric.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .features import FeatureExtractor, embed_images, extractor_hash
from .messages import BitMessage, bit_accuracy, hamming_distance
from .utils import config_hash

PSNR_CAP_DB = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100 dB."""
    _check_pair(a, b)
    mse = (a.double() - b.double()).square().mean().item()
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(window: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    half = (window - 1) / 2.0
    coords = torch.arange(window, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean structural similarity over 11x11 Gaussian windows and channels."""
    _check_pair(a, b)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    n, c, h, w = a.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {_SSIM_WINDOW}")
    a = a.double()
    b = b.double()
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA, a.dtype)
    kernel = kernel.expand(c, 1, _SSIM_WINDOW, _SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return score.mean().item()


def frechet_from_embeddings(e1: torch.Tensor, e2: torch.Tensor) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) with shrinkage 1e-6 I.

    The matrix square root uses symmetric eigendecompositions; negative
    eigenvalues from roundoff are clipped at zero.
    """
    if e1.numel() == 0 or e2.numel() == 0:
        raise ValueError("empty embedding set")
    x = e1.double().numpy()
    y = e2.double().numpy()
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    d = x.shape[1]
    eye = np.eye(d) * 1e-6
    s1 = np.cov(x, rowvar=False, bias=False).reshape(d, d) + eye
    s2 = np.cov(y, rowvar=False, bias=False).reshape(d, d) + eye

    # sqrtm(S1) via eigh, then Tr sqrtm(S1^1/2 S2 S1^1/2)
    w, v = np.linalg.eigh(s1)
    root1 = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = root1 @ s2 @ root1
    w2 = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(w2, 0.0, None)).sum()
    fd = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def frechet_distance(set_a: torch.Tensor, set_b: torch.Tensor, extractor: FeatureExtractor) -> float:
    """Fréchet distance between two image sets under the extractor embedding."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("empty image set")
    return frechet_from_embeddings(embed_images(extractor, set_a), embed_images(extractor, set_b))


def embedding_similarity(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> float:
    """Cosine similarity of extractor embeddings, in [-1, 1]."""
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    ea = embed_images(extractor, a)
    eb = embed_images(extractor, b)
    na, nb = ea.norm(dim=1), eb.norm(dim=1)
    if (na < 1e-12).any() or (nb < 1e-12).any():
        raise ValueError("zero-norm embedding; extractor collapsed on this input")
    return (F.cosine_similarity(ea, eb, dim=1)).mean().item()


@dataclass
class MetricsReport:
    """One attack run's measurement bundle. Unavailable fields are None and
    the reason is recorded in `notes`."""

    bit_acc: float | None
    hd_mean: float | None
    fid_proxy: float | None
    psnr_mean: float | None
    ssim_mean: float | None
    emb_sim_mean: float | None
    n_pairs: int
    n_ref: int
    n_cand: int
    extractor_hash: str
    config_hash: str
    notes: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path | str) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def decode_stats(codec, images: torch.Tensor, message: BitMessage) -> tuple[float, float]:
    """Mean bit accuracy (%) and mean Hamming distance of decoded messages."""
    accs, hds = [], []
    for start in range(0, len(images), 256):
        for decoded in codec.decode_batch(images[start : start + 256]):
            accs.append(bit_accuracy(message, decoded))
            hds.append(hamming_distance(message, decoded))
    return float(np.mean(accs)), float(np.mean(hds))


def evaluate_sets(
    reference: torch.Tensor,
    candidate: torch.Tensor,
    codec=None,
    message: BitMessage | None = None,
    extractor: FeatureExtractor | None = None,
    config: dict | None = None,
) -> MetricsReport:
    """Full metric bundle between a reference and a candidate image set.

    PSNR/SSIM/embedding similarity are paired (require equal counts);
    unequal counts leave them None with a note. Fréchet is unpaired.
    """
    notes: dict = {}
    n_ref, n_cand = len(reference), len(candidate)
    if n_ref == 0 or n_cand == 0:
        raise ValueError("empty image set")

    bit_acc = hd_mean = None
    if codec is not None and message is not None:
        bit_acc, hd_mean = decode_stats(codec, candidate, message)
    else:
        notes["bit_acc"] = "no codec/message supplied"

    fid_proxy = psnr_mean = ssim_mean = emb_sim_mean = None
    if extractor is not None:
        fid_proxy = frechet_distance(reference, candidate, extractor)
        ext_hash = extractor_hash(extractor)
    else:
        notes["fid_proxy"] = "no extractor supplied"
        ext_hash = ""

    n_pairs = 0
    if n_ref == n_cand:
        n_pairs = n_ref
        psnr_mean = float(np.mean([psnr(r, c) for r, c in zip(reference, candidate)]))
        ssim_mean = float(np.mean([ssim(r, c) for r, c in zip(reference, candidate)]))
        if extractor is not None:
            emb_sim_mean = embedding_similarity(reference, candidate, extractor)
    else:
        notes["paired"] = f"unpaired sets ({n_ref} vs {n_cand}); PSNR/SSIM/emb_sim skipped"

    return MetricsReport(
        bit_acc=bit_acc,
        hd_mean=hd_mean,
        fid_proxy=fid_proxy,
        psnr_mean=psnr_mean,
        ssim_mean=ssim_mean,
        emb_sim_mean=emb_sim_mean,
        n_pairs=n_pairs,
        n_ref=n_ref,
        n_cand=n_cand,
        extractor_hash=ext_hash,
        config_hash=config_hash(config or {}),
        notes=notes,
    )
