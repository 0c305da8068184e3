"""Shared helpers: seeding, device selection, hashing, JSON IO."""

from __future__ import annotations

import hashlib
import json
import os
import random
from pathlib import Path

import numpy as np
import torch

DEVICE_ENV_VAR = "WMLAB_DEVICE"


def resolve_device(override: str | None = None) -> torch.device:
    """Device used for all model work; selectable only via WMLAB_DEVICE."""
    name = override or os.environ.get(DEVICE_ENV_VAR, "")
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)


def torch_generator(seed: int, device: torch.device | str = "cpu") -> torch.Generator:
    g = torch.Generator(device=str(device))
    g.manual_seed(int(seed) % (2**63 - 1))
    return g


def derive_seed(master: int, *salt) -> int:
    """Stable child seed from a master seed and arbitrary salt values."""
    h = hashlib.sha256(repr((int(master),) + tuple(map(str, salt))).encode()).digest()
    return int.from_bytes(h[:8], "big") % (2**31 - 1)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_array(arr: np.ndarray) -> str:
    meta = f"{arr.dtype}|{arr.shape}|".encode()
    return sha256_bytes(meta + np.ascontiguousarray(arr).tobytes())


def config_hash(obj) -> str:
    """Hash of any JSON-serializable config; stable across key order."""
    return sha256_bytes(json.dumps(obj, sort_keys=True, default=str).encode())[:16]


def write_json(path: Path | str, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: Path | str):
    with open(path) as f:
        return json.load(f)


def append_jsonl(path: Path | str, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path | str) -> list[dict]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


class TrainingFailure(RuntimeError):
    """A training run that did not meet its convergence contract.

    Carries whatever diagnostics the stage collected (loss curve, partial
    checkpoints) so callers can report instead of silently retrying.
    """

    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = payload or {}
