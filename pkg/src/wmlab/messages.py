"""Bit-string messages and the Hamming-distance verification protocol.

Messages travel through every interface as strings of '0'/'1' characters.
Verification passes when the Hamming distance between the expected and the
decoded message is at most (1 - tau) * L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MIN_BITS = 4
MAX_BITS = 64


@dataclass(frozen=True)
class BitMessage:
    """An ordered bit string of length 4..64."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if not (MIN_BITS <= len(self.bits) <= MAX_BITS):
            raise ValueError(
                f"message length must be in [{MIN_BITS}, {MAX_BITS}], got {len(self.bits)}"
            )
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("message bits must all be 0 or 1")

    @classmethod
    def parse(cls, text: str) -> "BitMessage":
        text = text.strip()
        if set(text) - {"0", "1"}:
            raise ValueError(f"message must contain only '0'/'1' characters: {text!r}")
        return cls(tuple(int(c) for c in text))

    @classmethod
    def random(cls, length: int, rng: np.random.Generator) -> "BitMessage":
        return cls(tuple(int(b) for b in rng.integers(0, 2, size=length)))

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float32)

    def complement(self) -> "BitMessage":
        return BitMessage(tuple(1 - b for b in self.bits))


@dataclass(frozen=True)
class VerificationPolicy:
    """Pass condition: HD(m, m_s) <= (1 - tau) * L, with exact integer HD.

    The comparison is non-strict at integer boundaries (tau=0.8, L=10 admits
    HD=2), so the float threshold carries a tiny slack to absorb rounding of
    (1 - tau) * L.
    """

    tau: float

    _SLACK = 1e-9

    def __post_init__(self):
        if not (0.5 < self.tau <= 1.0):
            raise ValueError(f"tau must lie in (0.5, 1.0], got {self.tau}")

    def max_hamming(self, length: int) -> float:
        return (1.0 - self.tau) * length + self._SLACK


@dataclass(frozen=True)
class VerifyResult:
    passed: bool
    hamming: int
    bit_acc: float

    def to_dict(self) -> dict:
        return {"pass": self.passed, "hd": self.hamming, "bit_acc": self.bit_acc}


def _check_same_length(m: BitMessage, m_other: BitMessage) -> None:
    if len(m) != len(m_other):
        raise ValueError(f"message lengths differ: {len(m)} vs {len(m_other)}")


def hamming_distance(m: BitMessage, m_other: BitMessage) -> int:
    _check_same_length(m, m_other)
    return sum(a != b for a, b in zip(m.bits, m_other.bits))


def bit_accuracy(m: BitMessage, m_other: BitMessage) -> float:
    """Percentage of matching bits: (L - HD) / L * 100."""
    _check_same_length(m, m_other)
    hd = hamming_distance(m, m_other)
    return (len(m) - hd) / len(m) * 100.0


def verify(m: BitMessage, m_s: BitMessage, policy: VerificationPolicy) -> VerifyResult:
    """Check a decoded message against the expected one under a threshold policy."""
    hd = hamming_distance(m, m_s)
    return VerifyResult(
        passed=hd <= policy.max_hamming(len(m)),
        hamming=hd,
        bit_acc=bit_accuracy(m, m_s),
    )


def random_match_pass_probability(length: int, tau: float) -> float:
    """Exact probability that a uniformly random message passes verification.

    P[Binomial(L, 1/2) <= floor((1 - tau) * L)] computed with exact integer
    arithmetic before the final division.
    """
    policy = VerificationPolicy(tau)
    max_hd = math.floor(policy.max_hamming(length))
    total = sum(math.comb(length, k) for k in range(0, max_hd + 1))
    return total / 2**length
