"""Seed derivation and deterministic byte streams.

A 256-bit master seed fans out into per-stage seeds through labeled
SHA-256 derivation, so changing how one stage draws randomness can never
reshuffle another stage's. Simulation noise uses numpy generators seeded
from the derived bytes. Constructions that both parties must reproduce
byte-exactly from shared OTP material (factor graphs, Toeplitz rows) use
the counter-mode ``HashStream`` instead; its byte-level contract is
documented in the README.
"""

import hashlib

import numpy as np

SEED_BYTES = 32


def parse_seed(text: str) -> bytes:
    """Parse a hex seed string, left-padding with zeros to 32 bytes."""
    raw = bytes.fromhex(text)
    if len(raw) > SEED_BYTES:
        raise ValueError(f"seed longer than {SEED_BYTES} bytes")
    return raw.rjust(SEED_BYTES, b"\x00")


def derive_seed(master: bytes, label: str) -> bytes:
    """Derive a stage seed as SHA-256(master || '/' || label)."""
    return hashlib.sha256(master + b"/" + label.encode("utf-8")).digest()


def np_rng(seed: bytes) -> np.random.Generator:
    """Numpy generator seeded from a 32-byte seed."""
    return np.random.Generator(np.random.PCG64(int.from_bytes(seed, "big")))


class HashStream:
    """Counter-mode SHA-256 byte stream: block k = SHA-256(seed || k as u64 BE).

    The stream, the big-endian u64 draws and the rejection sampling in
    ``below`` are part of the cross-party contract: two stores seeded with
    the same OTP bytes must expand to identical graphs and hash rows.
    """

    def __init__(self, seed: bytes):
        if len(seed) != SEED_BYTES:
            raise ValueError("HashStream seed must be exactly 32 bytes")
        self._seed = seed
        self._counter = 0
        self._buf = bytearray()

    def take(self, n: int) -> bytes:
        while len(self._buf) < n:
            block = hashlib.sha256(
                self._seed + self._counter.to_bytes(8, "big")
            ).digest()
            self._counter += 1
            self._buf.extend(block)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free by rejection on u64 draws."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (2**64 // n) * n
        while True:
            u = self.u64()
            if u < limit:
                return u % n

    def bits(self, n: int) -> np.ndarray:
        """Next n bits of the stream, MSB-first within each byte."""
        nbytes = (n + 7) // 8
        raw = np.frombuffer(self.take(nbytes), dtype=np.uint8)
        return np.unpackbits(raw)[:n]
