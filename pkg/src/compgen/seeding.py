"""Seed splitting: each subsystem gets its own stream derived from the master seed.

The rule is ``sha256(f"{master}/{label}")`` truncated to 64 bits, so adding a
new label never changes the seeds handed to existing ones.
"""

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))


def rng_digest(rng: np.random.Generator) -> str:
    state = repr(sorted(rng.bit_generator.state.items()))
    return hashlib.sha256(state.encode()).hexdigest()[:16]
