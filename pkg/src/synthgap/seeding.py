"""Seed derivation.

Every random stream in the package is seeded by ``derive_seed(root, *path)``:
the root seed and the path components are joined with ``/`` and hashed with
BLAKE2b (8-byte digest). The result is a 64-bit unsigned integer. Because the
path names the consumer (``"sample", "train", 17`` or ``"epoch", 3``), adding a
new consumer never shifts the values seen by existing ones.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *path) -> int:
    key = "/".join([str(int(root))] + [str(p) for p in path])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(root: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *path))
