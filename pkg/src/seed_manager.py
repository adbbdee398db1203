import hashlib
import json
from typing import Any

import numpy as np

# Try to use PyNaCl's BLAKE2b; hashlib's BLAKE2b gives identical digests
try:
    from nacl.encoding import RawEncoder
    from nacl.hash import blake2b as _nacl_blake2b
    NACL_AVAILABLE = True
except ImportError:
    NACL_AVAILABLE = False


SEED_BYTES = 8


def blake2b_digest(data: bytes, digest_size: int = 32) -> bytes:
    if NACL_AVAILABLE:
        return _nacl_blake2b(data, digest_size=digest_size, encoder=RawEncoder)
    return hashlib.blake2b(data, digest_size=digest_size).digest()


def content_digest(data: Any) -> str:
    """Hex BLAKE2b digest of bytes, text, or any JSON-serializable value"""
    if isinstance(data, bytes):
        payload = data
    elif isinstance(data, str):
        payload = data.encode("utf-8")
    else:
        payload = json.dumps(data, sort_keys=True, default=str).encode("utf-8")
    return blake2b_digest(payload).hex()


def array_digest(array: np.ndarray) -> str:
    arr = np.ascontiguousarray(array, dtype=float)
    header = f"{arr.shape}".encode("ascii")
    return blake2b_digest(header + arr.tobytes()).hex()


def derive_seed(master_seed: int, *labels: Any) -> int:
    """Derive an independent 64-bit stream seed from a master seed and labels.

    Every (experiment, N, repeat) tuple hashes to its own seed, so parallel
    runs never share a stream and reruns reproduce bit for bit.
    """
    if master_seed < 0 or master_seed >= 2 ** 64:
        raise ValueError(f"Master seed must be an unsigned 64-bit integer, got {master_seed}")
    key = json.dumps([int(master_seed)] + [str(label) for label in labels])
    return int.from_bytes(blake2b_digest(key.encode("utf-8"), SEED_BYTES), "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
