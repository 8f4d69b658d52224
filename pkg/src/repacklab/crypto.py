"""Trigger hashes and the two section ciphers used by protected code."""

from __future__ import annotations

import hashlib
import struct
from functools import lru_cache

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .isa import MASK32, HashAlg, xor_crypt

ZERO_NONCE = bytes(16)

__all__ = ["le32", "trigger_hash", "derive_key", "aes_ctr", "xor_crypt"]


def le32(v: int) -> bytes:
    return struct.pack("<I", v & MASK32)


def trigger_hash(v: int, salt: bytes = b"", alg: HashAlg | str = HashAlg.SHA1) -> int:
    """First four bytes (little-endian) of ``alg(salt || le32(v))``."""
    if isinstance(alg, str):
        alg = HashAlg[alg.upper()]
    name = "sha1" if alg == HashAlg.SHA1 else "sha256"
    return int.from_bytes(hashlib.new(name, bytes(salt) + le32(v)).digest()[:4], "little")


def derive_key(v: int) -> bytes:
    """AES-128 key for a bomb payload guarded by constant ``v``."""
    return hashlib.sha256(le32(v)).digest()[:16]


@lru_cache(maxsize=4096)
def aes_ctr(data: bytes, key: bytes) -> bytes:
    """AES-128-CTR with an all-zero initial counter block (encrypt == decrypt)."""
    enc = Cipher(algorithms.AES(key), modes.CTR(ZERO_NONCE)).encryptor()
    return enc.update(data) + enc.finalize()
