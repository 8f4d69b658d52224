"""Miniature signed app container.

A bundle is an ordered list of named sections plus a manifest of SHA-256
digests and an optional Ed25519 signature block.  The byte layout is
documented in ``docs/bundle-format.md``; every integer is little-endian.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

MAGIC = b"RPKG"
FORMAT_VERSION = 1
DEFAULT_PREFIX = 100


class FormatError(ValueError):
    """Raised when bundle bytes cannot be parsed."""


class SectionKind(enum.IntEnum):
    CODE = 0
    NATIVE = 1
    RESOURCE = 2
    META = 3


class ChecksumMode(enum.IntEnum):
    FIXED = 0
    BUGGY = 1


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _check_name(name: str) -> None:
    if not name or not name.isascii() or "/" in name or "\\" in name:
        raise ValueError(f"invalid section name {name!r}")


@dataclass(frozen=True)
class Section:
    name: str
    kind: SectionKind
    data: bytes

    def __post_init__(self) -> None:
        _check_name(self.name)
        object.__setattr__(self, "kind", SectionKind(self.kind))
        object.__setattr__(self, "data", bytes(self.data))


@dataclass(frozen=True)
class SignatureBlock:
    signer_public_key: bytes  # raw 32 bytes
    signature: bytes  # raw 64 bytes


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 key pair, always derived from a 32-byte seed."""

    seed: bytes

    def __post_init__(self) -> None:
        if len(self.seed) != 32:
            raise ValueError("seed must be 32 bytes")

    @classmethod
    def from_int(cls, n: int) -> "KeyPair":
        return cls(sha256(b"repacklab-key" + struct.pack("<q", n)))

    @property
    def _private(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.seed)

    @property
    def public_key(self) -> bytes:
        return self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def signer_digest32(public_key: Optional[bytes]) -> int:
    """Truncated signer identity, as exposed to programs by ``SYS GET_SIGNER_DIGEST32``."""
    if public_key is None:
        return 0
    return int.from_bytes(sha256(public_key)[:4], "little")


@dataclass(frozen=True)
class Bundle:
    sections: tuple[Section, ...] = ()
    manifest: Mapping[str, bytes] = field(default_factory=dict)
    signature: Optional[SignatureBlock] = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "sections", tuple(self.sections))
        object.__setattr__(self, "manifest", dict(self.manifest))
        names = [s.name for s in self.sections]
        if len(set(names)) != len(names):
            raise ValueError("duplicate section names")

    @classmethod
    def build(cls, sections: Iterable[Section]) -> "Bundle":
        """Unsigned bundle with a manifest computed from ``sections``."""
        sections = tuple(sections)
        return cls(sections, compute_manifest(sections))

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.sections]

    def get(self, name: str) -> Optional[Section]:
        for s in self.sections:
            if s.name == name:
                return s
        return None

    def section(self, name: str) -> Section:
        s = self.get(name)
        if s is None:
            raise KeyError(f"no section named {name!r}")
        return s

    def data(self, name: str) -> bytes:
        return self.section(name).data

    def with_section(self, section: Section) -> "Bundle":
        """Replace (or append) a section; manifest and signature are left as they were."""
        out = list(self.sections)
        for i, s in enumerate(out):
            if s.name == section.name:
                out[i] = section
                break
        else:
            out.append(section)
        return replace(self, sections=tuple(out))

    def without_section(self, name: str) -> "Bundle":
        return replace(self, sections=tuple(s for s in self.sections if s.name != name))

    def unsigned(self) -> "Bundle":
        return replace(self, signature=None)

    @property
    def signer_public_key(self) -> Optional[bytes]:
        return self.signature.signer_public_key if self.signature else None


def compute_manifest(sections: Iterable[Section]) -> dict[str, bytes]:
    return {s.name: sha256(s.data) for s in sections}


# -- serialization ----------------------------------------------------------


def _pack_name(name: str) -> bytes:
    raw = name.encode("ascii")
    return struct.pack("<H", len(raw)) + raw


def _signed_part(bundle: Bundle) -> bytes:
    out = [MAGIC, struct.pack("<HI", bundle.format_version, len(bundle.sections))]
    for s in bundle.sections:
        out.append(_pack_name(s.name))
        out.append(struct.pack("<BI", int(s.kind), len(s.data)))
        out.append(s.data)
    out.append(struct.pack("<I", len(bundle.manifest)))
    for name in sorted(bundle.manifest):
        digest = bundle.manifest[name]
        if len(digest) != 32:
            raise ValueError(f"manifest digest for {name!r} is not 32 bytes")
        out.append(_pack_name(name))
        out.append(digest)
    return b"".join(out)


def serialize(bundle: Bundle) -> bytes:
    body = _signed_part(bundle)
    if bundle.signature is None:
        return body + b"\x00"
    sig = bundle.signature
    return body + b"\x01" + sig.signer_public_key + sig.signature


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated bundle at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("ascii")
        except UnicodeDecodeError as err:
            raise FormatError("non-ASCII section name") from err


def deserialize(data: bytes) -> Bundle:
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise FormatError("bad magic")
    version, count = r.unpack("<HI")
    sections = []
    try:
        for _ in range(count):
            name = r.name()
            kind, size = r.unpack("<BI")
            sections.append(Section(name, SectionKind(kind), r.take(size)))
        (mcount,) = r.unpack("<I")
        manifest = {}
        for _ in range(mcount):
            name = r.name()
            manifest[name] = r.take(32)
        (flag,) = r.unpack("<B")
        signature = None
        if flag == 1:
            signature = SignatureBlock(r.take(32), r.take(64))
        elif flag != 0:
            raise FormatError("bad signature flag")
    except ValueError as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(str(err)) from err
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after bundle")
    return Bundle(tuple(sections), manifest, signature, version)


# -- signing ----------------------------------------------------------------


def sign(bundle: Bundle, key: KeyPair) -> Bundle:
    unsigned = Bundle(bundle.sections, compute_manifest(bundle.sections), None, bundle.format_version)
    sig = key.sign(_signed_part(unsigned))
    return replace(unsigned, signature=SignatureBlock(key.public_key, sig))


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = "ok"  # ok | no-signature | digest-mismatch | bad-signature
    section: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


def verify(bundle: Bundle) -> Verdict:
    if bundle.signature is None:
        return Verdict(False, "no-signature")
    names = bundle.names
    for s in bundle.sections:
        if bundle.manifest.get(s.name) != sha256(s.data):
            return Verdict(False, "digest-mismatch", s.name)
    for name in bundle.manifest:
        if name not in names:
            return Verdict(False, "digest-mismatch", name)
    sig = bundle.signature
    if not verify_signature(sig.signer_public_key, sig.signature, _signed_part(bundle)):
        return Verdict(False, "bad-signature")
    return Verdict(True)


# -- the 4-byte XOR-fold checksum --------------------------------------------


def xor_fold(data: bytes) -> list[int]:
    acc = [0, 0, 0, 0]
    for i, b in enumerate(data):
        acc[i & 3] ^= b
    return acc


def combine_fold(acc: list[int], mode: ChecksumMode) -> int:
    if mode == ChecksumMode.BUGGY:
        # signed char accumulators, promoted to int before shifting
        acc = [a - 256 if a >= 0x80 else a for a in acc]
    return (acc[0] + (acc[1] << 8) + (acc[2] << 16) + (acc[3] << 24)) & 0xFFFFFFFF


def checksum32(data: bytes, count: int, mode: ChecksumMode = ChecksumMode.FIXED, offset: int = 0) -> int:
    if offset < 0 or count < 0 or offset + count > len(data):
        raise ValueError(f"range [{offset}, {offset + count}) outside {len(data)} bytes")
    return combine_fold(xor_fold(data[offset:offset + count]), ChecksumMode(mode))


def section_prefix_checksum32(bundle: Bundle, name: str, count: int = DEFAULT_PREFIX,
                              mode: ChecksumMode = ChecksumMode.FIXED) -> int:
    section = bundle.get(name)
    if section is None:
        raise KeyError(f"unknown section {name!r}")
    if count > len(section.data):
        raise ValueError(f"count {count} exceeds section {name!r} length {len(section.data)}")
    return checksum32(section.data, count, mode)
