"""Static analysis: pattern matching over decodable code, key reuse, brute force."""

from __future__ import annotations

import builtins
import hashlib
from dataclasses import dataclass
from typing import Mapping, Optional

from ..bundle import Bundle, SectionKind
from ..crypto import le32
from ..isa import DecodeError, HashAlg, Op, Program, decode_native, decode_program, native_header, s32

KINDS = {
    Op.HASHEQ: "hasheq",
    Op.JEQC: "jeqc",
    Op.JNEC: "jnec",
    Op.DYNLOAD: "dynload",
    Op.NATCALL: "natcall",
    Op.TCHK: "tchk",
    Op.CKSUM: "cksum",
}

# section-name operand position for instructions that name a section
_SECTION_POS = {Op.DYNLOAD: 1, Op.NATCALL: 1, Op.TCHK: 1, Op.CKSUM: 2}


@dataclass(frozen=True)
class CandidateSite:
    """One suspicious instruction, with everything a static attacker can read off it.

    ``section`` is the section holding the instruction ("code" or a native or
    dumped payload).  For HASHEQ sites ``salt`` and ``alg`` are resolved from
    the blob table; for instructions naming a section, ``target`` is that name.
    """

    section: str
    function: str
    index: int
    kind: str
    operands: tuple
    salt: Optional[bytes] = None
    alg: Optional[str] = None
    target: Optional[str] = None

    @property
    def digest32(self) -> Optional[int]:
        return self.operands[1] if self.kind == "hasheq" else None

    def to_dict(self) -> dict:
        return {
            "section": self.section, "function": self.function, "index": self.index,
            "kind": self.kind, "operands": [list(o) if isinstance(o, tuple) else int(o)
                                            for o in self.operands],
            "salt": self.salt.hex() if self.salt is not None else None,
            "alg": self.alg, "target": self.target,
        }


def scan_program(prog: Program, section: str) -> list[CandidateSite]:
    out = []
    for fn in prog.functions:
        for i, ins in enumerate(fn.code):
            op = ins[0]
            kind = KINDS.get(op)
            if kind is None:
                continue
            salt = alg = target = None
            if op == Op.HASHEQ:
                salt = prog.blobs[ins[3]]
                alg = HashAlg(ins[4]).name.lower()
            if op in _SECTION_POS:
                target = prog.strings[ins[_SECTION_POS[op]]]
            operands = tuple(int(x) if not isinstance(x, tuple) else x for x in ins[1:])
            out.append(CandidateSite(section, fn.name, i, kind, operands, salt, alg, target))
    return out


def scan_patterns(bundle: Bundle, plaintexts: Optional[Mapping[str, Program]] = None) -> list[CandidateSite]:
    """Every HASHEQ, DYNLOAD, NATCALL, TCHK, CKSUM and equality branch in readable code.

    Readable code is the "code" section, every cleartext native section, and
    any decrypted payloads passed in ``plaintexts`` (section name to program).
    Encrypted sections without a plaintext are skipped.
    """
    sites = scan_program(decode_program(bundle.data("code")), "code")
    for s in bundle.sections:
        if s.kind != SectionKind.NATIVE:
            continue
        try:
            if native_header(s.data).encrypted:
                continue
            sites += scan_program(decode_native(s.data), s.name)
        except DecodeError:
            continue
    for name, prog in sorted((plaintexts or {}).items()):
        sites += scan_program(prog, name)
    return sites


def key_reuse_scan(bundle_or_sites) -> list[list[CandidateSite]]:
    """HASHEQ sites grouped by digest32, keeping only groups of two or more."""
    sites = bundle_or_sites if isinstance(bundle_or_sites, list) else scan_patterns(bundle_or_sites)
    groups: dict[int, list[CandidateSite]] = {}
    for s in sites:
        if s.kind == "hasheq":
            groups.setdefault(s.digest32, []).append(s)
    return [g for _, g in sorted(groups.items()) if len(g) >= 2]


def brute_force(site: CandidateSite, range: tuple[int, int] = (-1024, 1024),
                salt: Optional[bytes] = None, alg: Optional[str] = None) -> Optional[int]:
    """Smallest signed ``v`` in ``range`` whose trigger hash equals the site's digest.

    Salt and algorithm default to the ones resolved by the scanner.
    """
    if site.kind != "hasheq":
        raise ValueError(f"brute force needs a hasheq site, got {site.kind}")
    salt = site.salt if salt is None else salt
    alg = site.alg if alg is None else alg
    if isinstance(alg, HashAlg):
        alg = alg.name.lower()
    target = site.digest32.to_bytes(4, "little")
    base = hashlib.new(alg or "sha1", bytes(salt or b""))
    lo, hi = range
    for v in builtins.range(lo, hi + 1):
        h = base.copy()
        h.update(le32(v))
        if h.digest()[:4] == target:
            return s32(v)
    return None

