"""Evaluator-side checks that use the ground truth a protection report holds.

``bomb_defused`` decides statically whether a reported bomb, if its trigger
fired in ``bundle``, could still raise a tamper response.  It decrypts the
payload with the true key and evaluates every check the payload (and any
native it calls) performs against the bundle's actual sections and signer.
"""

from __future__ import annotations

from typing import Optional

from ..bundle import Bundle, ChecksumMode, SectionKind, checksum32, signer_digest32
from ..crypto import aes_ctr, derive_key
from ..isa import DecodeError, Op, Program, Sys, decode_native, decode_program, native_header
from .report import BombSite


def _checks_pass(bundle: Bundle, prog: Program, depth: int = 0) -> bool:
    signer = signer_digest32(bundle.signer_public_key)
    for fn in prog.functions:
        code = fn.code
        for i, ins in enumerate(code):
            op = ins[0]
            if op == Op.TCHK:
                s = bundle.get(prog.strings[ins[1]])
                count, expected, mode = ins[2], ins[3], ins[4]
                if s is None or count > len(s.data):
                    return False
                if checksum32(s.data, count, ChecksumMode(mode)) != expected:
                    return False
            elif op == Op.SYS and ins[1] == Sys.GET_SIGNER_DIGEST32 and i + 1 < len(code):
                nxt = code[i + 1]
                if nxt[0] == Op.JEQC and nxt[1] == ins[2] and nxt[2] != signer:
                    return False
            elif op == Op.NATCALL and depth < 8:
                s = bundle.get(prog.strings[ins[1]])
                if s is None or s.kind != SectionKind.NATIVE:
                    return False
                try:
                    enc = native_header(s.data).encrypted
                    blob = decode_native(s.data, prog.blobs[ins[2]] if enc else None)
                except (DecodeError, ValueError):
                    return False
                if not _checks_pass(bundle, blob, depth + 1):
                    return False
    return True


def _payload(bundle: Bundle, site: BombSite) -> Optional[Program]:
    s = bundle.get(site.payload_section)
    if s is None:
        return None
    try:
        return decode_program(aes_ctr(s.data, derive_key(site.key_value)))
    except DecodeError:
        return None


def _stub_key_intact(bundle: Bundle, site: BombSite) -> bool:
    """For checksum-keyed bombs (SDC), the stub must still derive the right key."""
    if site.host_section != "code":
        return True
    try:
        prog = decode_program(bundle.data("code"))
    except (DecodeError, KeyError):
        return False
    for fn in prog.functions:
        for i, ins in enumerate(fn.code):
            if ins[0] == Op.DYNLOAD and prog.strings[ins[1]] == site.payload_section:
                for prev in fn.code[max(0, i - 2):i]:
                    if prev[0] == Op.CKSUM:
                        s = bundle.get(prog.strings[prev[2]])
                        if s is None:
                            return False
                        got = checksum32(s.data, prev[4], ChecksumMode(prev[5]), prev[3])
                        if got ^ (site.const_v & 0xFFFFFFFF) != site.key_value:
                            return False
    return True


def bomb_defused(bundle: Bundle, site: BombSite) -> bool:
    """True when firing this bomb in ``bundle`` cannot cause a tamper fault.

    A bomb whose payload section is gone was inlined; then the code section
    itself must be free of failing checks.
    """
    if bundle.get(site.payload_section) is None:
        return _checks_pass(bundle, decode_program(bundle.data("code")))
    if not _stub_key_intact(bundle, site):
        return False
    payload = _payload(bundle, site)
    if payload is None:
        return False
    return _checks_pass(bundle, payload)


def defused_count(bundle: Bundle, sites) -> int:
    return sum(bomb_defused(bundle, s) for s in sites)
