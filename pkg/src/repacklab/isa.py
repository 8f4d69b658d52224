"""Register-machine instruction set shared by app code and native blobs.

Instructions are plain tuples ``(op, *operands)``.  The binary encoding is
described in ``docs/isa.md``.  Code sections start with ``b"RVMP"``; native
sections start with ``b"RVMN"`` and keep their string table in cleartext so
hardcoded section names stay patchable even when the body is encrypted.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

MASK32 = 0xFFFFFFFF

PROGRAM_MAGIC = b"RVMP"
NATIVE_MAGIC = b"RVMN"

NATIVE_ENCRYPTED = 0x01
NATIVE_TRANSIENT = 0x02  # decrypted body is wiped (re-encrypted) after the call returns


class Op(enum.IntEnum):
    CONST = 0x01
    MOV = 0x02
    ALU = 0x03
    JMP = 0x04
    JEQC = 0x05
    JNEC = 0x06
    CALL = 0x07
    CALLIND = 0x08
    RET = 0x09
    OUT = 0x0A
    HASHEQ = 0x0B
    DYNLOAD = 0x0C
    NATCALL = 0x0D
    TCHK = 0x0E
    CKSUM = 0x0F
    SYS = 0x10
    HALT = 0x11
    CRASH = 0x12


class Alu(enum.IntEnum):
    ADD = 0
    SUB = 1
    XOR = 2
    MUL = 3
    AND = 4
    OR = 5
    LTU = 6


class HashAlg(enum.IntEnum):
    SHA1 = 1
    SHA256 = 2


class Sys(enum.IntEnum):
    GET_SIGNER_DIGEST32 = 1
    GET_RAND = 2


class CrashCode(enum.IntEnum):
    TAMPER_DETECTED = 1
    DECODE_FAULT = 2
    SSN_FAULT = 3
    MISSING_SECTION = 4
    STACK_OVERFLOW = 5
    BAD_CALL = 6


# Operand layout per opcode.  B=u8, H=u16, I=u32, A=argument register list.
# R marks a register operand (encoded as u8); T marks a jump target (u16).
_LAYOUT: dict[Op, str] = {
    Op.CONST: "RI",
    Op.MOV: "RR",
    Op.ALU: "BRRR",
    Op.JMP: "T",
    Op.JEQC: "RIT",
    Op.JNEC: "RIT",
    Op.CALL: "RHA",
    Op.CALLIND: "RHA",
    Op.RET: "R",
    Op.OUT: "R",
    Op.HASHEQ: "RIHBT",
    Op.DYNLOAD: "HRA",
    Op.NATCALL: "HHA",
    Op.TCHK: "HIIB",
    Op.CKSUM: "RHIIB",
    Op.SYS: "BR",
    Op.HALT: "",
    Op.CRASH: "H",
}

# index (in the full tuple, op at 0) of the jump-target operand
TARGET_POS: dict[Op, int] = {Op.JMP: 1, Op.JEQC: 3, Op.JNEC: 3, Op.HASHEQ: 5}
BRANCH_OPS = frozenset(TARGET_POS)


class DecodeError(ValueError):
    """Malformed or out-of-range program bytes."""

    def __init__(self, message: str, function: Optional[str] = None, index: Optional[int] = None):
        where = ""
        if function is not None:
            where = f"{function}"
            if index is not None:
                where += f"[{index}]"
            where += ": "
        super().__init__(where + message)
        self.function = function
        self.index = index


@dataclass(frozen=True)
class Function:
    name: str
    n_params: int
    n_regs: int
    code: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "code", tuple(normalize(ins) for ins in self.code))


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    strings: tuple[str, ...] = ()
    blobs: tuple[bytes, ...] = ()
    dispatch: tuple[int, ...] = ()
    entry: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "strings", tuple(self.strings))
        object.__setattr__(self, "blobs", tuple(bytes(b) for b in self.blobs))
        object.__setattr__(self, "dispatch", tuple(self.dispatch))

    def function_index(self, name: str) -> int:
        for i, fn in enumerate(self.functions):
            if fn.name == name:
                return i
        raise KeyError(name)

    def with_function(self, index: int, fn: Function) -> "Program":
        fns = list(self.functions)
        fns[index] = fn
        return replace(self, functions=tuple(fns))

    def add_string(self, s: str) -> tuple["Program", int]:
        if s in self.strings:
            return self, self.strings.index(s)
        return replace(self, strings=self.strings + (s,)), len(self.strings)

    def add_blob(self, b: bytes) -> tuple["Program", int]:
        if b in self.blobs:
            return self, self.blobs.index(b)
        return replace(self, blobs=self.blobs + (bytes(b),)), len(self.blobs)


@dataclass(frozen=True)
class NativeBlob(Program):
    """Code living in a native section.  ``flags`` only carries NATIVE_TRANSIENT;
    encryption is a property of the encoded section, not of the blob."""

    flags: int = 0


def normalize(ins: Sequence) -> tuple:
    op = Op(ins[0])
    layout = _LAYOUT[op]
    if len(ins) != len(layout) + 1:
        raise DecodeError(f"{op.name} expects {len(layout)} operands, got {len(ins) - 1}")
    out = [op]
    for kind, val in zip(layout, ins[1:]):
        if kind == "A":
            out.append(tuple(int(v) for v in val))
        elif kind == "I":
            out.append(int(val) & MASK32)
        else:
            out.append(int(val))
    return tuple(out)


def u32(v: int) -> int:
    return v & MASK32


def s32(v: int) -> int:
    v &= MASK32
    return v - (1 << 32) if v & 0x80000000 else v


# -- validation ---------------------------------------------------------------


def _fail(msg: str, fn: Function, idx: Optional[int] = None) -> None:
    raise DecodeError(msg, fn.name, idx)


def validate(prog: Program) -> None:
    nf = len(prog.functions)
    if nf == 0:
        raise DecodeError("program has no functions")
    if not 0 <= prog.entry < nf:
        raise DecodeError(f"entry {prog.entry} out of range")
    for slot, target in enumerate(prog.dispatch):
        if not 0 <= target < nf:
            raise DecodeError(f"dispatch slot {slot} -> {target} out of range")
    for fn in prog.functions:
        if not 0 <= fn.n_params <= fn.n_regs <= 255:
            _fail(f"bad register counts params={fn.n_params} regs={fn.n_regs}", fn)
        n = len(fn.code)
        for i, ins in enumerate(fn.code):
            op = ins[0]
            for kind, val in zip(_LAYOUT[op], ins[1:]):
                if kind == "R" and not 0 <= val < fn.n_regs:
                    _fail(f"register r{val} out of range", fn, i)
                elif kind == "A":
                    if len(val) > 255:
                        _fail("too many arguments", fn, i)
                    for r in val:
                        if not 0 <= r < fn.n_regs:
                            _fail(f"argument register r{r} out of range", fn, i)
                elif kind == "T" and not 0 <= val < n:
                    _fail(f"jump target {val} out of range", fn, i)
            if op == Op.ALU and ins[1] not in Alu._value2member_map_:
                _fail(f"unknown ALU op {ins[1]}", fn, i)
            elif op == Op.CALL:
                if not 0 <= ins[2] < nf:
                    _fail(f"call target {ins[2]} out of range", fn, i)
                if len(ins[3]) > prog.functions[ins[2]].n_params:
                    _fail("too many call arguments", fn, i)
            elif op == Op.CALLIND and not 0 <= ins[2] < len(prog.dispatch):
                _fail(f"dispatch slot {ins[2]} out of range", fn, i)
            elif op in (Op.DYNLOAD, Op.NATCALL, Op.TCHK) and not 0 <= ins[1] < len(prog.strings):
                _fail(f"string index {ins[1]} out of range", fn, i)
            elif op == Op.CKSUM and not 0 <= ins[2] < len(prog.strings):
                _fail(f"string index {ins[2]} out of range", fn, i)
            elif op == Op.NATCALL and not 0 <= ins[2] < len(prog.blobs):
                _fail(f"blob index {ins[2]} out of range", fn, i)
            elif op == Op.HASHEQ:
                if not 0 <= ins[3] < len(prog.blobs):
                    _fail(f"salt index {ins[3]} out of range", fn, i)
                if ins[4] not in HashAlg._value2member_map_:
                    _fail(f"unknown hash algorithm {ins[4]}", fn, i)
            elif op == Op.SYS and ins[1] not in Sys._value2member_map_:
                _fail(f"unknown system call {ins[1]}", fn, i)
            if op in (Op.TCHK, Op.CKSUM) and ins[-1] not in (0, 1):
                _fail(f"unknown checksum mode {ins[-1]}", fn, i)


# -- encoding -----------------------------------------------------------------

_FMT = {"B": "<B", "R": "<B", "H": "<H", "T": "<H", "I": "<I"}


def _enc_str(s: str) -> bytes:
    raw = s.encode("ascii")
    return struct.pack("<H", len(raw)) + raw


def _enc_instruction(ins: tuple) -> bytes:
    out = [struct.pack("<B", ins[0])]
    for kind, val in zip(_LAYOUT[ins[0]], ins[1:]):
        if kind == "A":
            out.append(struct.pack("<B", len(val)) + bytes(val))
        else:
            out.append(struct.pack(_FMT[kind], val))
    return b"".join(out)


def _enc_function(fn: Function) -> bytes:
    head = _enc_str(fn.name) + struct.pack("<BBH", fn.n_params, fn.n_regs, len(fn.code))
    return head + b"".join(_enc_instruction(i) for i in fn.code)


def _enc_strings(strings: Sequence[str]) -> bytes:
    return struct.pack("<H", len(strings)) + b"".join(_enc_str(s) for s in strings)


def _enc_tables(prog: Program) -> tuple[bytes, list[tuple[int, int]]]:
    """blobs, dispatch, entry and functions; also returns per-function byte spans
    relative to the start of the returned bytes."""
    parts = [struct.pack("<H", len(prog.blobs))]
    for b in prog.blobs:
        parts.append(struct.pack("<H", len(b)) + b)
    parts.append(struct.pack("<H", len(prog.dispatch)))
    parts.extend(struct.pack("<H", d) for d in prog.dispatch)
    parts.append(struct.pack("<HH", prog.entry, len(prog.functions)))
    pos = sum(len(p) for p in parts)
    spans = []
    for fn in prog.functions:
        enc = _enc_function(fn)
        spans.append((pos, pos + len(enc)))
        pos += len(enc)
        parts.append(enc)
    return b"".join(parts), spans


def _adler(data: bytes) -> bytes:
    return struct.pack("<I", zlib.adler32(data))


def encode_program(prog: Program) -> bytes:
    validate(prog)
    rest = _enc_strings(prog.strings) + _enc_tables(prog)[0]
    return PROGRAM_MAGIC + _adler(rest) + rest


def function_spans(prog: Program) -> list[tuple[int, int]]:
    """Byte range of each function inside ``encode_program(prog)``."""
    base = len(PROGRAM_MAGIC) + 4 + len(_enc_strings(prog.strings))
    return [(base + a, base + b) for a, b in _enc_tables(prog)[1]]


def xor_crypt(data: bytes, key: bytes) -> bytes:
    """Repeating-key XOR (symmetric)."""
    if not key:
        raise ValueError("empty XOR key")
    reps = key * (len(data) // len(key) + 1)
    return bytes(a ^ b for a, b in zip(data, reps))


def encode_native(blob: Program, key: Optional[bytes] = None) -> bytes:
    validate(blob)
    tables = _enc_tables(blob)[0]
    body = _adler(tables) + tables
    flags = getattr(blob, "flags", 0) & ~NATIVE_ENCRYPTED
    if key is not None:
        body = xor_crypt(body, key)
        flags |= NATIVE_ENCRYPTED
    return (NATIVE_MAGIC + struct.pack("<B", flags) + _enc_strings(blob.strings)
            + struct.pack("<I", len(body)) + body)


# -- decoding -----------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(f"truncated input at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u(self, kind: str) -> int:
        fmt = _FMT[kind]
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def string(self) -> str:
        raw = self.take(self.u("H"))
        try:
            return raw.decode("ascii")
        except UnicodeDecodeError as err:
            raise DecodeError("non-ASCII string") from err

    def strings(self) -> tuple[str, ...]:
        return tuple(self.string() for _ in range(self.u("H")))


def _dec_tables(r: _Reader) -> dict:
    blobs = tuple(r.take(r.u("H")) for _ in range(r.u("H")))
    dispatch = tuple(r.u("H") for _ in range(r.u("H")))
    entry = r.u("H")
    functions = []
    for _ in range(r.u("H")):
        name = r.string()
        n_params, n_regs, n_ins = r.u("B"), r.u("B"), r.u("H")
        code = []
        for idx in range(n_ins):
            opbyte = r.u("B")
            try:
                op = Op(opbyte)
            except ValueError:
                raise DecodeError(f"unknown opcode 0x{opbyte:02x}", name, idx) from None
            ins = [op]
            for kind in _LAYOUT[op]:
                if kind == "A":
                    ins.append(tuple(r.take(r.u("B"))))
                else:
                    ins.append(r.u(kind))
            code.append(tuple(ins))
        functions.append(Function(name, n_params, n_regs, tuple(code)))
    if r.pos != len(r.data):
        raise DecodeError("trailing bytes after program")
    return dict(functions=tuple(functions), blobs=blobs, dispatch=dispatch, entry=entry)


@lru_cache(maxsize=4096)
def decode_program(data: bytes) -> Program:
    data = bytes(data)
    if data[:4] != PROGRAM_MAGIC:
        raise DecodeError("bad program magic")
    if len(data) < 8:
        raise DecodeError("truncated input")
    if data[4:8] != _adler(data[8:]):
        raise DecodeError("program checksum mismatch")
    r = _Reader(data, 8)
    strings = r.strings()
    prog = Program(strings=strings, **_dec_tables(r))
    validate(prog)
    return prog


@dataclass(frozen=True)
class NativeHeader:
    flags: int
    strings: tuple[str, ...]
    body_offset: int
    body_len: int

    @property
    def encrypted(self) -> bool:
        return bool(self.flags & NATIVE_ENCRYPTED)


def native_header(data: bytes) -> NativeHeader:
    """Parse the cleartext part of a native section without touching the body."""
    if data[:4] != NATIVE_MAGIC:
        raise DecodeError("bad native magic")
    r = _Reader(bytes(data), 4)
    flags = r.u("B")
    strings = r.strings()
    body_len = r.u("I")
    if r.pos + body_len != len(data):
        raise DecodeError("native body length mismatch")
    return NativeHeader(flags, strings, r.pos, body_len)


def native_body_plain(data: bytes, key: Optional[bytes]) -> bytes:
    """Section bytes with the body decrypted (identity for cleartext sections)."""
    h = native_header(data)
    if not h.encrypted:
        return bytes(data)
    if key is None:
        raise DecodeError("native section is encrypted and no key was given")
    return bytes(data[:h.body_offset]) + xor_crypt(data[h.body_offset:], key)


@lru_cache(maxsize=4096)
def decode_native(data: bytes, key: Optional[bytes] = None) -> NativeBlob:
    data = bytes(data)
    h = native_header(data)
    body = data[h.body_offset:]
    if h.encrypted:
        if key is None:
            raise DecodeError("native section is encrypted and no key was given")
        body = xor_crypt(body, key)
    if len(body) < 4 or body[:4] != _adler(body[4:]):
        raise DecodeError("native body checksum mismatch")
    blob = NativeBlob(strings=h.strings, flags=h.flags & ~NATIVE_ENCRYPTED,
                      **_dec_tables(_Reader(body, 4)))
    validate(blob)
    return blob


def patch_native_strings(data: bytes, strings: Sequence[str]) -> bytes:
    """Rewrite the cleartext string table of a native section, body untouched."""
    h = native_header(data)
    return (NATIVE_MAGIC + struct.pack("<B", h.flags) + _enc_strings(tuple(strings))
            + struct.pack("<I", h.body_len) + data[h.body_offset:])


def disassemble(prog: Program) -> str:
    lines = []
    for fi, fn in enumerate(prog.functions):
        mark = " (entry)" if fi == prog.entry else ""
        lines.append(f"fn {fi} {fn.name} params={fn.n_params} regs={fn.n_regs}{mark}")
        for i, ins in enumerate(fn.code):
            lines.append(f"  {i:4d}  {format_instruction(ins, prog)}")
    return "\n".join(lines)


def format_instruction(ins: tuple, prog: Optional[Program] = None) -> str:
    op = Op(ins[0])
    args = []
    for kind, val in zip(_LAYOUT[op], ins[1:]):
        if kind == "R":
            args.append(f"r{val}")
        elif kind == "A":
            args.append("[" + ",".join(f"r{r}" for r in val) + "]")
        elif kind == "T":
            args.append(f"@{val}")
        elif kind == "I":
            args.append(f"0x{val:08x}")
        else:
            args.append(str(val))
    if op == Op.ALU:
        args[0] = Alu(ins[1]).name.lower()
    if prog is not None and op in (Op.DYNLOAD, Op.NATCALL, Op.TCHK) and ins[1] < len(prog.strings):
        args[0] = repr(prog.strings[ins[1]])
    return f"{op.name} " + ", ".join(args) if args else op.name
