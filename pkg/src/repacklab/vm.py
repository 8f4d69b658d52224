"""Deterministic interpreter for bundles.

``run`` executes the ``code`` section's entry function with the given inputs
loaded into its parameter registers.  Every run owns its own state, so
concurrent runs over one bundle are safe.

Step accounting: one step per instruction, plus one step per 16 bytes for
each decryption (DYNLOAD, encrypted NATCALL), re-encryption (transient native
sections) and checksum (TCHK, CKSUM).  HASHEQ costs one extra step.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

from .bundle import Bundle, ChecksumMode, SectionKind, checksum32, signer_digest32
from .crypto import aes_ctr, derive_key, trigger_hash
from .isa import (
    MASK32,
    NATIVE_TRANSIENT,
    Alu,
    CrashCode,
    DecodeError,
    Op,
    Program,
    Sys,
    decode_native,
    decode_program,
    format_instruction,
    native_body_plain,
    native_header,
)

DEFAULT_STEP_LIMIT = 1_000_000
MAX_DEPTH = 256


class Status(enum.Enum):
    HALTED = "Halted"
    CRASHED = "Crashed"
    STEP_LIMIT = "StepLimit"


class Trigger(NamedTuple):
    section: str
    function: str
    index: int


@dataclass
class LoadEvent:
    """A decryption performed by DYNLOAD or NATCALL.

    ``key_value`` is the 32-bit register value a DYNLOAD derived its key from.
    ``plaintext`` is filled in before exit handlers run.
    """

    kind: str
    section: str
    key: bytes
    ciphertext: bytes
    key_value: Optional[int] = None
    plaintext: Optional[bytes] = None
    caller: Optional[Trigger] = None


@dataclass
class CheckEvent:
    kind: str  # "tchk" | "cksum"
    section: str
    offset: int
    count: int
    mode: ChecksumMode
    actual: Optional[int]
    expected: Optional[int] = None
    caller: Optional[Trigger] = None


@dataclass(frozen=True)
class HookTable:
    """Interception points, modelling dynamic instrumentation.

    ``tchk_enter`` may return True/False to force a TCHK to pass/fail;
    ``cksum_enter`` may return an int to replace the computed checksum.
    ``sys_override`` maps a system-call id to a replacement; ``slot_override``
    maps a dispatch slot to a replacement for the function it points at.
    """

    dynload_enter: Optional[Callable[[LoadEvent], None]] = None
    dynload_exit: Optional[Callable[[LoadEvent], None]] = None
    natcall_enter: Optional[Callable[[LoadEvent], None]] = None
    natcall_exit: Optional[Callable[[LoadEvent], None]] = None
    tchk_enter: Optional[Callable[[CheckEvent], Optional[bool]]] = None
    cksum_enter: Optional[Callable[[CheckEvent], Optional[int]]] = None
    sys_override: Mapping[int, Callable[[], int]] = field(default_factory=dict)
    slot_override: Mapping[int, Callable[[tuple], int]] = field(default_factory=dict)


NO_HOOKS = HookTable()


@dataclass
class RunResult:
    outputs: list[int]
    steps: int
    status: Status
    crash: Optional[int] = None
    trigger_log: list[Trigger] = field(default_factory=list)
    loaded: tuple[str, ...] = ()  # distinct sections decrypted/loaded, in first-load order

    @property
    def termination(self) -> str:
        if self.status is Status.CRASHED:
            try:
                return f"Crashed({CrashCode(self.crash).name})"
            except ValueError:
                return f"Crashed({self.crash})"
        return self.status.value

    @property
    def halted(self) -> bool:
        return self.status is Status.HALTED

    @property
    def tamper_fault(self) -> bool:
        return self.status is Status.CRASHED and self.crash in (
            CrashCode.TAMPER_DETECTED, CrashCode.SSN_FAULT, CrashCode.DECODE_FAULT)


class _Crash(Exception):
    def __init__(self, code: int):
        self.code = code


class _Ctx(NamedTuple):
    prog: Program
    section: str


def _cost(nbytes: int) -> int:
    return (nbytes + 15) // 16


def run(bundle: Bundle, inputs: Sequence[int] = (), seed: int = 0,
        limit: int = DEFAULT_STEP_LIMIT, hooks: Optional[HookTable] = None,
        trace: Optional[Callable[[str], None]] = None) -> RunResult:
    code = bundle.get("code")
    if code is None or code.kind != SectionKind.CODE:
        raise ValueError("bundle has no code section")
    try:
        prog = decode_program(code.data)
    except DecodeError:
        return RunResult([], 0, Status.CRASHED, CrashCode.DECODE_FAULT)
    return _Machine(bundle, seed, limit, hooks or NO_HOOKS, trace).execute(prog, inputs)


class _Machine:
    def __init__(self, bundle, seed, limit, hooks, trace):
        self.sections = {s.name: s for s in bundle.sections}
        self.signer = signer_digest32(bundle.signer_public_key)
        self.rng = random.Random(seed)
        self.limit = limit
        self.hooks = hooks
        self.trace = trace
        self.loaded: dict[str, None] = {}

    def _section(self, name: str, kind: Optional[SectionKind] = None):
        s = self.sections.get(name)
        if s is None or (kind is not None and s.kind != kind):
            raise _Crash(CrashCode.MISSING_SECTION)
        return s

    def _sys(self, sid: int) -> int:
        override = self.hooks.sys_override.get(sid)
        if override is not None:
            return override() & MASK32
        if sid == Sys.GET_SIGNER_DIGEST32:
            return self.signer
        return self.rng.getrandbits(32)

    def _checksum(self, name, offset, count, mode):
        data = self._section(name).data
        if offset + count > len(data):
            return None
        return checksum32(data, count, ChecksumMode(mode), offset)

    def execute(self, prog: Program, inputs: Sequence[int]) -> RunResult:
        outputs: list[int] = []
        log: list[Trigger] = []
        hooks = self.hooks
        trace = self.trace
        limit = self.limit
        steps = 0
        status = Status.HALTED
        crash = None

        ctx = _Ctx(prog, "code")
        fn = prog.functions[prog.entry]
        regs = [0] * fn.n_regs
        for i, v in enumerate(list(inputs)[:fn.n_params]):
            regs[i] = v & MASK32
        code = fn.code
        pc = 0
        frames: list = []

        try:
            while True:
                if steps >= limit:
                    status = Status.STEP_LIMIT
                    break
                if pc >= len(code):
                    raise _Crash(CrashCode.BAD_CALL)
                ins = code[pc]
                op = ins[0]
                steps += 1
                if trace is not None:
                    trace(f"{ctx.section}:{fn.name}:{pc:<4d} {format_instruction(ins, ctx.prog)}")

                if op == Op.CONST:
                    regs[ins[1]] = ins[2]
                    pc += 1
                elif op == Op.ALU:
                    a, b = regs[ins[3]], regs[ins[4]]
                    k = ins[1]
                    if k == Alu.ADD:
                        r = a + b
                    elif k == Alu.SUB:
                        r = a - b
                    elif k == Alu.XOR:
                        r = a ^ b
                    elif k == Alu.MUL:
                        r = a * b
                    elif k == Alu.AND:
                        r = a & b
                    elif k == Alu.OR:
                        r = a | b
                    else:
                        r = 1 if a < b else 0
                    regs[ins[2]] = r & MASK32
                    pc += 1
                elif op == Op.JNEC:
                    if regs[ins[1]] != ins[2]:
                        pc = ins[3]
                    else:
                        log.append(Trigger(ctx.section, fn.name, pc))
                        pc += 1
                elif op == Op.JEQC:
                    if regs[ins[1]] == ins[2]:
                        log.append(Trigger(ctx.section, fn.name, pc))
                        pc = ins[3]
                    else:
                        pc += 1
                elif op == Op.JMP:
                    pc = ins[1]
                elif op == Op.MOV:
                    regs[ins[1]] = regs[ins[2]]
                    pc += 1
                elif op == Op.OUT:
                    outputs.append(regs[ins[1]])
                    pc += 1
                elif op == Op.CALL or op == Op.CALLIND:
                    args = tuple(regs[r] for r in ins[3])
                    if op == Op.CALLIND:
                        slot = ins[2]
                        override = hooks.slot_override.get(slot)
                        if override is not None:
                            regs[ins[1]] = override(args) & MASK32
                            pc += 1
                            continue
                        target = ctx.prog.dispatch[slot]
                        callee = ctx.prog.functions[target]
                        if len(args) > callee.n_params:
                            raise _Crash(CrashCode.BAD_CALL)
                    else:
                        callee = ctx.prog.functions[ins[2]]
                    if len(frames) >= MAX_DEPTH:
                        raise _Crash(CrashCode.STACK_OVERFLOW)
                    frames.append((ctx, fn, code, pc + 1, regs, ins[1], None))
                    fn = callee
                    code = fn.code
                    regs = [0] * fn.n_regs
                    regs[:len(args)] = args
                    pc = 0
                elif op == Op.RET:
                    value = regs[ins[1]]
                    if not frames:
                        break
                    callee_regs = regs
                    ctx, fn, code, pc, regs, dest, window = frames.pop()
                    if window is None:
                        regs[dest] = value
                    else:
                        arg_regs, transient_cost = window
                        for j, r in enumerate(arg_regs):
                            regs[r] = callee_regs[j]
                        steps += transient_cost
                elif op == Op.HASHEQ:
                    steps += 1
                    salt = ctx.prog.blobs[ins[3]]
                    if trigger_hash(regs[ins[1]], salt, ins[4]) == ins[2]:
                        log.append(Trigger(ctx.section, fn.name, pc))
                        pc = ins[5]
                    else:
                        pc += 1
                elif op == Op.DYNLOAD or op == Op.NATCALL:
                    name = ctx.prog.strings[ins[1]]
                    caller = Trigger(ctx.section, fn.name, pc)
                    if op == Op.DYNLOAD:
                        sec = self._section(name, SectionKind.CODE)
                        key_value = regs[ins[2]]
                        key = derive_key(key_value)
                        ev = LoadEvent("dynload", name, key, sec.data, key_value, caller=caller)
                        if hooks.dynload_enter is not None:
                            hooks.dynload_enter(ev)
                        steps += _cost(len(sec.data))
                        ev.plaintext = aes_ctr(sec.data, key)
                        if hooks.dynload_exit is not None:
                            hooks.dynload_exit(ev)
                        try:
                            loaded = decode_program(ev.plaintext)
                        except DecodeError:
                            raise _Crash(CrashCode.DECODE_FAULT) from None
                        transient_cost = 0
                    else:
                        sec = self._section(name, SectionKind.NATIVE)
                        key = ctx.prog.blobs[ins[2]]
                        try:
                            header = native_header(sec.data)
                        except DecodeError:
                            raise _Crash(CrashCode.DECODE_FAULT) from None
                        ev = LoadEvent("natcall", name, key if header.encrypted else b"", sec.data,
                                       caller=caller)
                        if hooks.natcall_enter is not None:
                            hooks.natcall_enter(ev)
                        cost = _cost(header.body_len) if header.encrypted else 0
                        steps += cost
                        try:
                            loaded = decode_native(sec.data, key if header.encrypted else None)
                        except (DecodeError, ValueError):
                            raise _Crash(CrashCode.DECODE_FAULT) from None
                        if hooks.natcall_exit is not None:
                            ev.plaintext = native_body_plain(sec.data, key if header.encrypted else None)
                            hooks.natcall_exit(ev)
                        transient_cost = cost if loaded.flags & NATIVE_TRANSIENT else 0
                    self.loaded.setdefault(name, None)
                    arg_regs = ins[3]
                    callee = loaded.functions[loaded.entry]
                    if len(arg_regs) > callee.n_params:
                        raise _Crash(CrashCode.BAD_CALL)
                    if len(frames) >= MAX_DEPTH:
                        raise _Crash(CrashCode.STACK_OVERFLOW)
                    frames.append((ctx, fn, code, pc + 1, regs, None, (arg_regs, transient_cost)))
                    args = [regs[r] for r in arg_regs]
                    ctx = _Ctx(loaded, name)
                    fn = callee
                    code = fn.code
                    regs = [0] * fn.n_regs
                    regs[:len(args)] = args
                    pc = 0
                elif op == Op.TCHK:
                    name = ctx.prog.strings[ins[1]]
                    count, expected, mode = ins[2], ins[3], ins[4]
                    steps += _cost(count)
                    actual = self._checksum(name, 0, count, mode)
                    verdict = actual == expected
                    if hooks.tchk_enter is not None:
                        forced = hooks.tchk_enter(CheckEvent(
                            "tchk", name, 0, count, ChecksumMode(mode), actual, expected,
                            Trigger(ctx.section, fn.name, pc)))
                        if forced is not None:
                            verdict = bool(forced)
                    if not verdict:
                        raise _Crash(CrashCode.TAMPER_DETECTED)
                    pc += 1
                elif op == Op.CKSUM:
                    name = ctx.prog.strings[ins[2]]
                    offset, count, mode = ins[3], ins[4], ins[5]
                    steps += _cost(count)
                    actual = self._checksum(name, offset, count, mode)
                    if hooks.cksum_enter is not None:
                        forced = hooks.cksum_enter(CheckEvent(
                            "cksum", name, offset, count, ChecksumMode(mode), actual,
                            caller=Trigger(ctx.section, fn.name, pc)))
                        if forced is not None:
                            actual = forced
                    if actual is None:
                        raise _Crash(CrashCode.TAMPER_DETECTED)
                    regs[ins[1]] = actual & MASK32
                    pc += 1
                elif op == Op.SYS:
                    regs[ins[2]] = self._sys(ins[1])
                    pc += 1
                elif op == Op.HALT:
                    break
                elif op == Op.CRASH:
                    raise _Crash(ins[1])
                else:  # pragma: no cover - validate() rejects unknown opcodes
                    raise _Crash(CrashCode.BAD_CALL)
        except _Crash as c:
            status = Status.CRASHED
            crash = int(c.code)
        return RunResult(outputs, min(steps, limit), status, crash, log,
                         tuple(self.loaded))
