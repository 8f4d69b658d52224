"""Whole-code XOR encryption with on-demand, per-function decryption.

The "code" section is replaced by a stub program: every original function
becomes a stub that asks the cleartext loader native (which holds the XOR
key) to run it.  The loader opens the native section holding that function,
runs it, and the section is wiped again on return (transient flag).  Calls
between original functions go through the same stubs, so each call decrypts
exactly the function it needs.

Return values travel through the register window: a moved function writes
its result into register W (one past every original register) and the
loader and stub hand that register back.
"""

from __future__ import annotations

import random

from ..bundle import Bundle, KeyPair, Section, SectionKind
from ..isa import (
    NATIVE_TRANSIENT,
    CrashCode,
    Function,
    NativeBlob,
    Op,
    Program,
    encode_native,
    encode_program,
)
from ..rewrite import Label, assemble, lift
from .report import ProtectionReport, SchemeConfig

LOADER = "dexenc_loader"
SECTION_PREFIX = "dexenc_f"


def _stub(fn: Function, index: int, W: int, loader: int, key_blob: int) -> Function:
    sel = W + 1
    return Function(fn.name, fn.n_params, W + 2, (
        (Op.CONST, sel, index),
        (Op.NATCALL, loader, key_blob, tuple(range(W + 2))),
        (Op.RET, W),
    ))


def _moved(fn: Function, W: int) -> Function:
    items, _ = lift(fn)
    out: list = []
    for it in items:
        if not isinstance(it, Label) and it[0] == Op.RET:
            out.extend([(Op.MOV, W, it[1]), (Op.RET, W)])
        else:
            out.append(it)
    return Function(fn.name, W + 1, W + 1, assemble(out))


def protect_dex_encrypt(bundle: Bundle, prog: Program, config: SchemeConfig, dev_key: KeyPair,
                        rng: random.Random):
    xor_key = rng.randbytes(16)
    W = max(fn.n_regs for fn in prog.functions)
    if W + 2 > 255:
        raise ValueError("too many registers for the loader window")
    n = len(prog.functions)

    # stubs inside encrypted sections reference the loader through the
    # original string table extended by one entry
    strings = prog.strings + (LOADER,)
    loader_in_blob = len(strings) - 1
    blobs = prog.blobs + (b"\x00",)
    dummy_blob = len(blobs) - 1
    stubs_native = [_stub(fn, i, W, loader_in_blob, dummy_blob) for i, fn in enumerate(prog.functions)]

    sections = []
    names = []
    for i, fn in enumerate(prog.functions):
        fns = list(stubs_native)
        fns[i] = _moved(fn, W)
        blob = NativeBlob(functions=fns, strings=strings, blobs=blobs, dispatch=prog.dispatch,
                          entry=i, flags=NATIVE_TRANSIENT)
        name = f"{SECTION_PREFIX}{i}"
        names.append(name)
        sections.append(Section(name, SectionKind.NATIVE, encode_native(blob, xor_key)))

    # loader: dispatch on the selector register, NATCALL the right section
    sel = W + 1
    targets = [Label(f"f{i}") for i in range(n)]
    items: list = [(Op.JEQC, sel, i, targets[i]) for i in range(n)]
    items.append((Op.CRASH, CrashCode.BAD_CALL))
    for i in range(n):
        items.extend([targets[i], (Op.NATCALL, i, 0, tuple(range(W + 1))), (Op.RET, W)])
    loader = NativeBlob(functions=(Function("loader", W + 2, W + 2, assemble(items)),),
                        strings=tuple(names), blobs=(xor_key,), entry=0)
    sections.append(Section(LOADER, SectionKind.NATIVE, encode_native(loader)))

    stub_prog = Program(tuple(_stub(fn, i, W, 0, 0) for i, fn in enumerate(prog.functions)),
                        strings=(LOADER,), blobs=(b"\x00",), dispatch=prog.dispatch,
                        entry=prog.entry)
    out = bundle.with_section(Section("code", SectionKind.CODE, encode_program(stub_prog)))
    for s in sections:
        out = out.with_section(s)
    report = ProtectionReport("dex_encrypt", config, [], None, n, n, details={
        "xor_key": xor_key.hex(),
        "loader_section": LOADER,
        "encrypted_sections": names,
        "window": W,
        "obfuscated": bool(config.obfuscate),
    })
    return out, report


def exposure(loaded: tuple[str, ...], n_functions: int) -> float:
    """Fraction of functions whose encrypted section was opened during a run."""
    if n_functions == 0:
        return 0.0
    hit = {s for s in loaded if s.startswith(SECTION_PREFIX)}
    return len(hit) / n_functions
