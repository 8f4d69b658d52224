"""Stochastic stealthy network: probabilistic signer checks with delayed crashes.

A detection node at the top of each candidate function draws a random number
and, with probability p, calls the signer check through a dispatch-table slot
(the reflective "communication channel").  A nonzero answer is OR-ed into a
poison register, and every return of that function first inspects the poison
and crashes if it is set.
"""

from __future__ import annotations

import math
import random

from ..bundle import Bundle, KeyPair, Section, SectionKind, signer_digest32
from ..isa import Alu, CrashCode, Function, Op, Program, Sys, encode_program
from ..rewrite import FunctionEditor, Label, ProgramBuilder
from .report import ProtectionReport, SchemeConfig

CHECK_NAME = "__ssn_check"


def _threshold(p: float) -> int:
    return min(0xFFFFFFFF, int(round(p * 2**32)))


def protect_ssn(bundle: Bundle, prog: Program, config: SchemeConfig, dev_key: KeyPair,
                rng: random.Random):
    dev = signer_digest32(dev_key.public_key)
    pb = ProgramBuilder(prog)
    check = Function(CHECK_NAME, 0, 2, (
        (Op.SYS, Sys.GET_SIGNER_DIGEST32, 0),
        (Op.CONST, 1, dev),
        (Op.ALU, Alu.XOR, 0, 0, 1),
        (Op.RET, 0),
    ))
    slot = pb.add_slot(pb.add_function(check))

    pool = [i for i in range(len(prog.functions)) if i != prog.entry] or [prog.entry]
    k = max(1, math.ceil(len(pool) / 2))
    candidates = sorted(rng.sample(pool, k))
    thr = _threshold(config.ssn_trigger_prob)
    always = config.ssn_trigger_prob >= 1.0

    for fi in candidates:
        fn = prog.functions[fi]
        ed = FunctionEditor(fn)
        rr, rt, rc, rp = ed.scratch(), ed.scratch(), ed.scratch(), ed.scratch()
        skip = Label("ssn-skip")
        node = []
        if not always:
            node += [(Op.SYS, Sys.GET_RAND, rr), (Op.CONST, rt, thr),
                     (Op.ALU, Alu.LTU, rc, rr, rt), (Op.JEQC, rc, 0, skip)]
        node += [(Op.CALLIND, rc, slot, ()), (Op.ALU, Alu.OR, rp, rp, rc), skip]
        ed.head.extend(node)
        for i, ins in enumerate(fn.code):
            if ins[0] == Op.RET:
                ok = Label("ssn-ok")
                ed.replace(i, i + 1, [(Op.JEQC, rp, 0, ok), (Op.CRASH, CrashCode.SSN_FAULT),
                                      ok, ins])
        pb.functions[fi] = ed.build()[0]

    out = bundle.with_section(Section("code", SectionKind.CODE, encode_program(pb.build())))
    report = ProtectionReport("ssn", config, [], None, len(pool), len(candidates), details={
        "candidates": [prog.functions[i].name for i in candidates],
        "check_function": CHECK_NAME,
        "dispatch_slot": slot,
        "threshold": thr,
        "dev_signer_digest32": dev,
    })
    return out, report
