"""AppIS: a self-checking guard network with a per-run choice of guarding net.

Goals are whole functions of the code section, always including the entry
function (which gains the call into the scheduling engine).  Every net has
its own guards: J guards are functions appended to the code, N guards live
in cleartext native sections.  A guard receives the expected checksums as
call arguments from the scheduler, recomputes each watched region with
CKSUM and crashes on any difference.  Keeping the constants in the scheduler
(itself unwatched and placed last in the code) breaks the circularity
between guards that watch each other.
"""

from __future__ import annotations

import math
import random
from dataclasses import replace

from ..bundle import Bundle, ChecksumMode, KeyPair, Section, SectionKind, checksum32
from ..isa import (
    Alu,
    CrashCode,
    Function,
    NativeBlob,
    Op,
    Program,
    Sys,
    encode_native,
    encode_program,
    function_spans,
)
from ..rewrite import FunctionEditor, Label, ProgramBuilder, assemble
from .report import Goal, Guard, GuardNet, ProtectionReport, SchemeConfig

SCHED_NAME = "__appis_sched"


def call_graph(prog: Program) -> dict[int, set[int]]:
    g: dict[int, set[int]] = {}
    for i, fn in enumerate(prog.functions):
        out = set()
        for ins in fn.code:
            if ins[0] == Op.CALL:
                out.add(ins[2])
            elif ins[0] == Op.CALLIND:
                out.add(prog.dispatch[ins[2]])
        g[i] = out
    return g


def reachable(prog: Program, start: int) -> list[int]:
    g = call_graph(prog)
    seen, stack = {start}, [start]
    while stack:
        for j in g[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return sorted(seen)


def _guard_code(targets: list[tuple[int, int, int]]) -> tuple[int, tuple]:
    """Guard body over (string index, offset, count) targets; expected values arrive as params."""
    k = len(targets)
    rt = k
    bad = Label("bad")
    items: list = []
    for j, (sidx, off, cnt) in enumerate(targets):
        items += [(Op.CKSUM, rt, sidx, off, cnt, ChecksumMode.FIXED),
                  (Op.ALU, Alu.XOR, rt, rt, j),
                  (Op.JNEC, rt, 0, bad)]
    items += [(Op.RET, rt), bad, (Op.CRASH, CrashCode.TAMPER_DETECTED)]
    return k + 1, assemble(items)


def protect_appis(bundle: Bundle, prog: Program, config: SchemeConfig, dev_key: KeyPair,
                  rng: random.Random):
    n = config.appis_n_guards
    m = math.ceil(n / 2)
    nf = len(prog.functions)
    others = [i for i in reachable(prog, prog.entry) if i != prog.entry]
    goal_fns = [prog.entry] + sorted(rng.sample(others, math.ceil(len(others) / 2)))

    # guard identities and the watch graph, net by net
    guards: list[dict] = []
    for net in range(m):
        ids = [dict(id=f"n{net}g{i}", kind="J" if i % 2 == 0 else "N", net=net, watches=[])
               for i in range(n)]
        perm = rng.sample(range(n), n)
        for p in range(n):
            g = ids[perm[p]]
            g["watches"] += [ids[perm[(p + 1) % n]]["id"], ids[perm[(p + 2) % n]]["id"]]
        for j, fi in enumerate(goal_fns):
            for p in (j % n, (j + 1) % n):
                ids[perm[p]]["watches"].append(f"goal:{prog.functions[fi].name}")
        guards += ids

    j_guards = [g for g in guards if g["kind"] == "J"]
    for pos, g in enumerate(j_guards):
        g["fn"] = nf + pos
        g["section"] = "code"
    for g in guards:
        if g["kind"] == "N":
            g["section"] = f"appis_{g['id']}"
    by_id = {g["id"]: g for g in guards}
    sched_index = nf + len(j_guards)  # scheduler goes after the J guards

    # entry gains the call into the scheduler
    ed = FunctionEditor(prog.functions[prog.entry])
    ed.head.append((Op.CALL, ed.scratch(), sched_index, ()))
    entry_fn = ed.build()[0]

    n_sections = [g["section"] for g in guards if g["kind"] == "N"]

    pb = ProgramBuilder(prog)
    pb.functions[prog.entry] = entry_fn
    code_strings = {"code": pb.string("code")}
    for s in n_sections:
        code_strings[s] = pb.string(s)
    native_strings = ("code",) + tuple(n_sections)

    def region(target: str, spans, natives) -> tuple[str, int, int]:
        if target.startswith("goal:"):
            fi = prog.function_index(target[5:])
            a, b = spans[fi]
            return "code", a, b - a
        g = by_id[target]
        if g["kind"] == "J":
            a, b = spans[g["fn"]]
            return "code", a, b - a
        return g["section"], 0, len(natives.get(g["section"], b""))

    def assemble_all(spans, natives, expected) -> tuple[Program, dict[str, bytes]]:
        fns = list(pb.functions[:nf])
        new_natives = {}
        for g in guards:
            regs = [region(t, spans, natives) for t in g["watches"]]
            if g["kind"] == "J":
                tg = [(code_strings[s], off, cnt) for s, off, cnt in regs]
                nregs, code = _guard_code(tg)
                fns.append(Function(f"__appis_{g['id']}", len(tg), nregs, code))
            else:
                tg = [(native_strings.index(s), off, cnt) for s, off, cnt in regs]
                nregs, code = _guard_code(tg)
                blob = NativeBlob(functions=(Function("guard", len(tg), nregs, code),),
                                  strings=native_strings, blobs=(b"\x00",), entry=0)
                new_natives[g["section"]] = encode_native(blob)
        fns.append(_scheduler(m, guards, expected, pb, code_strings))
        return replace(pb.build(), functions=tuple(fns)), new_natives

    def _scheduler(m, guards, expected, pb, code_strings) -> Function:
        ra, rb, rc = 0, 1, 2
        width = max(len(g["watches"]) for g in guards)
        base = 3
        labels = [Label(f"net{k}") for k in range(m)]
        done = Label("done")
        items: list = [(Op.SYS, Sys.GET_RAND, ra)]
        for k in range(m - 1):
            thr = ((k + 1) << 32) // m
            items += [(Op.CONST, rb, thr), (Op.ALU, Alu.LTU, rc, ra, rb), (Op.JNEC, rc, 0, labels[k])]
        items.append((Op.JMP, labels[m - 1]))
        for k in range(m):
            items.append(labels[k])
            for g in (g for g in guards if g["net"] == k):
                args = tuple(range(base, base + len(g["watches"])))
                for r, t in zip(args, g["watches"]):
                    items.append((Op.CONST, r, expected.get((g["id"], t), 0)))
                if g["kind"] == "J":
                    items.append((Op.CALL, rc, g["fn"], args))
                else:
                    items.append((Op.NATCALL, code_strings[g["section"]], 0, args))
            items.append((Op.JMP, done))
        items += [done, (Op.CONST, ra, 0), (Op.RET, ra)]
        return Function(SCHED_NAME, 0, base + width, assemble(items))

    if not pb.blobs:
        pb.blob(b"\x00")

    # pass 1 fixes the layout, pass 2 fills offsets, pass 3 fills expected values
    zero_spans = [(0, 0)] * (sched_index + 1)
    prog1, natives = assemble_all(zero_spans, {}, {})
    spans = function_spans(prog1)
    prog2, natives = assemble_all(spans, natives, {})
    assert function_spans(prog2) == spans
    code2 = encode_program(prog2)
    data = {"code": code2, **natives}
    expected = {}
    for g in guards:
        for t in g["watches"]:
            s, off, cnt = region(t, spans, natives)
            expected[(g["id"], t)] = checksum32(data[s], cnt, ChecksumMode.FIXED, off)
    prog3, natives3 = assemble_all(spans, natives, expected)
    assert natives3 == natives and function_spans(prog3) == spans
    code = encode_program(prog3)

    goals = []
    for fi in goal_fns:
        a, b = spans[fi]
        goals.append(Goal(f"goal:{prog.functions[fi].name}", prog.functions[fi].name, a, b,
                          checksum32(code, b - a, ChecksumMode.FIXED, a)))
    guard_recs = []
    for g in guards:
        s, off, cnt = region(g["id"], spans, natives)
        guard_recs.append(Guard(g["id"], g["kind"], g["net"], s, off, off + cnt, tuple(g["watches"])))
    net = GuardNet(tuple(goals), tuple(guard_recs), m)

    out = bundle.with_section(Section("code", SectionKind.CODE, code))
    for name in n_sections:
        out = out.with_section(Section(name, SectionKind.NATIVE, natives[name]))
    report = ProtectionReport("appis", config, [], net, len(others) + 1, len(goal_fns), details={
        "scheduler": SCHED_NAME,
        "goal_functions": [prog.functions[i].name for i in goal_fns],
        "n_nets": m,
    })
    return out, report
