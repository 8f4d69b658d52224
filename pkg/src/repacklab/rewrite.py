"""Instruction-list rewriting: labels, operand remapping, function import, inlining.

Functions are lifted to a flat list of ``Label`` markers and instructions whose
jump targets are ``Label`` objects, edited freely, then assembled back.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable, Optional

from .isa import _LAYOUT, TARGET_POS, Function, NativeBlob, Op, Program, Sys


class Label:
    __slots__ = ("name",)

    def __init__(self, name: str = "") -> None:
        self.name = name

    def __repr__(self) -> str:
        return f"<{self.name or hex(id(self))}>"


# positions of operands that index a program table
REF_POS: dict[Op, dict[int, str]] = {
    Op.CALL: {2: "fn"},
    Op.CALLIND: {2: "slot"},
    Op.HASHEQ: {3: "blob"},
    Op.DYNLOAD: {1: "string"},
    Op.NATCALL: {1: "string", 2: "blob"},
    Op.TCHK: {1: "string"},
    Op.CKSUM: {2: "string"},
}


def lift(fn: Function) -> tuple[list, list[Label]]:
    labels = [Label(f"{fn.name}:{i}") for i in range(len(fn.code) + 1)]
    items: list = []
    for i, ins in enumerate(fn.code):
        items.append(labels[i])
        items.append(retarget(ins, lambda t: labels[t]))
    items.append(labels[-1])
    return items, labels


def retarget(ins: tuple, f: Callable) -> tuple:
    pos = TARGET_POS.get(ins[0])
    if pos is None:
        return ins
    return ins[:pos] + (f(ins[pos]),) + ins[pos + 1:]


def assemble(items: Iterable) -> tuple:
    return assemble_with_labels(items)[0]


def assemble_with_labels(items: Iterable) -> tuple[tuple, dict[int, int]]:
    """Assemble and also return ``id(label) -> instruction index``."""
    items = list(items)
    where: dict[int, int] = {}
    n = 0
    for it in items:
        if isinstance(it, Label):
            where[id(it)] = n
        else:
            n += 1
    out = []
    for it in items:
        if isinstance(it, Label):
            continue
        pos = TARGET_POS.get(it[0])
        if pos is not None and isinstance(it[pos], Label):
            try:
                it = it[:pos] + (where[id(it[pos])],) + it[pos + 1:]
            except KeyError:
                raise ValueError(f"unplaced label {it[pos]!r}") from None
        out.append(it)
    return tuple(out), where


def map_instruction(ins: tuple, reg: Optional[Callable[[int], int]] = None,
                    refs: Optional[dict[str, Callable[[int], int]]] = None) -> tuple:
    op = ins[0]
    kinds = _LAYOUT[op]
    refpos = REF_POS.get(op, {})
    out = [op]
    for i, (kind, val) in enumerate(zip(kinds, ins[1:]), start=1):
        if kind == "R" and reg is not None:
            val = reg(val)
        elif kind == "A" and reg is not None:
            val = tuple(reg(r) for r in val)
        elif i in refpos and refs is not None and refpos[i] in refs:
            val = refs[refpos[i]](val)
        out.append(val)
    return tuple(out)


def referenced_strings(prog: Program) -> set[str]:
    names = set()
    for fn in prog.functions:
        for ins in fn.code:
            for pos, kind in REF_POS.get(ins[0], {}).items():
                if kind == "string":
                    names.add(prog.strings[ins[pos]])
    return names


class ProgramBuilder:
    """Mutable program under construction.

    ``import_function`` copies a function (and everything it calls) from another
    program, remapping table indices; ``inline_call`` splices a callee's entry
    body in place of a call, with its registers mapped into the host function.
    """

    def __init__(self, prog: Program):
        self.functions = list(prog.functions)
        self.strings = list(prog.strings)
        self.blobs = list(prog.blobs)
        self.dispatch = list(prog.dispatch)
        self.entry = prog.entry
        self.flags = getattr(prog, "flags", None)
        self._imported: dict[tuple[int, int], int] = {}
        self._slots: dict[tuple[int, int], int] = {}
        self._keep: list[Program] = []  # pin sources so id() stays unique

    def build(self) -> Program:
        kw = dict(functions=tuple(self.functions), strings=tuple(self.strings),
                  blobs=tuple(self.blobs), dispatch=tuple(self.dispatch), entry=self.entry)
        if self.flags is not None:
            return NativeBlob(flags=self.flags, **kw)
        return Program(**kw)

    def string(self, s: str) -> int:
        if s not in self.strings:
            self.strings.append(s)
        return self.strings.index(s)

    def blob(self, b: bytes) -> int:
        b = bytes(b)
        if b not in self.blobs:
            self.blobs.append(b)
        return self.blobs.index(b)

    def add_function(self, fn: Function) -> int:
        self.functions.append(fn)
        return len(self.functions) - 1

    def add_slot(self, fn_index: int) -> int:
        self.dispatch.append(fn_index)
        return len(self.dispatch) - 1

    def refs_from(self, src: Program) -> dict[str, Callable[[int], int]]:
        return {
            "string": lambda i: self.string(src.strings[i]),
            "blob": lambda i: self.blob(src.blobs[i]),
            "fn": lambda i: self.import_function(src, i),
            "slot": lambda i: self._import_slot(src, i),
        }

    def _import_slot(self, src: Program, slot: int) -> int:
        key = (id(src), slot)
        if key not in self._slots:
            self._slots[key] = self.add_slot(self.import_function(src, src.dispatch[slot]))
        return self._slots[key]

    def import_function(self, src: Program, index: int) -> int:
        key = (id(src), index)
        if key in self._imported:
            return self._imported[key]
        self._keep.append(src)
        fn = src.functions[index]
        slot = self.add_function(fn)  # placeholder keeps recursion finite
        self._imported[key] = slot
        refs = self.refs_from(src)
        code = tuple(map_instruction(ins, refs=refs) for ins in fn.code)
        self.functions[slot] = replace(fn, code=code)
        return slot

    def inline_call(self, src: Program, arg_regs: tuple, host_regs: list[int],
                    resolve: Optional[Callable[[str, tuple], Optional[Program]]] = None,
                    transform: Optional[Callable[[tuple], list]] = None) -> list:
        """Items implementing ``src``'s entry function in host register space.

        ``host_regs`` is a one-element list holding the host function's register
        count; it grows as callee scratch registers are allocated.  ``resolve``
        may return the plaintext program behind a nested DYNLOAD/NATCALL (given
        the section name and the instruction), which is then inlined as well.
        ``transform`` rewrites each callee instruction (after mapping) into a
        list of instructions; an empty list drops it.
        """
        self._keep.append(src)
        fn = src.functions[src.entry]
        rmap = {j: r for j, r in enumerate(arg_regs)}
        fresh = []
        for j in range(fn.n_regs):
            if j not in rmap:
                rmap[j] = host_regs[0]
                fresh.append(host_regs[0])
                host_regs[0] += 1
        end = Label(f"{fn.name}:inline-end")
        items: list = [(Op.CONST, r, 0) for r in fresh]
        body, _ = lift(fn)
        refs = self.refs_from(src)
        for it in body:
            if isinstance(it, Label):
                items.append(it)
                continue
            op = it[0]
            if op == Op.RET:
                items.append((Op.JMP, end))
                continue
            if op in (Op.DYNLOAD, Op.NATCALL) and resolve is not None:
                inner = resolve(src.strings[it[1]], it)
                if inner is not None:
                    inner_args = tuple(rmap[r] for r in it[3])
                    items.extend(self.inline_call(inner, inner_args, host_regs, resolve, transform))
                    continue
            mapped = map_instruction(it, reg=rmap.__getitem__, refs=refs)
            items.extend(transform(mapped) if transform else [mapped])
        items.append(end)
        return items


def strip_tamper_checks(original_signer: Optional[int]) -> Callable[[tuple], list]:
    """Attacker-side instruction transform: drop TCHKs and pin the signer identity."""

    def transform(ins: tuple) -> list:
        if ins[0] == Op.TCHK:
            return []
        if ins[0] == Op.SYS and ins[1] == Sys.GET_SIGNER_DIGEST32 and original_signer is not None:
            return [(Op.CONST, ins[2], original_signer)]
        return [ins]

    return transform


class FunctionEditor:
    """Replace instruction ranges of one function and append tail code.

    Replacement items may jump to ``label(k)``, the label of original index k;
    labels of replaced instructions stay placed at the start of their
    replacement.  ``marks`` are Labels whose final indices ``build`` reports.
    """

    def __init__(self, fn: Function):
        self.fn = fn
        self.labels = [Label(f"{fn.name}:{k}") for k in range(len(fn.code) + 1)]
        self.edits: dict[int, tuple[int, list]] = {}
        self.head: list = []
        self.tail: list = []
        self.n_regs = fn.n_regs

    def label(self, k: int) -> Label:
        return self.labels[k]

    def scratch(self) -> int:
        r = self.n_regs
        self.n_regs += 1
        return r

    def replace(self, lo: int, hi: int, items: list) -> None:
        for a, (b, _) in self.edits.items():
            if lo < b and a < hi:
                raise ValueError(f"overlapping edits at {lo} and {a}")
        self.edits[lo] = (hi, items)

    def build(self) -> tuple[Function, dict[int, int]]:
        code = self.fn.code
        items: list = [self.labels[0]]
        items.extend(self.head)
        i = 0
        while i < len(code):
            if i:
                items.append(self.labels[i])
            if i in self.edits:
                hi, repl = self.edits[i]
                items.extend(self.labels[k] for k in range(i + 1, hi))
                items.extend(repl)
                i = hi
            else:
                items.append(retarget(code[i], self.label))
                i += 1
        items.append(self.labels[len(code)])
        items.extend(self.tail)
        new_code, where = assemble_with_labels(items)
        if self.n_regs > 255:
            raise ValueError(f"{self.fn.name}: register budget exhausted")
        return replace(self.fn, n_regs=self.n_regs, code=new_code), where
