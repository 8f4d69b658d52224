"""Qualified conditions, their guarded blocks, and per-function rewriting."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

from ..isa import Function, Op, Program, s32

# instructions a block may contain and still be moved into a payload verbatim
MOVABLE = frozenset({Op.CONST, Op.MOV, Op.ALU, Op.OUT, Op.CALL})


class QualifiedCondition(NamedTuple):
    function: str
    index: int
    const: int  # signed 32-bit view of the immediate


def find_qualified_conditions(prog: Program) -> list[QualifiedCondition]:
    """Every ``v == const`` branch (JEQC or JNEC), in function then index order."""
    out = []
    for fn in prog.functions:
        for i, ins in enumerate(fn.code):
            if ins[0] in (Op.JEQC, Op.JNEC):
                out.append(QualifiedCondition(fn.name, i, s32(ins[2])))
    return out


@dataclass(frozen=True)
class Block:
    """What runs when the condition holds.

    ``region`` is the half-open instruction range a rewrite replaces, and
    ``cont`` the index execution continues at afterwards.  For canonical
    shapes the block body is ``code[body[0]:body[1]]``; otherwise ``body`` is
    None, the payload is empty and the original branch target is kept.
    """

    function: int
    cond: int
    reg: int
    const: int
    region: tuple[int, int]
    cont: int
    body: Optional[tuple[int, int]]


def _jump_targets_from_outside(fn: Function, lo: int, hi: int) -> set[int]:
    hits = set()
    for j, ins in enumerate(fn.code):
        if lo <= j < hi:
            continue
        if ins[0] in (Op.JMP,):
            hits.add(ins[1])
        elif ins[0] in (Op.JEQC, Op.JNEC):
            hits.add(ins[3])
        elif ins[0] == Op.HASHEQ:
            hits.add(ins[5])
    return hits


def _movable(fn: Function, lo: int, hi: int, head: Optional[int] = None) -> bool:
    """Straight-line body in [lo, hi) entered only through the branch at ``head``."""
    if lo >= hi:
        return False
    if any(fn.code[k][0] not in MOVABLE for k in range(lo, hi)):
        return False
    entered = _jump_targets_from_outside(fn, lo - 1 if head is None else head, hi)
    return not any(lo <= t < hi for t in entered)


def analyse_block(prog: Program, fi: int, i: int) -> Block:
    fn = prog.functions[fi]
    ins = fn.code[i]
    op, reg, imm, target = ins
    if op == Op.JNEC and target > i + 1 and _movable(fn, i + 1, target):
        return Block(fi, i, reg, imm, (i, target), target, (i + 1, target))
    if (op == Op.JEQC and target == i + 2 and i + 1 < len(fn.code)
            and fn.code[i + 1][0] == Op.JMP):
        end = fn.code[i + 1][1]
        if end > i + 2 and _movable(fn, i + 2, end, head=i):
            # the JMP at i+1 must not be a jump target either
            if i + 1 not in _jump_targets_from_outside(fn, i, end):
                return Block(fi, i, reg, imm, (i, end), end, (i + 2, end))
    # generic fallback: keep both successors, bomb carries no original code
    if op == Op.JEQC:
        return Block(fi, i, reg, imm, (i, i + 1), target, None)
    return Block(fi, i, reg, imm, (i, i + 1), i + 1, None)


def edit_program(prog: Program, fns: dict[int, Function]) -> Program:
    out = list(prog.functions)
    for k, f in fns.items():
        out[k] = f
    return replace(prog, functions=tuple(out))
