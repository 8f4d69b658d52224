"""Seeded generator of small, loop-free apps with equality branches.

Each program has a 4-parameter ``main`` and 2-parameter helpers arranged as
a call DAG (helpers only call higher-numbered helpers), so every function is
reached on every run.  Qualified conditions test parameter registers, which
makes them drivable from inputs; the input suite mixes the program's own
constants with uniform draws so that conditions fire at a realistic rate.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from ..attack.pipelines import DEFAULT_ATTACKER_KEY
from ..bundle import Bundle, KeyPair, Section, SectionKind, sign
from ..isa import Alu, Function, Op, Program, decode_program, encode_program, s32, u32
from ..rewrite import Label, assemble
from ..vm import run

DEV_KEY = KeyPair.from_int(1)
ATTACKER_KEY = DEFAULT_ATTACKER_KEY
N_TEMPS = 4


class CorpusError(RuntimeError):
    """A program meeting the spec could not be generated within the retry budget."""


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_programs: int = 20
    n_functions: int = 8
    n_conditions: int = 6
    const_range: tuple[int, int] = (-1024, 1024)
    suite_size: int = 100
    main_params: int = 4
    helper_params: int = 2
    const_prob: float = 0.3  # chance an input value is one of the program's constants
    max_retries: int = 50

    def __post_init__(self) -> None:
        if self.n_programs < 0 or self.n_functions < 1 or self.n_conditions < 0:
            raise ValueError("counts must be non-negative (and at least one function)")
        lo, hi = self.const_range
        if lo > hi:
            raise ValueError("empty constant range")
        object.__setattr__(self, "const_range", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["const_range"] = list(self.const_range)
        return d


def _alu(rng: random.Random) -> Alu:
    return rng.choice((Alu.ADD, Alu.SUB, Alu.XOR, Alu.MUL))


def _gen_function(rng: random.Random, spec: CorpusSpec, index: int, n_params: int,
                  callees: list[int], helper_params: list[int], n_conds: int,
                  leafs: list[int]) -> Function:
    R = n_params + N_TEMPS
    temps = list(range(n_params, R))
    params = list(range(n_params))
    chunks: list[list] = []

    for k, t in enumerate(temps):
        a, b = rng.choice(params), rng.choice(params + temps[:k])
        if rng.random() < 0.3:
            chunks.append([(Op.CONST, t, u32(rng.randint(*spec.const_range)))])
        else:
            chunks.append([(Op.ALU, _alu(rng), t, a, b)])
    for c in callees:
        args = tuple(rng.choice(params) for _ in range(helper_params[c]))
        dst = rng.choice(temps)
        chunks.append([(Op.CALL, dst, c, args), (Op.OUT, dst)])

    def block() -> list:
        out = []
        for _ in range(rng.randint(1, 3)):
            t = rng.choice(temps)
            kind = rng.random()
            if kind < 0.3:
                out.append((Op.CONST, t, u32(rng.randint(*spec.const_range))))
            elif kind < 0.6:
                out.append((Op.ALU, _alu(rng), t, rng.choice(params + temps), rng.choice(params + temps)))
            elif kind < 0.8 or not leafs:
                out.append((Op.OUT, rng.choice(params + temps)))
            else:
                c = rng.choice(leafs)
                out.append((Op.CALL, t, c, tuple(rng.choice(params) for _ in range(helper_params[c]))))
        return out

    for _ in range(n_conds):
        reg = rng.choice(params)
        const = u32(rng.randint(*spec.const_range))
        end = Label("end")
        if rng.random() < 0.5:
            chunks.append([(Op.JNEC, reg, const, end), *block(), end])
        else:
            body = Label("body")
            chunks.append([(Op.JEQC, reg, const, body), (Op.JMP, end), body, *block(), end])
    rng.shuffle(chunks)
    items = [it for ch in chunks for it in ch]
    ret = rng.choice(temps)
    items += [(Op.OUT, ret), (Op.RET, ret)]
    name = "main" if index == 0 else f"f{index}"
    return Function(name, n_params, R, assemble(items))


def gen_program(rng: random.Random, spec: CorpusSpec) -> Program:
    n = spec.n_functions
    helper_params = [spec.main_params] + [spec.helper_params] * (n - 1)
    callees: list[list[int]] = [[] for _ in range(n)]
    for j in range(1, n):
        callees[rng.randrange(0, j)].append(j)
    conds = [0] * n
    for k in range(spec.n_conditions):
        conds[0 if k == 0 else rng.randrange(n)] += 1
    fns = []
    for i in range(n):
        leafs = [j for j in range(i + 1, n)]
        fns.append(_gen_function(rng, spec, i, helper_params[i], sorted(callees[i]),
                                 helper_params, conds[i], leafs))
    return Program(tuple(fns), entry=0)


def program_constants(prog: Program) -> list[int]:
    out = []
    for fn in prog.functions:
        for ins in fn.code:
            if ins[0] in (Op.JEQC, Op.JNEC):
                out.append(s32(ins[2]))
    return sorted(set(out))


def input_suite(bundle_or_prog, size: int = 100, seed: int = 0, n_inputs: int = 4,
                const_range: tuple[int, int] = (-1024, 1024), const_prob: float = 0.3) -> list[tuple[int, ...]]:
    """Deterministic input vectors for an (unprotected) app."""
    prog = bundle_or_prog if isinstance(bundle_or_prog, Program) else decode_program(
        bundle_or_prog.data("code"))
    consts = program_constants(prog)
    h = hashlib.sha256(encode_program(prog)).hexdigest()
    rng = random.Random(f"suite/{seed}/{h}")
    suite = []
    for _ in range(size):
        vec = []
        for _ in range(n_inputs):
            if consts and rng.random() < const_prob:
                vec.append(u32(rng.choice(consts)))
            elif rng.random() < 0.5:
                vec.append(u32(rng.randint(*const_range)))
            else:
                vec.append(rng.getrandbits(32))
        suite.append(tuple(vec))
    return suite


def make_bundle(prog: Program, rng: random.Random, key: KeyPair = DEV_KEY) -> Bundle:
    sections = [Section("code", SectionKind.CODE, encode_program(prog)),
                Section("res0", SectionKind.RESOURCE, rng.randbytes(32))]
    return sign(Bundle.build(sections), key)


def gen_corpus(spec: CorpusSpec, key: KeyPair = DEV_KEY) -> list[Bundle]:
    out = []
    for p in range(spec.n_programs):
        rng = random.Random(f"corpus/{spec.seed}/{p}")
        for _ in range(spec.max_retries):
            prog = gen_program(rng, spec)
            bundle = make_bundle(prog, rng, key)
            suite = input_suite(bundle, spec.suite_size, spec.seed, spec.main_params,
                                spec.const_range, spec.const_prob)
            fired = False
            ok = True
            for vec in suite:
                res = run(bundle, vec)
                if not res.halted:
                    ok = False
                    break
                fired = fired or bool(res.trigger_log)
            if ok and (fired or spec.n_conditions == 0):
                out.append(bundle)
                break
        else:
            raise CorpusError(f"program {p}: no candidate fired a qualified condition")
    return out
