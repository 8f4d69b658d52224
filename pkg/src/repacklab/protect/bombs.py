"""Logic-bomb passes: SDC, BombDroid and NRP.

All three share one skeleton.  Qualified conditions are selected, each
``v == const`` test becomes a HASHEQ on a truncated trigger digest, and the
guarded block moves into an AES-CTR encrypted code section that a DYNLOAD
opens with a key derived from the runtime value.  They differ in what the
stub feeds the key derivation and in what the payload does besides the block.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Optional

from ..bundle import Bundle, ChecksumMode, KeyPair, Section, SectionKind, checksum32, signer_digest32
from ..crypto import aes_ctr, derive_key, trigger_hash
from ..isa import (
    Alu,
    CrashCode,
    Function,
    HashAlg,
    NativeBlob,
    Op,
    Program,
    Sys,
    encode_native,
    encode_program,
    s32,
    u32,
)
from ..rewrite import FunctionEditor, Label, ProgramBuilder, assemble_with_labels, map_instruction
from .report import BombSite, NothingToProtect, ProtectError, ProtectionReport, SchemeConfig
from .sites import Block, analyse_block, find_qualified_conditions


# -- site selection ------------------------------------------------------------


def inject_artificial_condition(prog: Program, rng: random.Random, lo: int, hi: int) -> Program:
    """Prepend ``JEQC r0, k, 1`` to the entry function; both successors coincide."""
    fn = prog.functions[prog.entry]
    ed = FunctionEditor(fn)
    if fn.n_regs == 0:
        ed.scratch()
    k = rng.randint(lo, hi)
    nxt = Label("artificial-next")
    ed.head.extend([(Op.JEQC, 0, u32(k), nxt), nxt])
    new_fn, _ = ed.build()
    fns = list(prog.functions)
    fns[prog.entry] = new_fn
    return Program(fns, prog.strings, prog.blobs, prog.dispatch, prog.entry)


def select_sites(prog: Program, config: SchemeConfig, rng: random.Random):
    conds = find_qualified_conditions(prog)
    artificial = False
    if not conds:
        if not config.inject_artificial:
            raise NothingToProtect("program has no qualified condition")
        prog = inject_artificial_condition(prog, rng, *config.const_range)
        conds = find_qualified_conditions(prog)
        artificial = True
    n = math.ceil(config.bomb_density * len(conds) - 1e-9)
    chosen = sorted(rng.sample(range(len(conds)), n))
    return prog, conds, [conds[k] for k in chosen], artificial


class CollisionGuard:
    """Rejects trigger digests that a different plausible value also produces.

    The checked domain is the configured constant range plus every constant
    the program compares against.
    """

    def __init__(self, prog: Program, const_range: tuple[int, int]):
        lo, hi = const_range
        dom = {u32(v) for v in range(lo, hi + 1)}
        dom |= {u32(c.const) for c in find_qualified_conditions(prog)}
        self.domain = sorted(dom)
        self._tables: dict[tuple[bytes, int], dict[int, list[int]]] = {}

    def collides(self, value: int, salt: bytes, alg: HashAlg) -> bool:
        value = u32(value)
        digest = trigger_hash(value, salt, alg)
        if salt:
            return any(v != value and trigger_hash(v, salt, alg) == digest for v in self.domain)
        key = (salt, int(alg))
        table = self._tables.get(key)
        if table is None:
            table = {}
            for v in self.domain:
                table.setdefault(trigger_hash(v, salt, alg), []).append(v)
            self._tables[key] = table
        return any(v != value for v in table.get(digest, ()))


def draw_trigger(value: int, policy: str, alg: HashAlg, guard: CollisionGuard,
                 rng: random.Random, where: str) -> tuple[bytes, int]:
    for _ in range(64):
        salt = rng.randbytes(16) if policy == "random16" else b""
        if not guard.collides(value, salt, alg):
            return salt, trigger_hash(value, salt, alg)
        if policy != "random16":
            raise ProtectError(f"{where}: 32-bit trigger digest of {s32(value)} collides with "
                               "another value in the constant domain and there is no salt to redraw")
    raise ProtectError(f"{where}: could not find a collision-free salt")  # pragma: no cover


# -- payload programs -------------------------------------------------------


class Payload:
    """Builds a single-entry program whose body is spliced from the original."""

    def __init__(self, orig: Program, n_params: int, native_flags: Optional[int] = None):
        base = NativeBlob(functions=(), flags=native_flags) if native_flags is not None else Program(())
        self.pb = ProgramBuilder(base)
        self.pb.add_function(Function("invoke", n_params, n_params, ()))
        self.orig = orig
        self.n_params = n_params
        self.n_regs = n_params
        self.items: list = []
        self._refs = self.pb.refs_from(orig)

    def copy(self, instructions) -> None:
        for ins in instructions:
            self.items.append(map_instruction(ins, refs=self._refs))

    def emit(self, *items) -> None:
        self.items.extend(items)

    def scratch(self) -> int:
        r = self.n_regs
        self.n_regs += 1
        return r

    def finish(self) -> tuple[Program, dict[int, int]]:
        if self.n_regs == 0:
            self.scratch()
        code, where = assemble_with_labels(self.items + [(Op.RET, 0)])
        self.pb.functions[0] = Function("invoke", self.n_params, self.n_regs, code)
        self.pb.entry = 0
        return self.pb.build(), where


def emit_tamper_checks(p: Payload, scope: tuple[str, ...], dev_digest: int,
                       code_expected: tuple[int, int], resources: list[tuple[str, int, int]]) -> None:
    if "signature" in scope:
        r = p.scratch()
        ok = Label("sig-ok")
        p.emit((Op.SYS, Sys.GET_SIGNER_DIGEST32, r), (Op.JEQC, r, dev_digest, ok),
               (Op.CRASH, CrashCode.TAMPER_DETECTED), ok)
    if "code_prefix" in scope:
        count, expected = code_expected
        p.emit((Op.TCHK, p.pb.string("code"), count, expected, ChecksumMode.FIXED))
    if "resource" in scope:
        for name, count, expected in resources:
            p.emit((Op.TCHK, p.pb.string(name), count, expected, ChecksumMode.FIXED))


# -- the shared rewrite -----------------------------------------------------


@dataclass
class Plan:
    block: Block
    fn_name: str
    value: int  # u32 constant
    salt: bytes
    alg: HashAlg
    digest: int
    section: str
    artificial: bool
    origin: tuple[str, int]
    index: int = -1


StubFn = Callable[[FunctionEditor, Plan, ProgramBuilder, int], list]


def rewrite_sites(prog: Program, plans: list[Plan], stub: StubFn) -> Program:
    """Replace every planned condition by HASHEQ + stub, filling ``plan.index``."""
    pb = ProgramBuilder(prog)
    by_fn: dict[int, list[Plan]] = {}
    for pl in plans:
        by_fn.setdefault(pl.block.function, []).append(pl)
    for fi, group in by_fn.items():
        fn = prog.functions[fi]
        ed = FunctionEditor(fn)
        marks = []
        for pl in group:
            b = pl.block
            bomb = Label(f"bomb-{pl.section}")
            mark = Label(f"site-{pl.section}")
            marks.append((pl, mark))
            hasheq = (Op.HASHEQ, b.reg, pl.digest, pb.blob(pl.salt), int(pl.alg), bomb)
            body = stub(ed, pl, pb, fn.n_regs)
            if b.body is not None:
                ed.replace(b.region[0], b.region[1],
                           [mark, hasheq, (Op.JMP, ed.label(b.cont)), bomb, *body])
            else:
                i = b.cond
                if prog.functions[fi].code[i][0] == Op.JEQC:
                    ed.replace(i, i + 1, [mark, hasheq])
                    ed.tail.extend([bomb, *body, (Op.JMP, ed.label(b.cont))])
                else:
                    ed.replace(i, i + 1, [mark, hasheq, (Op.JMP, ed.label(fn.code[i][3]))])
                    ed.tail.extend([bomb, *body, (Op.JMP, ed.label(i + 1))])
        new_fn, where = ed.build()
        pb.functions[fi] = new_fn
        for pl, mark in marks:
            pl.index = where[id(mark)]
    return pb.build()


def plan_sites(prog: Program, config: SchemeConfig, rng: random.Random, alg: HashAlg,
               section_prefix: str) -> tuple[Program, list, list[Plan], CollisionGuard]:
    prog, conds, chosen, artificial = select_sites(prog, config, rng)
    guard = CollisionGuard(prog, config.const_range)
    plans = []
    for k, qc in enumerate(chosen):
        fi = prog.function_index(qc.function)
        block = analyse_block(prog, fi, qc.index)
        value = u32(qc.const)
        salt, digest = draw_trigger(value, config.salt_policy, alg, guard, rng,
                                    f"{qc.function}[{qc.index}]")
        plans.append(Plan(block, qc.function, value, salt, alg, digest,
                          f"{section_prefix}{k}", artificial, (qc.function, qc.index)))
    return prog, conds, plans, guard


def _block_instructions(prog: Program, block: Block) -> tuple:
    if block.body is None:
        return ()
    fn = prog.functions[block.function]
    return fn.code[block.body[0]:block.body[1]]


def _resources(bundle: Bundle) -> list[tuple[str, int, int]]:
    return [(s.name, len(s.data), checksum32(s.data, len(s.data)))
            for s in bundle.sections if s.kind == SectionKind.RESOURCE and s.data]


def _code_expected(code: bytes, prefix_len: int) -> tuple[int, int]:
    n = min(prefix_len, len(code))
    return n, checksum32(code, n, ChecksumMode.FIXED)


def _site_record(pl: Plan, key_value: int, **extra) -> BombSite:
    return BombSite(
        function=pl.fn_name, index=pl.index, const_v=s32(pl.value), salt=pl.salt,
        alg=pl.alg.name.lower(), digest32=pl.digest, payload_section=pl.section,
        key_value=key_value, artificial=pl.artificial, origin=pl.origin, **extra)


def _finish(bundle: Bundle, code_prog: Program, extra: list[Section]) -> tuple[Bundle, bytes]:
    code = encode_program(code_prog)
    out = bundle.with_section(Section("code", SectionKind.CODE, code))
    for s in extra:
        out = out.with_section(s)
    return out, code


def _all_regs(n: int) -> tuple[int, ...]:
    return tuple(range(n))


# -- BombDroid ----------------------------------------------------------------


def protect_bombdroid(bundle: Bundle, prog: Program, config: SchemeConfig, dev_key: KeyPair,
                      rng: random.Random):
    prog, conds, plans, guard = plan_sites(prog, config, rng, HashAlg.SHA256, "bd_bomb")

    def stub(ed, pl, pb, R):
        return [(Op.DYNLOAD, pb.string(pl.section), pl.block.reg, _all_regs(R))]

    code_prog = rewrite_sites(prog, plans, stub)
    code = encode_program(code_prog)
    expected = _code_expected(code, config.prefix_len)
    resources = _resources(bundle)
    dev_digest = signer_digest32(dev_key.public_key)
    sections: list[Section] = []
    sites: list[BombSite] = []

    def build(name: str, key_value: int, depth: int, R: int, body: tuple) -> None:
        """Encrypted payload at nesting level ``depth`` (1 = outermost)."""
        p = Payload(prog, R)
        p.copy(body)
        nested = None
        if depth < config.nesting_depth and R > 0:
            reg = rng.randrange(R)
            value = u32(rng.randint(*config.const_range))
            salt, digest = draw_trigger(value, config.salt_policy, HashAlg.SHA256, guard, rng, name)
            inner = f"{name}_{depth + 1}"
            fire, after, mark = Label("nested"), Label("after"), Label("mark")
            p.emit(mark, (Op.HASHEQ, reg, digest, p.pb.blob(salt), int(HashAlg.SHA256), fire),
                   (Op.JMP, after), fire,
                   (Op.DYNLOAD, p.pb.string(inner), reg, _all_regs(R)), after)
            nested = (inner, value, salt, digest, mark)
        emit_tamper_checks(p, config.tamper_scope, dev_digest, expected, resources)
        payload, where = p.finish()
        sections.append(Section(name, SectionKind.CODE,
                                aes_ctr(encode_program(payload), derive_key(key_value))))
        if nested is not None:
            inner, value, salt, digest, mark = nested
            sites.append(BombSite("invoke", where[id(mark)], s32(value), salt, "sha256", digest,
                                  inner, value, host_section=name, depth=depth + 1,
                                  artificial=True))
            build(inner, value, depth + 1, R, ())

    for pl in plans:
        sites.append(_site_record(pl, pl.value))
        build(pl.section, pl.value, 1, prog.functions[pl.block.function].n_regs,
              _block_instructions(prog, pl.block))
    out, _ = _finish(bundle, code_prog, sections)
    report = ProtectionReport("bombdroid", config, sites, None, len(conds), len(plans),
                              details={"artificial_conditions": plans[0].artificial if plans else False,
                                       "dev_signer_digest32": dev_digest})
    return out, report


# -- SDC ----------------------------------------------------------------------


def protect_sdc(bundle: Bundle, prog: Program, config: SchemeConfig, dev_key: KeyPair,
                rng: random.Random):
    """Key = KDF(checksum32(code prefix) xor v); the stub recomputes the checksum."""
    prog, conds, plans, guard = plan_sites(prog, config, rng, HashAlg.SHA256, "sdc_seg")

    def build_code(count: int) -> Program:
        key_reg: dict[int, int] = {}

        def stub(ed, pl, pb, R):
            fi = pl.block.function
            if fi not in key_reg:
                key_reg[fi] = ed.scratch()
            rk = key_reg[fi]
            return [(Op.CKSUM, rk, pb.string("code"), 0, count, ChecksumMode.FIXED),
                    (Op.ALU, Alu.XOR, rk, rk, pl.block.reg),
                    (Op.DYNLOAD, pb.string(pl.section), rk, _all_regs(R))]

        return rewrite_sites(prog, plans, stub)

    code_prog = build_code(config.prefix_len)
    code = encode_program(code_prog)
    if len(code) < config.prefix_len:
        # immediates are fixed width, so shrinking the count keeps the length
        code_prog = build_code(len(code))
        code = encode_program(code_prog)
    count, cksum = _code_expected(code, config.prefix_len)
    sections, sites = [], []
    for pl in plans:
        p = Payload(prog, prog.functions[pl.block.function].n_regs)
        p.copy(_block_instructions(prog, pl.block))
        payload, _ = p.finish()
        key_value = cksum ^ pl.value
        sections.append(Section(pl.section, SectionKind.CODE,
                                aes_ctr(encode_program(payload), derive_key(key_value))))
        sites.append(_site_record(pl, key_value))
    out, _ = _finish(bundle, code_prog, sections)
    report = ProtectionReport("sdc", config, sites, None, len(conds), len(plans),
                              details={"code_checksum32": cksum, "checksum_count": count})
    return out, report


# -- NRP ----------------------------------------------------------------------


def protect_nrp(bundle: Bundle, prog: Program, config: SchemeConfig, dev_key: KeyPair,
                rng: random.Random):
    """Unsalted SHA-1 trigger; payload NATCALLs an XOR-encrypted native that runs
    the code-prefix TCHK and or_code1, then runs or_code2 itself."""
    prog, conds, plans, guard = plan_sites(prog, config, rng, HashAlg.SHA1, "nrp_cl")

    def stub(ed, pl, pb, R):
        return [(Op.DYNLOAD, pb.string(pl.section), pl.block.reg, _all_regs(R))]

    code_prog = rewrite_sites(prog, plans, stub)
    code = encode_program(code_prog)
    # the expected value always comes from the correct (unsigned) formula;
    # in buggy mode the TCHK evaluates the sign-extending one at runtime
    count, expected = _code_expected(code, config.prefix_len)
    sections, sites = [], []
    for k, pl in enumerate(plans):
        R = prog.functions[pl.block.function].n_regs
        body = _block_instructions(prog, pl.block)
        cut = len(body) // 2
        nat_name = f"nrp_nat{k}"
        native_key = rng.randbytes(16)

        nat = Payload(prog, R, native_flags=0)
        nat.emit((Op.TCHK, nat.pb.string("code"), count, expected, int(config.checksum_mode)))
        nat.copy(body[:cut])
        blob, _ = nat.finish()
        sections.append(Section(nat_name, SectionKind.NATIVE, encode_native(blob, native_key)))

        p = Payload(prog, R)
        p.emit((Op.NATCALL, p.pb.string(nat_name), p.pb.blob(native_key), _all_regs(R)))
        p.copy(body[cut:])
        payload, _ = p.finish()
        sections.append(Section(pl.section, SectionKind.CODE,
                                aes_ctr(encode_program(payload), derive_key(pl.value))))
        sites.append(_site_record(pl, pl.value, native_section=nat_name, native_key=native_key,
                                  split=(cut, len(body) - cut)))
    out, _ = _finish(bundle, code_prog, sections)
    report = ProtectionReport("nrp", config, sites, None, len(conds), len(plans),
                              details={"expected32": expected, "checksum_count": count,
                                       "checksum_mode": config.checksum_mode.name.lower()})
    return out, report
