"""Code manipulation: payload injection, bomb inlining, binary patching, path redirection.

Every function here returns an *unsigned* bundle with a fresh manifest,
except ``repackage``, which signs with the attacker's key.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable, Mapping, Optional, Union

from ..bundle import Bundle, KeyPair, Section, SectionKind, sign
from ..isa import (
    NATIVE_MAGIC,
    Function,
    Op,
    Program,
    Sys,
    decode_native,
    decode_program,
    encode_native,
    encode_program,
    native_header,
    patch_native_strings,
    u32,
)
from ..rewrite import FunctionEditor, ProgramBuilder, referenced_strings, strip_tamper_checks
from ..vm import HookTable

SENTINEL = 0xDEAD


class NoMatchingCheck(LookupError):
    """No TCHK with the given expected value exists in the native section."""


def sentinel_payload(value: int = SENTINEL, name: str = "__payload") -> Function:
    """Attacker code that just announces itself on the output stream."""
    return Function(name, 0, 1, ((Op.CONST, 0, u32(value)), (Op.OUT, 0), (Op.RET, 0)))


def code_program(bundle: Bundle) -> Program:
    return decode_program(bundle.data("code"))


def rebuilt(bundle: Bundle) -> Bundle:
    """Same sections, recomputed manifest, no signature."""
    return Bundle.build(bundle.sections)


def with_code(bundle: Bundle, prog: Program) -> Bundle:
    return rebuilt(bundle.with_section(Section("code", SectionKind.CODE, encode_program(prog))))


# -- payload injection and resigning --------------------------------------------


def inject_payload(bundle: Bundle, payload: Function) -> Bundle:
    """Append ``payload`` to the code and call it first thing in the entry function."""
    prog = code_program(bundle)
    pb = ProgramBuilder(prog)
    idx = pb.add_function(payload)
    ed = FunctionEditor(prog.functions[prog.entry])
    ed.head.append((Op.CALL, ed.scratch(), idx, ()))
    pb.functions[prog.entry] = ed.build()[0]
    return with_code(bundle, pb.build())


def repackage(bundle: Bundle, payload: Optional[Function], attacker_key: KeyPair) -> Bundle:
    out = inject_payload(bundle, payload) if payload is not None else rebuilt(bundle)
    return sign(out, attacker_key)


# -- tampering helpers used to probe detection ----------------------------------


def tamper_code(bundle: Bundle, function: Optional[str] = None) -> Bundle:
    """Change one byte of a function's name in "code" and re-encode.

    The instruction stream is untouched, so behavior is unchanged unless
    the app checks its own bytes.
    """
    prog = code_program(bundle)
    fi = prog.entry if function is None else prog.function_index(function)
    fn = prog.functions[fi]
    c = fn.name[0]
    name = ("Y" if c != "Y" else "Z") + fn.name[1:]
    return with_code(bundle, prog.with_function(fi, replace(fn, name=name)))


def flip_byte(bundle: Bundle, section: str, offset: int = -1) -> Bundle:
    data = bytearray(bundle.data(section))
    data[offset] ^= 0x01
    s = bundle.section(section)
    return rebuilt(bundle.with_section(Section(section, s.kind, bytes(data))))


# -- bomb inlining ------------------------------------------------------------


def locate_bomb(fn: Function, index: int) -> tuple[int, int, int]:
    """(HASHEQ index, stub start, DYNLOAD index) for a site given either end of it."""
    ins = fn.code[index]
    if ins[0] == Op.HASHEQ:
        t = ins[5]
        for d in range(t, min(t + 3, len(fn.code))):
            if fn.code[d][0] == Op.DYNLOAD:
                return index, t, d
        raise ValueError(f"{fn.name}[{index}]: HASHEQ target does not lead to a DYNLOAD")
    if ins[0] == Op.DYNLOAD:
        for h, other in enumerate(fn.code):
            if other[0] == Op.HASHEQ and index - 2 <= other[5] <= index:
                between = fn.code[other[5]:index]
                if all(x[0] in (Op.CKSUM, Op.ALU) for x in between):
                    return h, other[5], index
        raise ValueError(f"{fn.name}[{index}]: DYNLOAD has no guarding HASHEQ")
    raise ValueError(f"{fn.name}[{index}]: not a bomb instruction")


Resolver = Callable[[str, tuple], Optional[Program]]


def patch_inline(bundle: Bundle, site, plaintext: Union[Program, bytes],
                 payload: Optional[Function] = None, const: Optional[int] = None,
                 resolve: Optional[Union[Resolver, Mapping[str, Program]]] = None,
                 original_signer: Optional[int] = None, strip_checks: bool = True) -> Bundle:
    """Replace one bomb in "code" by its decrypted body.

    ``site`` names the HASHEQ or the DYNLOAD (anything with ``function`` and
    ``index``).  The stub between them is replaced by ``plaintext`` inlined
    in the host's registers, with nested DYNLOAD/NATCALLs inlined too when
    ``resolve`` knows their plaintext.  With ``const`` the HASHEQ itself
    becomes the original ``JEQC``.  Tamper checks in inlined code are
    dropped (and signer queries pinned to ``original_signer``) unless
    ``strip_checks`` is False.  Sections that end up unreferenced are deleted.
    """
    if isinstance(plaintext, (bytes, bytearray)):
        plaintext = decode_program(bytes(plaintext))
    if isinstance(resolve, Mapping):
        table = resolve
        resolve = lambda name, ins: table.get(name)  # noqa: E731
    prog = code_program(bundle)
    fi = prog.function_index(site.function)
    fn = prog.functions[fi]
    h, t, d = locate_bomb(fn, site.index)
    dyn = fn.code[d]
    consumed = {prog.strings[dyn[1]]}

    def res(name: str, ins: tuple) -> Optional[Program]:
        inner = resolve(name, ins) if resolve is not None else None
        if inner is not None:
            consumed.add(name)
        return inner

    pb = ProgramBuilder(prog)
    ed = FunctionEditor(fn)
    host = [ed.n_regs]
    transform = strip_tamper_checks(original_signer) if strip_checks else None
    items = pb.inline_call(plaintext, dyn[3], host, res, transform)
    ed.n_regs = host[0]
    if payload is not None:
        items = [(Op.CALL, ed.scratch(), pb.add_function(payload), ())] + items
    ed.replace(t, d + 1, items)
    if const is not None:
        hq = fn.code[h]
        ed.replace(h, h + 1, [(Op.JEQC, hq[1], u32(const), ed.label(hq[5]))])
    pb.functions[fi] = ed.build()[0]
    new = pb.build()
    out = with_code(bundle, new)
    still = referenced_strings(new)
    for name in sorted(consumed - still):
        out = out.without_section(name)
    return rebuilt(out)


# -- binary patching of natives ----------------------------------------------


def _patch_native(bundle: Bundle, name: str, key: Optional[bytes],
                  edit: Callable[[tuple], tuple]) -> tuple[Bundle, int]:
    data = bundle.data(name)
    encrypted = native_header(data).encrypted
    if encrypted and key is None:
        raise ValueError(f"native section {name!r} is encrypted; a dumped key is needed")
    blob = decode_native(data, key if encrypted else None)
    hits = 0
    fns = []
    for fn in blob.functions:
        code = []
        for ins in fn.code:
            new = edit(ins)
            hits += new != ins
            code.append(new)
        fns.append(replace(fn, code=tuple(code)))
    if not hits:
        return bundle, 0
    enc = encode_native(replace(blob, functions=tuple(fns)), key if encrypted else None)
    return rebuilt(bundle.with_section(Section(name, SectionKind.NATIVE, enc))), hits


def patch_checksum(bundle: Bundle, native_section: str, old32: int, new32: int,
                   key: Optional[bytes] = None) -> Bundle:
    """Overwrite the expected value of every TCHK comparing against ``old32``."""
    old32, new32 = u32(old32), u32(new32)
    found = False

    def edit(ins: tuple) -> tuple:
        nonlocal found
        if ins[0] == Op.TCHK and ins[3] == old32:
            found = True
            return ins[:3] + (new32,) + ins[4:]
        return ins

    out, _ = _patch_native(bundle, native_section, key, edit)
    if not found:
        raise NoMatchingCheck(f"{native_section}: no TCHK expects 0x{old32:08x}")
    return out


def tchk_sites(bundle: Bundle, native_section: str, key: Optional[bytes] = None) -> list[tuple]:
    """The TCHK instructions of a native section (decrypting with ``key`` if needed)."""
    data = bundle.data(native_section)
    blob = decode_native(data, key if native_header(data).encrypted else None)
    return [ins for fn in blob.functions for ins in fn.code if ins[0] == Op.TCHK]


def redirect_integrity(bundle: Bundle, pristine: Optional[bytes] = None, target: str = "code",
                       copy: str = "code_orig") -> Bundle:
    """Point every native's hardcoded ``target`` path at a pristine copy.

    The copy is taken from ``pristine`` or, by default, from the current
    ``target`` section, which must therefore still be untampered.  Bundles
    without any native referring to ``target`` come back unchanged.
    """
    out = bundle
    patched = False
    for s in bundle.sections:
        if s.kind != SectionKind.NATIVE or not s.data.startswith(NATIVE_MAGIC):
            continue
        strings = native_header(s.data).strings
        if target in strings:
            new = tuple(copy if x == target else x for x in strings)
            out = out.with_section(Section(s.name, s.kind, patch_native_strings(s.data, new)))
            patched = True
    if patched:
        data = pristine if pristine is not None else bundle.data(target)
        out = out.with_section(Section(copy, bundle.section(target).kind, data))
    return rebuilt(out)


# -- signer spoofing and straight code edits ---------------------------------------


def hijack_signer(hooks: HookTable, original_digest32: int) -> HookTable:
    overrides = dict(hooks.sys_override)
    overrides[Sys.GET_SIGNER_DIGEST32] = lambda: original_digest32
    return replace(hooks, sys_override=overrides)


def _edit_code(bundle: Bundle, edit: Callable[[tuple], Iterable[tuple]], natives: bool = True) -> Bundle:
    """Apply a one-to-one instruction edit to "code" and to cleartext natives."""
    prog = code_program(bundle)
    fns = []
    for fn in prog.functions:
        code = tuple(edit(ins) for ins in fn.code)
        fns.append(replace(fn, code=code))
    out = with_code(bundle, replace(prog, functions=tuple(fns)))
    if natives:
        for s in bundle.sections:
            if s.kind == SectionKind.NATIVE and not native_header(s.data).encrypted:
                out, _ = _patch_native(out, s.name, None, edit)
    return out


def pin_signer(bundle: Bundle, original_digest32: int) -> Bundle:
    """Statically replace every signer query by the developer's digest."""

    def edit(ins: tuple) -> tuple:
        if ins[0] == Op.SYS and ins[1] == Sys.GET_SIGNER_DIGEST32:
            return (Op.CONST, ins[2], u32(original_digest32))
        return ins

    return _edit_code(bundle, edit)


def replace_checksums(bundle: Bundle, values: Mapping[tuple[str, str, int], int]) -> Bundle:
    """Turn each CKSUM at (section, function, index) into a CONST of the harvested value."""
    by_section: dict[str, dict[tuple[str, int], int]] = {}
    for (sect, func, idx), v in values.items():
        by_section.setdefault(sect, {})[(func, idx)] = v
    out = bundle
    for sect, table in sorted(by_section.items()):
        if sect == "code":
            prog = code_program(out)
            fns = [replace(fn, code=tuple(
                (Op.CONST, ins[1], u32(table[(fn.name, i)]))
                if ins[0] == Op.CKSUM and (fn.name, i) in table else ins
                for i, ins in enumerate(fn.code))) for fn in prog.functions]
            out = with_code(out, replace(prog, functions=tuple(fns)))
        else:
            data = out.data(sect)
            blob = decode_native(data)
            fns = [replace(fn, code=tuple(
                (Op.CONST, ins[1], u32(table[(fn.name, i)]))
                if ins[0] == Op.CKSUM and (fn.name, i) in table else ins
                for i, ins in enumerate(fn.code))) for fn in blob.functions]
            enc = encode_native(replace(blob, functions=tuple(fns)))
            out = rebuilt(out.with_section(Section(sect, SectionKind.NATIVE, enc)))
    return out


def delete_calls(bundle: Bundle, function: str, callee: int) -> Bundle:
    """Remove every direct CALL to function index ``callee`` inside ``function``."""
    prog = code_program(bundle)
    fi = prog.function_index(function)
    fn = prog.functions[fi]
    ed = FunctionEditor(fn)
    for i, ins in enumerate(fn.code):
        if ins[0] == Op.CALL and ins[2] == callee:
            ed.replace(i, i + 1, [])
    return with_code(bundle, prog.with_function(fi, ed.build()[0]))
