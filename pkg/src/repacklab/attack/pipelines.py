"""Per-scheme bypass pipelines.

A pipeline turns a protected, developer-signed bundle into an attacker-signed
one carrying a payload, then judges the result the way an attacker would:
it must verify, run the payload, never hit a tamper response on the input
suite, and otherwise behave exactly like the protected app.

Pipelines only use what an attacker has: the bundle bytes, the public key
in its signature block, and the ability to run it with hooks installed.
A ``ProtectionReport`` may be passed in, but only to score the outcome.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from ..bundle import (
    Bundle,
    ChecksumMode,
    KeyPair,
    SectionKind,
    checksum32,
    serialize,
    sign,
    signer_digest32,
    verify,
)
from ..crypto import aes_ctr, derive_key, trigger_hash
from ..equivalence import run_equivalence
from ..isa import (
    DecodeError,
    Function,
    Op,
    Program,
    Sys,
    decode_native,
    decode_program,
    native_body_plain,
    native_header,
    u32,
)
from ..rewrite import ProgramBuilder, map_instruction
from ..vm import HookTable, Trigger, run
from .dynamic import DumpedSecret, SecretLog, harvest_checksums, hook_dump, random_vector
from .patch import (
    SENTINEL,
    code_program,
    delete_calls,
    hijack_signer,
    inject_payload,
    locate_bomb,
    patch_checksum,
    patch_inline,
    pin_signer,
    rebuilt,
    redirect_integrity,
    replace_checksums,
    sentinel_payload,
    with_code,
)
from .scan import brute_force, scan_patterns, scan_program

ATTACK_SCHEMA_VERSION = 1
DEFAULT_ATTACKER_KEY = KeyPair.from_int(666)

QUIET_ROUNDS = 3  # a dump/harvest session stops after this many rounds without news
MAX_ROUNDS = 20
ROUND_SIZE = 50


# -- report -------------------------------------------------------------------


def _secret_to_json(s: DumpedSecret) -> dict:
    return {
        "site": list(s.site), "section": s.section, "kind": s.kind, "key": s.key.hex(),
        "key_value": s.key_value, "ciphertext": s.ciphertext.hex(), "plaintext": s.plaintext.hex(),
    }


def _secret_from_json(d: dict) -> DumpedSecret:
    return DumpedSecret(Trigger(*d["site"]), d["section"], d["kind"], bytes.fromhex(d["key"]),
                        d["key_value"], bytes.fromhex(d["ciphertext"]), bytes.fromhex(d["plaintext"]))


@dataclass
class AttackReport:
    pipeline: str
    scheme: str
    sites_found: int = 0
    sites_triggered: int = 0
    sites_neutralized: int = 0
    secrets: list = field(default_factory=list)
    bypass_success: bool = False
    verified: bool = False
    sentinel_observed: bool = False
    tamper_faults: int = 0
    equivalence: Optional[dict] = None
    output_digest: Optional[str] = None
    rounds: int = 0
    bombs_total: Optional[int] = None
    bombs_neutralized: Optional[int] = None
    notes: list = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["secrets"] = [_secret_to_json(s) for s in self.secrets]
        d["notes"] = list(self.notes)
        return {"schema_version": ATTACK_SCHEMA_VERSION, "kind": "attack", **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        if d.get("schema_version") != ATTACK_SCHEMA_VERSION or d.get("kind") != "attack":
            raise ValueError("not an attack report of a supported schema version")
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        kw["secrets"] = [_secret_from_json(s) for s in d.get("secrets", [])]
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls.from_dict(json.loads(text))


# -- attacker state -------------------------------------------------------------


class _Attack:
    def __init__(self, bundle: Bundle, suite, seed: int, payload: Optional[Function],
                 prior: Iterable[DumpedSecret]):
        self.bundle = bundle
        self.suite = suite
        self.seed = seed
        self.payload = payload
        self.signer = signer_digest32(bundle.signer_public_key)
        self.code = code_program(bundle)
        self.n_inputs = self.code.functions[self.code.entry].n_params
        self.log = SecretLog()
        for s in prior:
            self.log._add(s)
        self.rounds = 0
        self.notes: list[str] = []
        # recovered material, by section name
        self.plaintexts: dict[str, Program] = {}
        self.values: dict[str, int] = {}  # payload section -> trigger constant (u32)
        self.natives: dict[str, tuple[bytes, Program]] = {}
        self.static: dict[str, DumpedSecret] = {}
        self.triggered: Optional[int] = None  # set by strategies whose sites are not bombs

    def inject(self, b: Bundle) -> Bundle:
        return inject_payload(b, self.payload) if self.payload is not None else rebuilt(b)

    # dynamic phase
    def dump_fixpoint(self) -> None:
        hook_dump(self.bundle, self.suite, self.seed, self.log)
        quiet, r = 0, 0
        while quiet < QUIET_ROUNDS and r < MAX_ROUNDS:
            r += 1
            before = len(self.log.secrets)
            rng = random.Random(f"dump/{self.seed}/{r}")
            vecs = [random_vector(rng, self.n_inputs) for _ in range(ROUND_SIZE)]
            hook_dump(self.bundle, vecs, self.seed + 1_000_003 * r, self.log)
            quiet = quiet + 1 if len(self.log.secrets) == before else 0
        self.rounds = r + 1
        for s in self.log.secrets.values():
            if s.kind == "dynload":
                self.plaintexts[s.section] = s.program()
            else:
                self.natives[s.section] = (s.key, s.program())
        self._derive_values()

    @property
    def secrets(self) -> list[DumpedSecret]:
        out = dict(self.log.secrets)
        for k, v in self.static.items():
            out.setdefault(k, v)
        return list(out.values())

    def programs(self) -> list[tuple[str, Program]]:
        return [("code", self.code)] + sorted(self.plaintexts.items())

    def bombs(self):
        """(host section, function, HASHEQ index, HASHEQ, DYNLOAD section, stub) for readable bombs."""
        for sect, prog in self.programs():
            for fn in prog.functions:
                for i, ins in enumerate(fn.code):
                    if ins[0] != Op.HASHEQ:
                        continue
                    try:
                        _, t, d = locate_bomb(fn, i)
                    except ValueError:
                        continue
                    target = prog.strings[fn.code[d][1]]
                    yield sect, prog, fn, i, ins, target, fn.code[t:d]

    def _stub_checksum(self, prog: Program, stub: Sequence[tuple]) -> Optional[int]:
        for ins in stub:
            if ins[0] == Op.CKSUM:
                data = self.bundle.data(prog.strings[ins[2]])
                return checksum32(data, ins[4], ChecksumMode(ins[5]), ins[3])
        return None

    def _derive_values(self) -> None:
        """Trigger constants for dumped payloads (undoing a checksum mix-in if the stub has one)."""
        for sect, prog, fn, i, ins, target, stub in self.bombs():
            s = self.log.secrets.get(target)
            if s is None or target in self.values:
                continue
            mix = self._stub_checksum(prog, stub)
            v = s.key_value ^ mix if mix is not None else s.key_value
            if trigger_hash(v, prog.blobs[ins[3]], ins[4]) == ins[2]:
                self.values[target] = v

    # static phase
    def unlock(self, brute: bool, reuse: bool = True) -> int:
        """Open payloads from recovered or brute-forced constants; returns how many."""
        opened = 0
        progress = True
        while progress:
            progress = False
            known = {}
            for sect, prog, fn, i, ins, target, stub in self.bombs():
                if target in self.values:
                    known[(ins[2], prog.blobs[ins[3]], ins[4])] = self.values[target]
            for sect, prog, fn, i, ins, target, stub in list(self.bombs()):
                if target in self.plaintexts or self.bundle.get(target) is None:
                    continue
                sig = (ins[2], prog.blobs[ins[3]], ins[4])
                v = known.get(sig) if reuse else None
                if v is None and brute:
                    site = scan_program(Program((fn,), prog.strings, prog.blobs), sect)
                    hit = next(s for s in site if s.index == i)
                    found = brute_force(hit)
                    v = u32(found) if found is not None else None
                if v is None:
                    continue
                mix = self._stub_checksum(prog, stub)
                key_value = v ^ mix if mix is not None else v
                key = derive_key(key_value)
                ct = self.bundle.data(target)
                pt = aes_ctr(ct, key)
                try:
                    self.plaintexts[target] = decode_program(pt)
                except DecodeError:
                    continue
                self.values[target] = v
                self.static[target] = DumpedSecret(Trigger(sect, fn.name, i), target, "dynload",
                                                   key, key_value, ct, pt)
                opened += 1
                progress = True
        self._open_natives()
        return opened

    def _open_natives(self) -> None:
        """Native keys sit in the blob table of the payload that calls them."""
        for sect, prog in self.programs():
            for fn in prog.functions:
                for i, ins in enumerate(fn.code):
                    if ins[0] != Op.NATCALL:
                        continue
                    name = prog.strings[ins[1]]
                    s = self.bundle.get(name)
                    if name in self.natives or s is None or not native_header(s.data).encrypted:
                        continue
                    key = prog.blobs[ins[2]]
                    try:
                        blob = decode_native(s.data, key)
                    except (DecodeError, ValueError):
                        continue
                    self.natives[name] = (key, blob)
                    self.static[name] = DumpedSecret(Trigger(sect, fn.name, i), name, "natcall", key,
                                                     None, s.data, native_body_plain(s.data, key))

    def inline_all(self, b: Bundle) -> tuple[Bundle, int]:
        """Inline every bomb in "code" whose payload is known, outermost first."""
        natives = {k: v[1] for k, v in self.natives.items()}

        def resolve(name: str, ins: tuple) -> Optional[Program]:
            return natives.get(name) if ins[0] == Op.NATCALL else None

        done = 0
        while True:
            prog = code_program(b)
            todo = None
            for fn in prog.functions:
                for i, ins in enumerate(fn.code):
                    if ins[0] != Op.HASHEQ:
                        continue
                    try:
                        _, _, d = locate_bomb(fn, i)
                    except ValueError:
                        continue
                    sect = prog.strings[fn.code[d][1]]
                    if sect in self.plaintexts and b.get(sect) is not None:
                        todo = (fn.name, i, sect)
                        break
                if todo:
                    break
            if todo is None:
                return b, done
            name, i, sect = todo
            b = patch_inline(b, Trigger("code", name, i), self.plaintexts[sect],
                             const=self.values.get(sect), resolve=resolve,
                             original_signer=self.signer)
            done += 1


# -- strategies ---------------------------------------------------------------
# each returns (unsigned output with payload, sites found, sites neutralized)


def _naive(A: _Attack):
    kinds = {"hasheq", "natcall", "tchk", "cksum"}
    found = sum(1 for s in scan_patterns(A.bundle) if s.kind in kinds) + _signer_sites(A.code)
    return A.inject(A.bundle), found, 0


def _bombs_found(A: _Attack) -> int:
    return sum(1 for _ in A.bombs())


def _inline_strategy(hooks: bool, brute: bool):
    def strategy(A: _Attack):
        if hooks:
            A.dump_fixpoint()
        A.unlock(brute=brute)
        b, n = A.inline_all(A.bundle)
        return A.inject(b), _bombs_found(A), n
    return strategy


def _nrp_override(A: _Attack):
    A.dump_fixpoint()
    A.unlock(brute=True)
    b = A.inject(A.bundle)
    code = b.data("code")
    patched = 0
    for name, (key, blob) in sorted(A.natives.items()):
        hit = False
        for fn in blob.functions:
            for ins in fn.code:
                if ins[0] == Op.TCHK and blob.strings[ins[1]] == "code":
                    new32 = checksum32(code, ins[2], ChecksumMode(ins[4]))
                    b = patch_checksum(b, name, ins[3], new32, key)
                    hit = True
        patched += hit
    return b, _bombs_found(A), patched


def _nrp_redirect(A: _Attack):
    natives = [s.name for s in A.bundle.sections if s.kind == SectionKind.NATIVE
               and "code" in native_header(s.data).strings]
    b = redirect_integrity(A.bundle)
    return A.inject(b), _bombs_found(A), len(natives)


def _dex_dump(A: _Attack):
    A.dump_fixpoint()
    pb = ProgramBuilder(A.code)
    restored = 0
    for name, (key, blob) in sorted(A.natives.items()):
        fi = blob.entry
        if fi >= len(pb.functions):
            continue
        stub, moved = pb.functions[fi], blob.functions[fi]
        refs = {"string": lambda i, bl=blob: pb.string(bl.strings[i]),
                "blob": lambda i, bl=blob: pb.blob(bl.blobs[i])}
        code = tuple(map_instruction(ins, refs=refs) for ins in moved.code)
        # keep the stub's arity so entry inputs and call checks are unchanged
        pb.functions[fi] = Function(stub.name, stub.n_params, moved.n_regs, code)
        restored += 1
    A.triggered = len(A.natives)
    b = with_code(A.bundle, pb.build())
    found = sum(1 for fn in A.code.functions if any(i[0] == Op.NATCALL for i in fn.code))
    return A.inject(b), found, restored


def _signer_sites(prog: Program) -> int:
    return sum(1 for fn in prog.functions for ins in fn.code
               if ins[0] == Op.SYS and ins[1] == Sys.GET_SIGNER_DIGEST32)


def _ssn_hijack(A: _Attack):
    # validate first: the resigned app with the signer query hooked must run clean
    resigned = sign(rebuilt(A.bundle), DEFAULT_ATTACKER_KEY)
    hooks = hijack_signer(HookTable(), A.signer)
    faults = sum(run(resigned, vec, seed=A.seed + k, hooks=hooks).tamper_fault
                 for k, vec in enumerate(A.suite))
    A.notes.append(f"hijack validation: {faults} faults over {len(A.suite)} runs")
    found = _signer_sites(A.code)
    b = pin_signer(A.bundle, A.signer)
    return A.inject(b), found, found - _signer_sites(code_program(b))


def _cksum_sites(bundle: Bundle) -> int:
    return sum(1 for s in scan_patterns(bundle) if s.kind == "cksum")


def _find_scheduler(prog: Program) -> Optional[int]:
    """A parameterless callee of the entry that starts by drawing a random number."""
    for ins in prog.functions[prog.entry].code:
        if ins[0] == Op.CALL:
            callee = prog.functions[ins[2]]
            if (callee.n_params == 0 and callee.code
                    and callee.code[0][0] == Op.SYS and callee.code[0][1] == Sys.GET_RAND):
                return ins[2]
    return None


def _appis_delete(A: _Attack):
    found = _cksum_sites(A.bundle)
    sched = _find_scheduler(A.code)
    if sched is None:
        A.notes.append("no guard scheduler found")
        return A.inject(A.bundle), found, 0
    entry = A.code.functions[A.code.entry].name
    b = delete_calls(A.bundle, entry, sched)
    return A.inject(b), found, found


def _appis_harvest(A: _Attack):
    found = _cksum_sites(A.bundle)
    seen: dict = {}
    harvest_checksums(A.bundle, [(v, A.seed + k) for k, v in enumerate(A.suite)], seen)
    quiet, r = 0, 0
    while quiet < QUIET_ROUNDS and r < MAX_ROUNDS:
        r += 1
        before = len(seen)
        rng = random.Random(f"harvest/{A.seed}/{r}")
        runs = [(random_vector(rng, A.n_inputs), A.seed + 1_000_003 * r + k) for k in range(ROUND_SIZE)]
        harvest_checksums(A.bundle, runs, seen)
        quiet = quiet + 1 if len(seen) == before else 0
    A.rounds = r + 1
    A.triggered = len(seen)
    b = replace_checksums(A.bundle, seen)
    A.notes.append(f"harvested {len(seen)} checksum values")
    return A.inject(b), found, len(seen)


PIPELINES: dict[str, Callable] = {
    "naive": _naive,
    "dex_encrypt:dump": _dex_dump,
    "ssn:hijack": _ssn_hijack,
    "appis:delete": _appis_delete,
    "appis:harvest": _appis_harvest,
    "sdc:hook": _inline_strategy(hooks=True, brute=False),
    "sdc:brute_force": _inline_strategy(hooks=False, brute=True),
    "bombdroid:brute_force": _inline_strategy(hooks=False, brute=True),
    "bombdroid:hook": _inline_strategy(hooks=True, brute=False),
    "nrp:override": _nrp_override,
    "nrp:inline": _inline_strategy(hooks=True, brute=True),
    "nrp:redirect": _nrp_redirect,
}

BEST_PIPELINE = {
    "dex_encrypt": "dex_encrypt:dump",
    "ssn": "ssn:hijack",
    "appis": "appis:harvest",
    "sdc": "sdc:hook",
    "bombdroid": "bombdroid:brute_force",
    "nrp": "nrp:redirect",
}


def pipelines_for(scheme: str) -> list[str]:
    return [p for p in PIPELINES if p.startswith(scheme + ":")] + ["naive"]


def default_suite(bundle: Bundle, size: int = 100, seed: int = 0) -> list[tuple[int, ...]]:
    """The attacker's own test inputs: seeded random vectors sized to the entry function."""
    prog = code_program(bundle)
    n = prog.functions[prog.entry].n_params
    rng = random.Random(f"attack-suite/{seed}")
    return [random_vector(rng, n) for _ in range(size)]


def bypass_pipeline(bundle: Bundle, scheme: str, strategy: str,
                    payload: Optional[Function] = ..., attacker_key: KeyPair = DEFAULT_ATTACKER_KEY,
                    suite: Optional[Sequence[Sequence[int]]] = None, seed: int = 0,
                    report=None, prior: Iterable = (),
                    sentinels: Iterable[int] = (SENTINEL,)) -> tuple[Bundle, AttackReport]:
    """Run one pipeline and judge it.

    ``strategy`` is either a full pipeline name ("nrp:redirect", "naive") or
    the part after the colon.  The payload defaults to the sentinel function;
    pass None for a pure resign.  ``prior`` takes secrets (or AttackReports)
    from earlier sessions.  ``report`` (the protection ground truth) is only
    used to fill ``bombs_total``/``bombs_neutralized``.
    """
    name = strategy if (":" in strategy or strategy == "naive") else f"{scheme}:{strategy}"
    if payload is ...:
        payload = sentinel_payload()
    suite = list(suite) if suite is not None else default_suite(bundle, seed=seed)
    secrets_in = []
    for p in prior:
        secrets_in += p.secrets if isinstance(p, AttackReport) else [p]
    ar = AttackReport(name, scheme)
    out = bundle
    try:
        fn = PIPELINES.get(name)
        if fn is None:
            raise ValueError(f"unknown pipeline {name!r}")
        A = _Attack(bundle, suite, seed, payload, secrets_in)
        patched, found, neutralized = fn(A)
        out = sign(patched, attacker_key)
        ar.sites_found, ar.sites_neutralized = found, neutralized
        ar.secrets = A.secrets
        ar.rounds = A.rounds
        ar.notes += A.notes
        fired = set(A.log.fired)
    except Exception as err:  # prerequisites unmet: recorded in the report
        ar.error = f"{type(err).__name__}: {err}"
        return out, ar

    v = verify(out)
    ar.verified = bool(v) and out.signer_public_key == attacker_key.public_key
    eq = run_equivalence(bundle, out, suite, ignore=sentinels if payload is not None else (), seed=seed)
    ar.equivalence = eq.to_dict()
    ar.tamper_faults = eq.b_tamper_faults
    ar.sentinel_observed = eq.b_ignored_seen
    fired |= eq.a_fired
    bomb_keys = {(s, f.name, i) for s, _, f, i, *_ in A.bombs()}
    ar.sites_triggered = (A.triggered if A.triggered is not None
                          else len({tuple(t) for t in fired} & bomb_keys))
    ar.output_digest = hashlib.sha256(serialize(out)).hexdigest()
    ar.bypass_success = (ar.verified and ar.tamper_faults == 0 and eq.equal
                         and (ar.sentinel_observed or payload is None))
    if report is not None and report.bomb_sites:
        from ..protect.audit import defused_count
        ar.bombs_total = len(report.bomb_sites)
        ar.bombs_neutralized = defused_count(out, report.bomb_sites)
    return out, ar
