"""Dynamic analysis: hooked runs that dump decrypted sections, fuzzing, checksum harvesting.

Hooks model instrumentation frameworks: the attacker observes every
decryption the interpreter performs and every checksum it computes.  Logs
are plain data, so sessions can be merged (the cumulative attack).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from ..bundle import Bundle
from ..crypto import aes_ctr
from ..isa import DecodeError, NativeBlob, Program, decode_native, decode_program, native_header, xor_crypt
from ..vm import CheckEvent, HookTable, LoadEvent, Trigger, run


@dataclass(frozen=True)
class DumpedSecret:
    """A key and the plaintext it decrypted, captured at the decryption site.

    For a DYNLOAD, ``key_value`` is the 32-bit register value the key was
    derived from and ``plaintext`` the decrypted program.  For an encrypted
    NATCALL, ``key`` is the 16-byte native key and ``plaintext`` the section
    with its body decrypted (the cleartext header is unchanged).
    """

    site: Trigger
    section: str
    kind: str  # "dynload" | "natcall"
    key: bytes
    key_value: Optional[int]
    ciphertext: bytes
    plaintext: bytes

    def reencrypt(self) -> bytes:
        return reencrypt(self)

    def program(self) -> Program:
        if self.kind == "dynload":
            return decode_program(self.plaintext)
        return decode_native(self.ciphertext, self.key)

    def to_dict(self) -> dict:
        return {
            "site": list(self.site), "section": self.section, "kind": self.kind,
            "key": self.key.hex(), "key_value": self.key_value,
            "ciphertext_len": len(self.ciphertext),
            "roundtrip_ok": self.reencrypt() == self.ciphertext,
        }


def reencrypt(secret: DumpedSecret) -> bytes:
    if secret.kind == "dynload":
        return aes_ctr(secret.plaintext, secret.key)
    h = native_header(secret.plaintext)
    return secret.plaintext[:h.body_offset] + xor_crypt(secret.plaintext[h.body_offset:], secret.key)


class SecretLog:
    """Distinct secrets by section, in first-seen order, plus every fired trigger."""

    def __init__(self) -> None:
        self.secrets: dict[str, DumpedSecret] = {}
        self.fired: dict[Trigger, int] = {}

    def hooks(self) -> HookTable:
        def dyn_exit(ev: LoadEvent) -> None:
            self._add(DumpedSecret(ev.caller, ev.section, "dynload", ev.key, ev.key_value,
                                   ev.ciphertext, ev.plaintext))

        def nat_exit(ev: LoadEvent) -> None:
            if ev.key:  # cleartext natives hide nothing
                self._add(DumpedSecret(ev.caller, ev.section, "natcall", ev.key, None,
                                       ev.ciphertext, ev.plaintext))

        return HookTable(dynload_exit=dyn_exit, natcall_exit=nat_exit)

    def _add(self, s: DumpedSecret) -> None:
        # a decryption under a wrong key yields garbage, which is not a secret
        try:
            s.program()
        except (DecodeError, ValueError):
            return
        self.secrets.setdefault(s.section, s)

    def record(self, trigger_log: Iterable[Trigger]) -> None:
        for t in trigger_log:
            self.fired[t] = self.fired.get(t, 0) + 1


def hook_dump(bundle: Bundle, inputs: Sequence[Sequence[int]], seed: int = 0,
              log: Optional[SecretLog] = None) -> list[DumpedSecret]:
    """Run every input vector with decryption observers; return the distinct secrets.

    ``inputs`` is a list of input vectors (a single vector is accepted too).
    Run k uses VM seed ``seed + k``.  Passing a ``log`` accumulates across calls.
    """
    if inputs and isinstance(inputs[0], int):
        inputs = [inputs]
    log = log if log is not None else SecretLog()
    hooks = log.hooks()
    for k, vec in enumerate(inputs):
        res = run(bundle, vec, seed=seed + k, hooks=hooks)
        log.record(res.trigger_log)
    return list(log.secrets.values())


def random_vector(rng: random.Random, n: int, const_range: tuple[int, int] = (-1024, 1024)) -> tuple[int, ...]:
    """Half small values from the constant range, half arbitrary 32-bit words."""
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            out.append(rng.randint(*const_range) & 0xFFFFFFFF)
        else:
            out.append(rng.getrandbits(32))
    return tuple(out)


@dataclass
class FuzzStats:
    runs: int = 0
    fired: dict = field(default_factory=dict)  # Trigger -> count
    terminations: dict = field(default_factory=dict)  # termination string -> count

    def merge(self, other: "FuzzStats") -> "FuzzStats":
        out = FuzzStats(self.runs + other.runs, dict(self.fired), dict(self.terminations))
        for k, v in other.fired.items():
            out.fired[k] = out.fired.get(k, 0) + v
        for k, v in other.terminations.items():
            out.terminations[k] = out.terminations.get(k, 0) + v
        return out

    @property
    def fired_sites(self) -> set:
        return set(self.fired)

    @property
    def tamper_faults(self) -> int:
        return sum(v for k, v in self.terminations.items()
                   if k in ("Crashed(TAMPER_DETECTED)", "Crashed(SSN_FAULT)", "Crashed(DECODE_FAULT)"))

    def fraction_fired(self, report) -> float:
        """Share of the report's bomb sites whose HASHEQ fired at least once."""
        truth = {(s.host_section, s.function, s.index) for s in report.bomb_sites}
        if not truth:
            return 0.0
        hit = {(t.section, t.function, t.index) for t in self.fired}
        return len(truth & hit) / len(truth)

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "fired": sorted([[*k, v] for k, v in self.fired.items()]),
            "terminations": dict(sorted(self.terminations.items())),
        }


def fuzz(bundle: Bundle, n_runs: int, inputs_per_run: int = 4, seed: int = 0,
         const_range: tuple[int, int] = (-1024, 1024), hooks: Optional[HookTable] = None,
         start: int = 0) -> FuzzStats:
    """Run ``n_runs`` random input vectors; run k depends only on (seed, k).

    Because of that, ``fuzz(b, n)`` covers a prefix of ``fuzz(b, m)`` for
    n <= m, and ``start`` lets a session resume where another stopped.
    """
    stats = FuzzStats()
    for k in range(start, start + n_runs):
        rng = random.Random(f"fuzz/{seed}/{k}")
        res = run(bundle, random_vector(rng, inputs_per_run, const_range), seed=k, hooks=hooks)
        stats.runs += 1
        for t in res.trigger_log:
            stats.fired[t] = stats.fired.get(t, 0) + 1
        stats.terminations[res.termination] = stats.terminations.get(res.termination, 0) + 1
    return stats


def harvest_checksums(bundle: Bundle, runs: Iterable[tuple[Sequence[int], int]],
                      seen: Optional[dict] = None) -> dict:
    """Observed CKSUM results keyed by (section, function, index) of the instruction.

    ``runs`` holds (input vector, VM seed) pairs; the seed matters because
    the guard net in use can depend on it.  Pass ``seen`` to accumulate
    over sessions.
    """
    seen = {} if seen is None else seen

    def observe(ev: CheckEvent) -> None:
        if ev.actual is not None:
            seen.setdefault(tuple(ev.caller), ev.actual)

    hooks = HookTable(cksum_enter=observe)
    for vec, s in runs:
        run(bundle, vec, seed=s, hooks=hooks)
    return seen


def native_program(bundle: Bundle, name: str, key: Optional[bytes] = None) -> NativeBlob:
    return decode_native(bundle.data(name), key)
