"""Differential execution of two bundles over an input suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .bundle import Bundle
from .vm import DEFAULT_STEP_LIMIT, RunResult, Status, run


@dataclass(frozen=True)
class Divergence:
    input_index: int
    inputs: tuple[int, ...]
    a_outputs: tuple[int, ...]
    b_outputs: tuple[int, ...]
    a_termination: str
    b_termination: str

    def to_dict(self) -> dict:
        return {
            "input_index": self.input_index, "inputs": list(self.inputs),
            "a_outputs": list(self.a_outputs), "b_outputs": list(self.b_outputs),
            "a_termination": self.a_termination, "b_termination": self.b_termination,
        }


@dataclass
class EquivalenceVerdict:
    """``equal`` holds iff every input gave the same filtered outputs and termination.

    Besides the verdict the comparison records what an attacker evaluating
    a repackaged ``b`` cares about: tamper faults in ``b``, whether any
    ignored (payload) output appeared in ``b``, and the triggers ``a`` fired.
    """

    equal: bool
    runs: int
    first_divergence: Optional[Divergence] = None
    divergences: int = 0
    b_tamper_faults: int = 0
    b_ignored_seen: bool = False
    a_fired: set = field(default_factory=set)

    def __bool__(self) -> bool:
        return self.equal

    def to_dict(self) -> dict:
        return {
            "equal": self.equal, "runs": self.runs, "divergences": self.divergences,
            "first_divergence": self.first_divergence.to_dict() if self.first_divergence else None,
            "b_tamper_faults": self.b_tamper_faults, "b_ignored_seen": self.b_ignored_seen,
        }


def _same(ra: RunResult, rb: RunResult, ignore: frozenset) -> bool:
    if ra.status is Status.STEP_LIMIT or rb.status is Status.STEP_LIMIT:
        return False
    if ra.termination != rb.termination:
        return False
    fa = [x for x in ra.outputs if x not in ignore]
    fb = [x for x in rb.outputs if x not in ignore]
    return fa == fb


def run_equivalence(a: Bundle, b: Bundle, inputs: Sequence[Sequence[int]],
                    ignore: Iterable[int] = (), seed: int = 0,
                    limit: int = DEFAULT_STEP_LIMIT) -> EquivalenceVerdict:
    """Compare ``a`` and ``b`` input by input; input k runs with VM seed ``seed + k``.

    Outputs whose value is in ``ignore`` are filtered from both sides.  A run
    that hits the step limit counts as a divergence.
    """
    ignore = frozenset(int(x) & 0xFFFFFFFF for x in ignore)
    v = EquivalenceVerdict(True, 0)
    for k, vec in enumerate(inputs):
        ra = run(a, vec, seed=seed + k, limit=limit)
        rb = run(b, vec, seed=seed + k, limit=limit)
        v.runs += 1
        v.a_fired.update(ra.trigger_log)
        if rb.tamper_fault:
            v.b_tamper_faults += 1
        if ignore and any(x in ignore for x in rb.outputs):
            v.b_ignored_seen = True
        if not _same(ra, rb, ignore):
            v.divergences += 1
            if v.first_divergence is None:
                v.first_divergence = Divergence(k, tuple(vec), tuple(ra.outputs), tuple(rb.outputs),
                                                ra.termination, rb.termination)
    v.equal = v.divergences == 0
    return v
