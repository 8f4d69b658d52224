"""Cost of a protection: executed instructions, bundle size, code exposure."""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

from ..bundle import Bundle, serialize
from ..isa import decode_program
from ..protect.dexenc import SECTION_PREFIX, exposure
from ..vm import run


class Overhead(NamedTuple):
    instruction_ratio: float
    size_ratio: float
    exposure: Optional[float]  # mean decrypted-function fraction per run; dex_encrypt only


def measure_overhead(original: Bundle, protected: Bundle, inputs: Sequence[Sequence[int]],
                     seed: int = 0) -> Overhead:
    """Step and size ratios of ``protected`` over ``original`` on the same runs.

    Run k of both bundles uses VM seed ``seed + k``.  ``exposure`` is only
    reported when the protected bundle has per-function encrypted sections.
    """
    n_fn = len(decode_program(original.data("code")).functions)
    dex = any(s.name.startswith(SECTION_PREFIX) for s in protected.sections)
    s0 = s1 = 0
    exp = []
    for k, vec in enumerate(inputs):
        s0 += run(original, vec, seed=seed + k).steps
        r = run(protected, vec, seed=seed + k)
        s1 += r.steps
        if dex:
            exp.append(exposure(r.loaded, n_fn))
    ratio = s1 / s0 if s0 else 1.0
    size = len(serialize(protected)) / len(serialize(original))
    return Overhead(ratio, size, sum(exp) / len(exp) if exp else None)
