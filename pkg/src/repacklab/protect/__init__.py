"""Protection passes: bundle in, re-signed bundle plus ground-truth report out."""

from __future__ import annotations

import hashlib
import random
from typing import Callable

from ..bundle import Bundle, KeyPair, serialize, sign, verify
from ..isa import DecodeError, Program, decode_program
from .appis import protect_appis
from .bombs import protect_bombdroid, protect_nrp, protect_sdc
from .dexenc import exposure, protect_dex_encrypt
from .report import (
    REPORT_SCHEMA_VERSION,
    SCHEMES,
    BombSite,
    Goal,
    Guard,
    GuardNet,
    NothingToProtect,
    ProtectError,
    ProtectionReport,
    SchemeConfig,
)
from .sites import QualifiedCondition, find_qualified_conditions
from .ssn import protect_ssn

PASSES: dict[str, Callable] = {
    "dex_encrypt": protect_dex_encrypt,
    "ssn": protect_ssn,
    "appis": protect_appis,
    "sdc": protect_sdc,
    "bombdroid": protect_bombdroid,
    "nrp": protect_nrp,
}


def protect(bundle: Bundle, config: SchemeConfig, dev_key: KeyPair) -> tuple[Bundle, ProtectionReport]:
    verdict = verify(bundle)
    if not verdict:
        raise ProtectError(f"input bundle does not verify ({verdict.reason})")
    try:
        prog: Program = decode_program(bundle.data("code"))
    except (KeyError, DecodeError) as err:
        raise ProtectError(f"code section unusable: {err}") from err
    # salts and choices depend on the app too, so two apps never share them
    rng = random.Random(f"{config.scheme}/{config.seed}/{hashlib.sha256(bundle.data('code')).hexdigest()}")
    out, report = PASSES[config.scheme](bundle.unsigned(), prog, config, dev_key, rng)
    signed = sign(out, dev_key)
    report.original_size = len(serialize(bundle))
    report.protected_size = len(serialize(signed))
    return signed, report


__all__ = [
    "PASSES", "REPORT_SCHEMA_VERSION", "SCHEMES", "BombSite", "Goal", "Guard", "GuardNet",
    "NothingToProtect", "ProtectError", "ProtectionReport", "QualifiedCondition", "SchemeConfig",
    "exposure", "find_qualified_conditions", "protect",
]
