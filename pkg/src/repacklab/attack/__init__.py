"""Attack toolkit: static scanning, hooked execution, code manipulation, bypass pipelines."""

from .dynamic import (
    DumpedSecret,
    FuzzStats,
    SecretLog,
    fuzz,
    harvest_checksums,
    hook_dump,
    random_vector,
    reencrypt,
)
from .patch import (
    SENTINEL,
    NoMatchingCheck,
    delete_calls,
    flip_byte,
    hijack_signer,
    inject_payload,
    patch_checksum,
    patch_inline,
    pin_signer,
    redirect_integrity,
    repackage,
    replace_checksums,
    sentinel_payload,
    tamper_code,
    tchk_sites,
)
from .pipelines import (
    ATTACK_SCHEMA_VERSION,
    BEST_PIPELINE,
    DEFAULT_ATTACKER_KEY,
    PIPELINES,
    AttackReport,
    bypass_pipeline,
    default_suite,
    pipelines_for,
)
from .scan import CandidateSite, brute_force, key_reuse_scan, scan_patterns

__all__ = [
    "ATTACK_SCHEMA_VERSION", "BEST_PIPELINE", "DEFAULT_ATTACKER_KEY", "PIPELINES", "SENTINEL",
    "AttackReport", "CandidateSite", "DumpedSecret", "FuzzStats", "NoMatchingCheck", "SecretLog",
    "brute_force", "bypass_pipeline", "default_suite", "delete_calls", "flip_byte", "fuzz",
    "harvest_checksums", "hijack_signer", "hook_dump", "inject_payload", "key_reuse_scan",
    "patch_checksum", "patch_inline", "pin_signer", "pipelines_for", "random_vector",
    "redirect_integrity", "reencrypt", "repackage", "replace_checksums", "scan_patterns",
    "sentinel_payload", "tamper_code", "tchk_sites",
]
