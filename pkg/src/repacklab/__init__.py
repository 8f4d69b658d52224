"""repacklab: anti-repackaging schemes and the attacks that defeat them, on a toy VM."""

from .bundle import (
    Bundle,
    ChecksumMode,
    FormatError,
    KeyPair,
    Section,
    SectionKind,
    SignatureBlock,
    Verdict,
    checksum32,
    deserialize,
    section_prefix_checksum32,
    serialize,
    sign,
    signer_digest32,
    verify,
)
from .crypto import aes_ctr, derive_key, trigger_hash
from .isa import (
    Alu,
    CrashCode,
    DecodeError,
    Function,
    HashAlg,
    NativeBlob,
    Op,
    Program,
    Sys,
    decode_native,
    decode_program,
    disassemble,
    encode_native,
    encode_program,
)
from .vm import HookTable, RunResult, Status, Trigger, run

__version__ = "0.1.0"

__all__ = [
    "Alu", "Bundle", "ChecksumMode", "CrashCode", "DecodeError", "FormatError", "Function",
    "HashAlg", "HookTable", "KeyPair", "NativeBlob", "Op", "Program", "RunResult", "Section",
    "SectionKind", "SignatureBlock", "Status", "Sys", "Trigger", "Verdict", "aes_ctr", "checksum32",
    "decode_native", "decode_program", "derive_key", "deserialize", "disassemble", "encode_native",
    "encode_program", "run", "section_prefix_checksum32", "serialize", "sign", "signer_digest32",
    "trigger_hash", "verify",
]

