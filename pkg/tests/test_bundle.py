import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import checksum as oracle_checksum
from oracles import fold
from repacklab.bundle import (
    Bundle,
    ChecksumMode,
    FormatError,
    KeyPair,
    Section,
    SectionKind,
    checksum32,
    deserialize,
    section_prefix_checksum32,
    serialize,
    sign,
    verify,
)

DEV = KeyPair.from_int(1)
ATTACKER = KeyPair.from_int(666)

names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz_0123456789", min_size=1, max_size=12)
sections = st.lists(
    st.tuples(names, st.sampled_from(list(SectionKind)), st.binary(max_size=64)),
    max_size=6, unique_by=lambda t: t[0],
).map(lambda xs: tuple(Section(n, k, d) for n, k, d in xs))


def sample_bundle() -> Bundle:
    return Bundle.build([
        Section("code", SectionKind.CODE, b"\x01\x02\x03"),
        Section("res0", SectionKind.RESOURCE, b"hello"),
    ])


# -- serialization ------------------------------------------------------------


def test_empty_bundle_roundtrip():
    b = Bundle()
    raw = serialize(b)
    assert raw == b"RPKG" + struct.pack("<HI", 1, 0) + struct.pack("<I", 0) + b"\x00"
    assert deserialize(raw) == b


def test_single_section_roundtrip():
    b = Bundle.build([Section("code", SectionKind.CODE, b"abc")])
    assert serialize(deserialize(serialize(b))) == serialize(b)
    assert deserialize(serialize(b)) == b


def test_layout_matches_documented_format():
    b = sign(Bundle.build([Section("ab", SectionKind.NATIVE, b"xyz")]), DEV)
    raw = serialize(b)
    expected_body = (b"RPKG" + struct.pack("<HI", 1, 1)
                     + struct.pack("<H", 2) + b"ab" + struct.pack("<BI", 1, 3) + b"xyz"
                     + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + b.manifest["ab"])
    assert raw.startswith(expected_body)
    assert raw[len(expected_body)] == 1
    assert raw[len(expected_body) + 1:] == DEV.public_key + b.signature.signature
    assert len(raw) == len(expected_body) + 1 + 32 + 64


def test_section_order_is_significant():
    a = Section("a", SectionKind.RESOURCE, b"1")
    c = Section("c", SectionKind.RESOURCE, b"2")
    assert serialize(Bundle.build([a, c])) != serialize(Bundle.build([c, a]))


@given(sections, st.booleans())
def test_roundtrip_property(secs, signed):
    b = Bundle.build(secs)
    if signed:
        b = sign(b, DEV)
    assert deserialize(serialize(b)) == b


@pytest.mark.parametrize("raw", [b"", b"RPK", b"XPKG" + bytes(10), b"RPKG\x01\x00\x01\x00\x00\x00"])
def test_malformed_bytes_rejected(raw):
    with pytest.raises(FormatError):
        deserialize(raw)


def test_trailing_bytes_and_bad_flag_rejected():
    raw = serialize(sample_bundle())
    with pytest.raises(FormatError):
        deserialize(raw + b"\x00")
    with pytest.raises(FormatError):
        deserialize(raw[:-1] + b"\x02")


@given(st.binary(max_size=200))
def test_deserialize_never_raises_anything_but_format_error(raw):
    try:
        deserialize(b"RPKG" + raw)
    except FormatError:
        pass


def test_invalid_names_and_duplicates():
    for bad in ("", "a/b", "a\\b", "café"):
        with pytest.raises(ValueError):
            Section(bad, SectionKind.CODE, b"")
    s = Section("x", SectionKind.CODE, b"")
    with pytest.raises(ValueError):
        Bundle((s, s))


# -- signing --------------------------------------------------------------------


def test_sign_then_verify():
    assert verify(sign(sample_bundle(), DEV))


def test_verify_reasons():
    b = sample_bundle()
    assert verify(b).reason == "no-signature"
    signed = sign(b, DEV)
    tampered = signed.with_section(Section("res0", SectionKind.RESOURCE, b"hellp"))
    v = verify(tampered)
    assert not v and v.reason == "digest-mismatch" and v.section == "res0"
    forged = Bundle(signed.sections, signed.manifest,
                    type(signed.signature)(ATTACKER.public_key, signed.signature.signature))
    assert verify(forged).reason == "bad-signature"


def test_resign_by_attacker_verifies_under_other_key():
    b = sign(sample_bundle(), DEV)
    b2 = sign(b.with_section(Section("payload", SectionKind.CODE, b"evil")), ATTACKER)
    assert verify(b2)
    assert b2.signer_public_key == ATTACKER.public_key != DEV.public_key


def test_keypair_determinism_and_roundtrip():
    assert KeyPair.from_int(7).public_key == KeyPair.from_int(7).public_key
    assert KeyPair.from_int(7).public_key != KeyPair.from_int(8).public_key
    with pytest.raises(ValueError):
        KeyPair(b"short")


@given(sections.filter(lambda s: any(x.data for x in s)), st.data())
def test_any_single_byte_mutation_breaks_verification(secs, data):
    b = sign(Bundle.build(secs), DEV)
    raw = bytearray(serialize(b))
    # locate section and manifest bytes: every byte before the signature flag is signed
    body_len = len(raw) - 1 - 32 - 64
    pos = data.draw(st.integers(0, body_len - 1))
    bit = data.draw(st.integers(0, 7))
    raw[pos] ^= 1 << bit
    try:
        mutated = deserialize(bytes(raw))
    except (FormatError, ValueError):
        return  # no longer a bundle at all
    assert not verify(mutated)


@given(sections.filter(lambda s: any(x.data for x in s)), st.data())
def test_section_byte_mutation_is_a_digest_mismatch(secs, data):
    b = sign(Bundle.build(secs), DEV)
    target = data.draw(st.sampled_from([s for s in secs if s.data]))
    i = data.draw(st.integers(0, len(target.data) - 1))
    buf = bytearray(target.data)
    buf[i] ^= 0xFF
    v = verify(b.with_section(Section(target.name, target.kind, bytes(buf))))
    assert not v and v.reason == "digest-mismatch" and v.section == target.name


# -- prefix checksum ------------------------------------------------------------


def test_checksum_examples():
    for mode in ChecksumMode:
        assert checksum32(b"\x99\x98", 0, mode) == 0
        assert checksum32(bytes([1, 0, 0, 0]), 4, mode) == 1
    assert checksum32(bytes([0x80, 0, 0, 0]), 4, ChecksumMode.FIXED) == 0x00000080
    assert checksum32(bytes([0x80, 0, 0, 0]), 4, ChecksumMode.BUGGY) == 0xFFFFFF80


def test_section_prefix_checksum_errors():
    b = sample_bundle()
    assert section_prefix_checksum32(b, "res0", 5) == oracle_checksum(b"hello", 5, False)
    with pytest.raises(KeyError):
        section_prefix_checksum32(b, "missing", 1)
    with pytest.raises(ValueError):
        section_prefix_checksum32(b, "res0", 6)


@given(st.binary(max_size=300), st.data())
def test_checksum_matches_definition(data, d):
    count = d.draw(st.integers(0, len(data)))
    for mode, buggy in ((ChecksumMode.FIXED, False), (ChecksumMode.BUGGY, True)):
        assert checksum32(data, count, mode) == oracle_checksum(data, count, buggy)


@given(st.binary(min_size=1, max_size=300))
def test_mode_agreement_as_stated(data):
    """The stated invariant: modes agree iff every fold byte is below 0x80.

    This is false as stated. The top accumulator byte's sign extension only
    touches bits above 2^32, so a high acc[3] alone never makes the modes
    differ (counterexample: bytes 00 00 00 80). Kept verbatim so the defect
    stays visible; see the corrected property below.
    """
    acc = fold(data, len(data))
    agree = checksum32(data, len(data), ChecksumMode.FIXED) == checksum32(data, len(data), ChecksumMode.BUGGY)
    assert agree == all(a < 0x80 for a in acc)


@given(st.binary(min_size=1, max_size=300))
def test_mode_agreement_corrected(data):
    acc = fold(data, len(data))
    agree = checksum32(data, len(data), ChecksumMode.FIXED) == checksum32(data, len(data), ChecksumMode.BUGGY)
    assert agree == all(a < 0x80 for a in acc[:3])


def test_mode_disagreement_rate_is_seven_eighths():
    rng = random.Random(0)
    n = 20_000
    differ = sum(
        checksum32(p, 100, ChecksumMode.FIXED) != checksum32(p, 100, ChecksumMode.BUGGY)
        for p in (rng.randbytes(100) for _ in range(n)))
    # three accumulator bytes must all be below 0x80 for agreement: 1 - 1/8
    assert abs(differ / n - 0.875) < 0.01
