import hashlib
import math
import zlib
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import corpus, protected, suite
from oracles import aes128_ctr, checksum, trigger_hash_sha1, xor_repeat
from repacklab.attack import tamper_code
from repacklab.bundle import Bundle, ChecksumMode, KeyPair, Section, SectionKind, sign, verify
from repacklab.equivalence import run_equivalence
from repacklab.harness import ATTACKER_KEY, DEV_KEY
from repacklab.isa import (
    Function,
    NATIVE_TRANSIENT,
    HashAlg,
    Op,
    Program,
    decode_native,
    decode_program,
    encode_program,
    native_header,
)
from repacklab.protect import (
    SCHEMES,
    NothingToProtect,
    ProtectError,
    ProtectionReport,
    QualifiedCondition,
    SchemeConfig,
    exposure,
    find_qualified_conditions,
    protect,
)
from repacklab.protect.audit import bomb_defused
from repacklab.vm import run

BOMB_SCHEMES = ("sdc", "bombdroid", "nrp")


def bundle_of(*functions: Function) -> Bundle:
    prog = Program(tuple(functions))
    return sign(Bundle.build([Section("code", SectionKind.CODE, encode_program(prog))]), DEV_KEY)


THREE_CONDITIONS = Function("main", 1, 2, (
    (Op.JEQC, 0, 5, 2),
    (Op.JMP, 3),
    (Op.OUT, 0),
    (Op.JEQC, 0, 6, 5),
    (Op.JMP, 6),
    (Op.OUT, 0),
    (Op.JNEC, 0, 7, 8),
    (Op.OUT, 0),
    (Op.HALT,),
))

STRAIGHT = Function("main", 1, 2, ((Op.CONST, 1, 3), (Op.OUT, 1), (Op.OUT, 0), (Op.HALT,)))


def naive_conditions(raw_code: bytes) -> list[tuple[str, int, int]]:
    """Independent scan: every equality-with-constant branch, signed constant."""
    prog = decode_program(raw_code)
    out = []
    for fn in prog.functions:
        for i, ins in enumerate(fn.code):
            if ins[0] in (Op.JEQC, Op.JNEC):
                c = ins[2]
                out.append((fn.name, i, c - (1 << 32) if c >= 1 << 31 else c))
    return out


def decrypt_payload(bundle: Bundle, site) -> Program:
    key = hashlib.sha256((site.key_value & 0xFFFFFFFF).to_bytes(4, "little")).digest()[:16]
    return decode_program(aes128_ctr(bundle.data(site.payload_section), key))


# -- qualified conditions -------------------------------------------------------


def test_straight_line_program_has_no_qualified_condition():
    prog = Program((STRAIGHT,))
    assert find_qualified_conditions(prog) == []


def test_minus_one_constant_is_reported_signed():
    prog = Program((Function("main", 1, 1, ((Op.JEQC, 0, 0xFFFFFFFF, 1), (Op.HALT,))),))
    assert find_qualified_conditions(prog) == [QualifiedCondition("main", 0, -1)]


def test_qualified_conditions_match_independent_scan():
    for b in corpus():
        prog = decode_program(b.data("code"))
        assert [tuple(q) for q in find_qualified_conditions(prog)] == naive_conditions(b.data("code"))


# -- site counts and config ---------------------------------------------------------


@pytest.mark.parametrize("scheme", BOMB_SCHEMES)
def test_full_density_protects_every_condition(scheme):
    b, r = protect(bundle_of(THREE_CONDITIONS), SchemeConfig(scheme), DEV_KEY)
    assert r.sites_found == 3 and r.sites_protected == 3
    assert len([s for s in r.bomb_sites if s.depth == 1]) == 3
    assert {s.origin for s in r.bomb_sites} == {("main", 0), ("main", 3), ("main", 6)}


@pytest.mark.parametrize("density", [0.1, 0.25, 0.34, 0.5, 0.67, 0.9, 1.0])
def test_density_rounds_up(density):
    for i in range(5):
        found = len(find_qualified_conditions(decode_program(corpus()[i].data("code"))))
        _, r = protect(corpus()[i], SchemeConfig("nrp", bomb_density=density), DEV_KEY)
        assert r.sites_found == found
        assert len(r.bomb_sites) == r.sites_protected == math.ceil(density * found - 1e-9)


def test_no_condition_and_no_injection_is_nothing_to_protect():
    with pytest.raises(NothingToProtect):
        protect(bundle_of(STRAIGHT), SchemeConfig("nrp", inject_artificial=False), DEV_KEY)


@pytest.mark.parametrize("scheme", BOMB_SCHEMES)
def test_artificial_condition_keeps_behavior(scheme):
    original = bundle_of(STRAIGHT)
    b, r = protect(original, SchemeConfig(scheme), DEV_KEY)
    assert len(r.bomb_sites) >= 1 and r.bomb_sites[0].artificial
    inputs = [(v,) for v in range(-1024, 1025, 7)] + [(r.bomb_sites[0].const_v,)]
    assert run_equivalence(original, b, inputs)


def test_unverified_input_is_refused():
    b = corpus()[0]
    with pytest.raises(ProtectError, match="does not verify"):
        protect(b.unsigned(), SchemeConfig("nrp"), DEV_KEY)
    tampered = b.with_section(Section("res0", SectionKind.RESOURCE, b"x"))
    with pytest.raises(ProtectError):
        protect(tampered, SchemeConfig("nrp"), DEV_KEY)


@pytest.mark.parametrize("kwargs", [
    {"scheme": "nope"},
    {"scheme": "nrp", "bomb_density": 0.0},
    {"scheme": "nrp", "bomb_density": 1.5},
    {"scheme": "ssn", "ssn_trigger_prob": 0.0},
    {"scheme": "bombdroid", "nesting_depth": 0},
    {"scheme": "appis", "appis_n_guards": 2},
    {"scheme": "nrp", "tamper_scope": ("everything",)},
    {"scheme": "nrp", "salt_policy": "random8"},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SchemeConfig(**kwargs)


def test_config_defaults_per_scheme():
    assert SchemeConfig("bombdroid").salt_policy == "random16"
    assert SchemeConfig("nrp").salt_policy == "none"
    c = SchemeConfig("nrp", tamper_scope=("signature", "code_prefix", "signature"))
    assert c.tamper_scope == ("code_prefix", "signature")
    assert SchemeConfig.from_dict(c.to_dict()) == c


# -- semantic preservation ------------------------------------------------------------


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("index", [0, 7])
def test_protection_preserves_behavior(scheme, index):
    b, _ = protected(scheme, index)
    assert verify(b) and b.signer_public_key == DEV_KEY.public_key
    assert run_equivalence(corpus()[index], b, suite(index))


@settings(max_examples=25)
@given(st.sampled_from(SCHEMES), st.integers(0, 19), st.integers(0, 3))
def test_protection_preserves_behavior_for_any_seed(scheme, index, seed):
    b, _ = protect(corpus()[index], SchemeConfig(scheme, seed=seed), DEV_KEY)
    assert run_equivalence(corpus()[index], b, suite(index, 30))


def test_protection_is_deterministic():
    for scheme in SCHEMES:
        a, ra = protect(corpus()[3], SchemeConfig(scheme, seed=5), DEV_KEY)
        b, rb = protect(corpus()[3], SchemeConfig(scheme, seed=5), DEV_KEY)
        assert a == b and ra.to_json() == rb.to_json()


# -- report fidelity ---------------------------------------------------------------


@pytest.mark.parametrize("scheme", BOMB_SCHEMES)
def test_reported_digests_and_keys_are_true(scheme):
    for index in range(0, 20, 4):
        b, r = protected(scheme, index)
        prog = decode_program(b.data("code"))
        for site in r.bomb_sites:
            value = site.const_v & 0xFFFFFFFF
            msg = site.salt + value.to_bytes(4, "little")
            if site.alg == "sha1":
                digest = trigger_hash_sha1(value, site.salt)
            else:
                digest = int.from_bytes(hashlib.sha256(msg).digest()[:4], "little")
            assert digest == site.digest32
            # the HASHEQ sits where the report says
            host = prog if site.host_section == "code" else decrypt_payload(b, next(
                s for s in r.bomb_sites if s.payload_section == site.host_section))
            ins = host.functions[host.function_index(site.function)].code[site.index]
            assert ins[0] == Op.HASHEQ and ins[2] == site.digest32
            assert host.blobs[ins[3]] == site.salt and ins[4] == HashAlg[site.alg.upper()]
            # the payload decrypts under the reported key to a valid program
            payload = decrypt_payload(b, site)
            assert payload.functions[payload.entry].name == "invoke"


def test_sdc_key_is_code_checksum_xor_constant():
    for index in range(0, 20, 5):
        b, r = protected("sdc", index)
        n = r.details["checksum_count"]
        ck = checksum(b.data("code"), n, buggy=False)
        assert ck == r.details["code_checksum32"]
        for s in r.bomb_sites:
            assert s.key_value == ck ^ (s.const_v & 0xFFFFFFFF)


def test_nrp_native_carries_code_checksum():
    b, r = protected("nrp", 2)
    expected = checksum(b.data("code"), r.details["checksum_count"], buggy=False)
    assert expected == r.details["expected32"]
    for s in r.bomb_sites:
        raw = b.data(s.native_section)
        h = native_header(raw)
        assert h.encrypted
        plain_body = xor_repeat(raw[len(raw) - h.body_len:], s.native_key)
        assert int.from_bytes(plain_body[:4], "little") == zlib.adler32(plain_body[4:])
        plain = decode_native(raw, s.native_key)
        tchk = [ins for fn in plain.functions for ins in fn.code if ins[0] == Op.TCHK]
        assert tchk == [(Op.TCHK, plain.strings.index("code"), r.details["checksum_count"], expected,
                         int(ChecksumMode.FIXED))]
        payload = decrypt_payload(b, s)
        natcalls = [ins for ins in payload.functions[0].code if ins[0] == Op.NATCALL]
        assert len(natcalls) == 1 and payload.strings[natcalls[0][1]] == s.native_section
        assert payload.blobs[natcalls[0][2]] == s.native_key


def test_nrp_buggy_mode_changes_only_the_runtime_formula():
    fixed_b, fixed_r = protected("nrp", 1)
    buggy_b, buggy_r = protected("nrp", 1, checksum_mode=ChecksumMode.BUGGY)
    assert buggy_r.details["checksum_mode"] == "buggy"
    assert buggy_r.details["expected32"] == checksum(buggy_b.data("code"), 100, buggy=False)
    assert fixed_b.data("code") == buggy_b.data("code")


def test_nrp_trigger_is_unsalted_sha1_so_equal_constants_share_digests():
    by_const: dict[int, set[int]] = {}
    for index in range(20):
        _, r = protected("nrp", index)
        for s in r.bomb_sites:
            assert s.salt == b"" and s.alg == "sha1" and s.key_value == s.const_v & 0xFFFFFFFF
            by_const.setdefault(s.const_v, set()).add(s.digest32)
    assert all(len(d) == 1 for d in by_const.values())


def test_bombdroid_salts_separate_equal_constants():
    seen: dict[int, list[int]] = {}
    for index in range(20):
        _, r = protected("bombdroid", index)
        for s in r.bomb_sites:
            assert len(s.salt) == 16 and s.alg == "sha256"
            seen.setdefault(s.const_v, []).append(s.digest32)
    repeated = [d for d in seen.values() if len(d) > 1]
    assert repeated, "corpus should reuse some constant"
    assert all(len(set(d)) == len(d) for d in repeated)


def test_bombdroid_nesting_adds_inner_bombs():
    b, r = protected("bombdroid", 0, nesting_depth=3)
    outer = [s for s in r.bomb_sites if s.depth == 1]
    assert {s.depth for s in r.bomb_sites} == {1, 2, 3}
    assert len(r.bomb_sites) == 3 * len(outer)
    for s in r.bomb_sites:
        if s.depth > 1:
            assert s.host_section in {x.payload_section for x in r.bomb_sites if x.depth == s.depth - 1}
    assert run_equivalence(corpus()[0], b, suite(0))


def test_fresh_bombs_are_armed_and_resigning_disarms_them():
    for scheme in BOMB_SCHEMES:
        b, r = protected(scheme, 4)
        assert all(bomb_defused(b, s) for s in r.bomb_sites)
        resigned = sign(tamper_code(b.unsigned()), ATTACKER_KEY)
        assert not any(bomb_defused(resigned, s) for s in r.bomb_sites)


def test_report_json_roundtrip():
    for scheme in SCHEMES:
        _, r = protected(scheme, 6)
        again = ProtectionReport.from_json(r.to_json())
        assert again.to_json() == r.to_json()
        assert again.bomb_sites == r.bomb_sites and again.config == r.config


# -- per-scheme behavior -----------------------------------------------------------


def test_appis_guard_net_is_well_formed():
    for index in range(20):
        _, r = protected("appis", index)
        assert r.guard_net is not None and r.guard_net.audit() == []
        assert r.guard_net.n_nets == r.details["n_nets"] >= 2


def test_appis_audit_flags_a_lone_watcher():
    _, r = protected("appis", 0)
    net = r.guard_net
    keep = net.guards[0]
    broken = replace(net, guards=(keep,) + tuple(replace(g, watches=()) for g in net.guards[1:]))
    assert broken.audit()


def test_ssn_triggers_only_under_a_foreign_signer():
    b, r = protected("ssn", 0)
    foreign = sign(b.unsigned(), KeyPair.from_int(99))
    dev_faults = foreign_faults = 0
    for seed in range(40):
        for v in suite(0)[:5]:
            dev_faults += run(b, v, seed=seed).crash is not None
            foreign_faults += run(foreign, v, seed=seed).crash is not None
    assert dev_faults == 0 and foreign_faults > 0


def test_ssn_probability_sets_the_threshold():
    _, half = protected("ssn", 0)
    _, always = protected("ssn", 0, ssn_trigger_prob=1.0)
    assert half.details["threshold"] == 2 ** 31
    b, _ = protected("ssn", 0, ssn_trigger_prob=1.0)
    foreign = sign(b.unsigned(), ATTACKER_KEY)
    crashed = [run(foreign, v).termination for v in suite(0)[:10]]
    # certain detection: every run that reaches a candidate function crashes
    assert any(t == "Crashed(SSN_FAULT)" for t in crashed)
    assert always.details["candidates"] == half.details["candidates"]


def test_dex_encrypt_hides_every_function_body():
    b, r = protected("dex_encrypt", 0)
    original = decode_program(corpus()[0].data("code"))
    stub = decode_program(b.data("code"))
    key = bytes.fromhex(r.details["xor_key"])
    assert [f.name for f in stub.functions] == [f.name for f in original.functions]
    assert all(len(f.code) == 3 and f.code[1][0] == Op.NATCALL for f in stub.functions)
    loader = decode_native(b.data(r.details["loader_section"]))
    assert not native_header(b.data(r.details["loader_section"])).encrypted
    assert loader.blobs == (key,)
    for i, name in enumerate(r.details["encrypted_sections"]):
        raw = b.data(name)
        h = native_header(raw)
        assert h.encrypted and h.flags & NATIVE_TRANSIENT
        plain_body = xor_repeat(raw[len(raw) - h.body_len:], key)
        assert int.from_bytes(plain_body[:4], "little") == zlib.adler32(plain_body[4:])
        blob = decode_native(raw, key)
        assert blob.functions[blob.entry].name == original.functions[i].name


def test_dex_encrypt_exposes_only_what_runs():
    b, r = protected("dex_encrypt", 0)
    n = len(r.details["encrypted_sections"])
    res = run(b, suite(0)[0])
    e = exposure(tuple(res.loaded), n)
    assert 0 < e <= 1
    assert exposure((), n) == 0.0 and exposure(("x",), 0) == 0.0


def test_overhead_is_at_least_one_and_dex_encrypt_is_largest():
    sizes = {}
    for scheme in SCHEMES:
        _, r = protected(scheme, 0)
        assert r.protected_size >= r.original_size
        sizes[scheme] = r.protected_size / r.original_size
    assert max(sizes, key=sizes.get) == "dex_encrypt"
