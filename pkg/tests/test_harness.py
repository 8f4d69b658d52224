import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import corpus, protected, suite
from repacklab.attack import tamper_code
from repacklab.bundle import sign, verify
from repacklab.equivalence import run_equivalence
from repacklab.harness import (
    ATTACKER_KEY,
    DEV_KEY,
    CorpusSpec,
    EvalMatrix,
    evaluate,
    gen_corpus,
    input_suite,
    measure_overhead,
    summarize,
)
from repacklab.harness.evaluate import cell_seed
from repacklab.isa import decode_program
from repacklab.protect import SCHEMES, find_qualified_conditions
from repacklab.vm import DEFAULT_STEP_LIMIT, Status, run


# -- corpus ------------------------------------------------------------------------


def test_corpus_is_seed_stable():
    assert gen_corpus(CorpusSpec(seed=4, n_programs=3)) == gen_corpus(CorpusSpec(seed=4, n_programs=3))
    assert gen_corpus(CorpusSpec(seed=4, n_programs=3)) != gen_corpus(CorpusSpec(seed=5, n_programs=3))


def test_empty_corpus():
    assert gen_corpus(CorpusSpec(n_programs=0)) == []


@pytest.mark.parametrize("kwargs", [{"n_programs": -1}, {"n_functions": 0}, {"const_range": (5, 1)}])
def test_invalid_corpus_spec(kwargs):
    with pytest.raises(ValueError):
        CorpusSpec(**kwargs)


def test_corpus_invariants():
    spec = CorpusSpec()
    for i, b in enumerate(corpus()):
        assert verify(b) and b.signer_public_key == DEV_KEY.public_key
        prog = decode_program(b.data("code"))
        assert len(prog.functions) == spec.n_functions
        assert len(find_qualified_conditions(prog)) == spec.n_conditions
        fired = set()
        for v in suite(i):
            r = run(b, v)
            assert r.status is Status.HALTED and r.steps < DEFAULT_STEP_LIMIT
            fired |= set(r.trigger_log)
        assert fired, f"program {i} fires no qualified condition"


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32), st.integers(1, 4), st.integers(1, 6))
def test_small_corpora_keep_their_invariants(seed, n_functions, n_conditions):
    spec = CorpusSpec(seed=seed, n_programs=2, n_functions=n_functions, n_conditions=n_conditions,
                      suite_size=20)
    for b in gen_corpus(spec):
        prog = decode_program(b.data("code"))
        assert len(prog.functions) == n_functions
        assert len(find_qualified_conditions(prog)) == n_conditions
        fired = set()
        for v in input_suite(b, 20, seed):
            r = run(b, v)
            assert r.halted
            fired |= set(r.trigger_log)
        assert fired


def test_input_suite_is_deterministic_and_sized():
    b = corpus()[0]
    assert input_suite(b, 10) == input_suite(b, 10)
    assert input_suite(b, 10, seed=1) != input_suite(b, 10)
    assert all(len(v) == 4 and all(0 <= x < 2 ** 32 for x in v) for v in input_suite(b, 50))


# -- equivalence ------------------------------------------------------------------------


def test_equivalence_is_reflexive():
    for i in range(5):
        v = run_equivalence(corpus()[i], corpus()[i], suite(i))
        assert v.equal and v.runs == 100 and v.divergences == 0 and v.first_divergence is None


def test_protected_equals_original_and_tampered_diverges():
    b, r = protected("nrp", 0)
    assert run_equivalence(corpus()[0], b, suite(0))
    fire = [(s.const_v,) * 4 for s in r.bomb_sites]
    bad = sign(tamper_code(b), ATTACKER_KEY)
    verdict = run_equivalence(corpus()[0], bad, list(suite(0)) + fire)
    assert not verdict
    d = verdict.first_divergence
    assert d.b_termination == "Crashed(TAMPER_DETECTED)" and d.a_termination == "Halted"
    assert verdict.b_tamper_faults >= 1
    assert json.loads(json.dumps(verdict.to_dict()))["first_divergence"]["input_index"] == d.input_index


def test_ignored_outputs_are_dropped_and_noticed():
    from repacklab.attack import SENTINEL, repackage, sentinel_payload
    b = corpus()[0]
    out = repackage(b, sentinel_payload(), ATTACKER_KEY)
    assert not run_equivalence(b, out, suite(0))
    v = run_equivalence(b, out, suite(0), ignore=(SENTINEL,))
    assert v and v.b_ignored_seen


def test_step_limit_counts_as_divergence():
    b = corpus()[0]
    assert not run_equivalence(b, b, suite(0)[:3], limit=5)


# -- overhead -------------------------------------------------------------------------


def test_identity_overhead():
    b = corpus()[0]
    o = measure_overhead(b, b, suite(0))
    assert (o.instruction_ratio, o.size_ratio, o.exposure) == (1.0, 1.0, None)


def test_overhead_orders_dex_encrypt_above_bombdroid():
    ratios = {}
    for scheme in ("dex_encrypt", "bombdroid"):
        rs = [measure_overhead(corpus()[i], protected(scheme, i)[0], suite(i)).instruction_ratio
              for i in range(20)]
        ratios[scheme] = sum(rs) / len(rs)
    assert ratios["dex_encrypt"] > ratios["bombdroid"] >= 1.0


def test_size_ratio_above_one_and_exposure_only_for_dex():
    for scheme in SCHEMES:
        o = measure_overhead(corpus()[1], protected(scheme, 1)[0], suite(1))
        assert o.size_ratio > 1.0 and o.instruction_ratio >= 1.0
        assert (o.exposure is not None) == (scheme == "dex_encrypt")
        if o.exposure is not None:
            assert 0 < o.exposure <= 1


# -- evaluation matrix ----------------------------------------------------------------


SMALL = CorpusSpec(n_programs=2, suite_size=30)


def test_empty_scheme_list_gives_empty_matrix():
    m = evaluate(SMALL, schemes=[])
    assert m.cells == [] and m.rows == [] and m.schemes_bypassed() == {}


def test_unknown_scheme_is_rejected():
    with pytest.raises(ValueError):
        evaluate(SMALL, schemes=["armor"])


def test_cell_seeds_depend_on_coordinates():
    assert cell_seed(0, "nrp", 1) == cell_seed(0, "nrp", 1)
    assert len({cell_seed(0, s, p) for s in SCHEMES for p in range(20)}) == 120


def test_matrix_is_deterministic_and_rebuilt_from_cells():
    a = evaluate(SMALL, schemes=["nrp", "ssn"], fuzz_runs=20)
    b = evaluate(SMALL, schemes=["nrp", "ssn"], fuzz_runs=20, workers=2)
    assert a.to_json() == b.to_json()
    again = EvalMatrix.from_dict(json.loads(a.to_json()))
    assert again.to_json() == a.to_json()
    assert summarize(again.cells) == a.rows
    reports = again.attack_reports()
    assert [r.bypass_success for r in reports] == [c.bypass_success for c in a.cells]


def test_all_pipelines_include_naive_and_record_failures_in_cells():
    m = evaluate(SMALL, schemes=["nrp"], pipelines="all", fuzz_runs=10)
    assert m.pipelines["nrp"][-1] == "naive"
    naive = m.row("nrp", "naive")
    assert naive is not None and not naive["bypass_success"]
    assert m.schemes_bypassed() == {"nrp": True}
