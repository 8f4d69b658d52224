"""Corpus generation, differential equivalence, overhead and the evaluation matrix."""

from ..equivalence import Divergence, EquivalenceVerdict, run_equivalence
from .corpus import (
    ATTACKER_KEY,
    DEV_KEY,
    CorpusError,
    CorpusSpec,
    gen_corpus,
    gen_program,
    input_suite,
    make_bundle,
    program_constants,
)
from .evaluate import EVAL_SCHEMA_VERSION, EvalCell, EvalMatrix, evaluate, summarize
from .overhead import Overhead, measure_overhead

__all__ = [
    "ATTACKER_KEY", "DEV_KEY", "EVAL_SCHEMA_VERSION", "CorpusError", "CorpusSpec", "Divergence",
    "EquivalenceVerdict", "EvalCell", "EvalMatrix", "Overhead", "evaluate", "gen_corpus",
    "gen_program", "input_suite", "make_bundle", "measure_overhead", "program_constants",
    "run_equivalence", "summarize",
]
