"""The scheme x pipeline evaluation matrix.

Every cell protects one corpus program with one scheme and attacks it with
one pipeline.  Cells are independent: each derives its seeds from the
evaluation seed and its own coordinates, so the matrix is identical
whether cells run serially or in a process pool.  Row summaries are
computed from the cells alone.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from ..attack import BEST_PIPELINE, AttackReport, bypass_pipeline, fuzz, pipelines_for
from ..bundle import Bundle
from ..protect import SCHEMES, ProtectionReport, SchemeConfig, protect
from .corpus import ATTACKER_KEY, DEV_KEY, CorpusSpec, gen_corpus, input_suite
from .overhead import measure_overhead

EVAL_SCHEMA_VERSION = 1
BOMB_SCHEMES = ("sdc", "bombdroid", "nrp")


def cell_seed(seed: int, *coords) -> int:
    h = hashlib.sha256("/".join(str(c) for c in (seed, *coords)).encode()).digest()
    return int.from_bytes(h[:4], "little")


def _r(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(x, 6)


_MEASURED = ("instruction_ratio", "size_ratio", "exposure", "fraction_fired")


@dataclass
class EvalCell:
    scheme: str
    pipeline: str
    program: int
    bypass_success: bool = False
    sites_neutralized: int = 0
    bombs_total: Optional[int] = None
    bombs_neutralized: Optional[int] = None
    instruction_ratio: Optional[float] = None
    size_ratio: Optional[float] = None
    exposure: Optional[float] = None
    fraction_fired: Optional[float] = None
    error: Optional[str] = None
    attack: Optional[dict] = None

    def __setattr__(self, name: str, value) -> None:
        # store measurements already rounded, so rows summarized from a
        # reloaded report equal the rows of the live matrix
        if name in _MEASURED:
            value = _r(value)
        super().__setattr__(name, value)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class _SchemeRun:
    """Per (scheme, program) work shared by all pipelines of that scheme."""

    protected: Bundle
    report: ProtectionReport
    instruction_ratio: float
    size_ratio: float
    exposure: Optional[float]
    fraction_fired: Optional[float]


def _protect_program(bundle: Bundle, suite, scheme: str, program: int, seed: int,
                     fuzz_runs: int, overrides: dict) -> _SchemeRun:
    cfg = SchemeConfig(scheme, seed=cell_seed(seed, "protect", scheme, program), **overrides)
    pb, rep = protect(bundle, cfg, DEV_KEY)
    ov = measure_overhead(bundle, pb, suite)
    ff = None
    if scheme in BOMB_SCHEMES and fuzz_runs > 0:
        n_in = len(suite[0]) if suite else 4
        ff = fuzz(pb, fuzz_runs, n_in, cell_seed(seed, "fuzz", scheme, program)).fraction_fired(rep)
    return _SchemeRun(pb, rep, ov.instruction_ratio, ov.size_ratio, ov.exposure, ff)


def _run_scheme(args) -> list[EvalCell]:
    bundle, suite, scheme, program, pipelines, seed, fuzz_runs, overrides = args
    try:
        sr = _protect_program(bundle, suite, scheme, program, seed, fuzz_runs, overrides)
    except Exception as err:
        msg = f"protect failed: {type(err).__name__}: {err}"
        return [EvalCell(scheme, p, program, error=msg) for p in pipelines]
    cells = []
    for p in pipelines:
        cell = EvalCell(scheme, p, program, instruction_ratio=sr.instruction_ratio,
                        size_ratio=sr.size_ratio, exposure=sr.exposure,
                        fraction_fired=sr.fraction_fired)
        try:
            _, ar = bypass_pipeline(sr.protected, scheme, p, attacker_key=ATTACKER_KEY,
                                    suite=suite, seed=cell_seed(seed, "attack", scheme, p, program),
                                    report=sr.report)
            cell.bypass_success = ar.bypass_success
            cell.sites_neutralized = ar.sites_neutralized
            cell.bombs_total, cell.bombs_neutralized = ar.bombs_total, ar.bombs_neutralized
            cell.error = ar.error
            cell.attack = ar.to_dict()
        except Exception as err:  # a broken cell never aborts the matrix
            cell.error = f"{type(err).__name__}: {err}"
        cells.append(cell)
    return cells


def summarize(cells: Iterable[EvalCell]) -> list[dict]:
    """One row per (scheme, pipeline), derived only from the cells."""
    groups: dict[tuple[str, str], list[EvalCell]] = {}
    for c in cells:
        groups.setdefault((c.scheme, c.pipeline), []).append(c)

    def mean(xs):
        xs = [x for x in xs if x is not None]
        return _r(sum(xs) / len(xs)) if xs else None

    rows = []
    for (scheme, pipeline), cs in groups.items():
        bt = [c.bombs_total for c in cs if c.bombs_total is not None]
        rows.append({
            "scheme": scheme,
            "pipeline": pipeline,
            "n_programs": len(cs),
            "n_success": sum(c.bypass_success for c in cs),
            "bypass_success": bool(cs) and all(c.bypass_success for c in cs),
            "sites_neutralized": sum(c.sites_neutralized for c in cs),
            "bombs_total": sum(bt) if bt else None,
            "bombs_neutralized": sum(c.bombs_neutralized or 0 for c in cs) if bt else None,
            "instruction_ratio": mean(c.instruction_ratio for c in cs),
            "size_ratio": mean(c.size_ratio for c in cs),
            "exposure": mean(c.exposure for c in cs),
            "fraction_fired": mean(c.fraction_fired for c in cs),
            "errors": sum(c.error is not None for c in cs),
        })
    return rows


@dataclass
class EvalMatrix:
    spec: CorpusSpec
    seed: int
    schemes: list[str]
    pipelines: dict[str, list[str]]
    cells: list[EvalCell] = field(default_factory=list)

    @property
    def rows(self) -> list[dict]:
        return summarize(self.cells)

    def row(self, scheme: str, pipeline: str) -> Optional[dict]:
        for r in self.rows:
            if r["scheme"] == scheme and r["pipeline"] == pipeline:
                return r
        return None

    def schemes_bypassed(self) -> dict[str, bool]:
        """Scheme -> whether some pipeline succeeded on every program."""
        out = {s: False for s in self.schemes}
        for r in self.rows:
            if r["bypass_success"]:
                out[r["scheme"]] = True
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": EVAL_SCHEMA_VERSION,
            "kind": "eval",
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "schemes": list(self.schemes),
            "pipelines": {k: list(v) for k, v in self.pipelines.items()},
            "rows": self.rows,
            "schemes_bypassed": self.schemes_bypassed(),
            "cells": [c.to_dict() for c in self.cells],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        if d.get("schema_version") != EVAL_SCHEMA_VERSION or d.get("kind") != "eval":
            raise ValueError("not an eval report of a supported schema version")
        spec = d["spec"]
        spec = CorpusSpec(**{**spec, "const_range": tuple(spec["const_range"])})
        cells = [EvalCell(**c) for c in d["cells"]]
        return cls(spec, d["seed"], list(d["schemes"]), dict(d["pipelines"]), cells)

    def attack_reports(self) -> list[AttackReport]:
        return [AttackReport.from_dict(c.attack) for c in self.cells if c.attack]


PipelineChoice = Union[None, str, Sequence[str]]


def _pipelines(schemes: Sequence[str], choice: PipelineChoice) -> dict[str, list[str]]:
    if choice is None or choice == "all":
        return {s: pipelines_for(s) for s in schemes}
    if choice == "best":
        return {s: [BEST_PIPELINE[s]] for s in schemes}
    if isinstance(choice, str):
        choice = [choice]
    return {s: list(choice) for s in schemes}


def evaluate(spec: CorpusSpec = CorpusSpec(), schemes: Sequence[str] = SCHEMES,
             pipelines: PipelineChoice = "best", seed: int = 0, fuzz_runs: int = 200,
             overrides: Optional[dict] = None, workers: int = 1,
             corpus: Optional[list[Bundle]] = None) -> EvalMatrix:
    """Protect every corpus program with every scheme and run the chosen pipelines.

    ``pipelines`` is "best" (one per scheme), "all" (every pipeline for the
    scheme plus naive repackaging) or an explicit list applied to every
    scheme.  ``overrides`` are extra SchemeConfig fields for all schemes.
    """
    for s in schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown scheme {s!r}")
    plan = _pipelines(schemes, pipelines)
    corpus = gen_corpus(spec) if corpus is None else corpus
    suites = [input_suite(b, spec.suite_size, spec.seed, spec.main_params, spec.const_range,
                          spec.const_prob) for b in corpus]
    jobs = [(b, suites[p], s, p, plan[s], seed, fuzz_runs, dict(overrides or {}))
            for s in schemes for p, b in enumerate(corpus)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_scheme, jobs))
    else:
        results = [_run_scheme(j) for j in jobs]
    cells = [c for group in results for c in group]
    order = {s: i for i, s in enumerate(schemes)}
    cells.sort(key=lambda c: (order[c.scheme], plan[c.scheme].index(c.pipeline), c.program))
    return EvalMatrix(spec, seed, list(schemes), plan, cells)
