"""Command-line front end: ``repacklab <verb> ...``.

Exit codes: 0 success, 1 usage error (bad arguments, unreadable files),
2 verification or equivalence failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .attack import PIPELINES, bypass_pipeline, sentinel_payload
from .bundle import ChecksumMode, FormatError, KeyPair, deserialize, serialize, verify
from .harness import CorpusSpec, evaluate, gen_corpus, input_suite, run_equivalence
from .isa import DecodeError, decode_program
from .protect import SCHEMES, ProtectError, SchemeConfig, protect
from .vm import DEFAULT_STEP_LIMIT, run

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


def _read_bundle(path: str):
    try:
        return deserialize(Path(path).read_bytes())
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}") from None
    except FormatError as err:
        raise UsageError(f"{path}: not a bundle ({err})") from None


def _write(path: str, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


def _inputs(text: Optional[str]) -> list[int]:
    if not text:
        return []
    try:
        return [int(x, 0) & 0xFFFFFFFF for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad input list {text!r}") from None


def _read_suite(path: str) -> list[tuple[int, ...]]:
    try:
        data = json.loads(Path(path).read_text())
        return [tuple(int(x) & 0xFFFFFFFF for x in v) for v in data]
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}") from None
    except (ValueError, TypeError):
        raise UsageError(f"{path}: expected a JSON list of input vectors") from None


def _ratio(x: Optional[float]) -> str:
    return "   -" if x is None else f"{x:.2f}"


def _emit(args, payload: dict, text: str) -> None:
    if args.report:
        _write(args.report, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode())
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True, indent=2))
    elif text:
        print(text)


def _config_value(key: str, raw: str):
    if key == "checksum_mode":
        return ChecksumMode[raw.upper()]
    if key in ("tamper_scope",):
        return tuple(x for x in raw.split(",") if x)
    if key == "const_range":
        lo, hi = raw.split(",")
        return (int(lo), int(hi))
    if key in ("salt_policy",):
        return raw
    if key in ("obfuscate", "inject_artificial"):
        return raw.lower() in ("1", "true", "yes")
    try:
        return int(raw)
    except ValueError:
        return float(raw)


# -- verbs --------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = CorpusSpec(seed=args.seed, n_programs=args.n_programs, n_functions=args.n_functions,
                      n_conditions=args.n_conditions, suite_size=args.suite_size)
    corpus = gen_corpus(spec)
    out = Path(args.outdir)
    files = []
    for p, b in enumerate(corpus):
        name = f"app{p:02d}.rpkg"
        _write(str(out / name), serialize(b))
        suite = input_suite(b, spec.suite_size, spec.seed, spec.main_params, spec.const_range,
                            spec.const_prob)
        _write(str(out / f"app{p:02d}.suite.json"), json.dumps(suite).encode())
        files.append(name)
    _emit(args, {"schema_version": 1, "kind": "corpus", "spec": spec.to_dict(), "bundles": files},
          f"wrote {len(files)} bundles to {out}")
    return EXIT_OK


def cmd_protect(args) -> int:
    bundle = _read_bundle(args.input)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _config_value(k, v)
    if args.density is not None:
        overrides["bomb_density"] = args.density
    if args.checksum_mode is not None:
        overrides["checksum_mode"] = ChecksumMode[args.checksum_mode.upper()]
    if args.nesting_depth is not None:
        overrides["nesting_depth"] = args.nesting_depth
    try:
        cfg = SchemeConfig(args.scheme, seed=args.seed, **overrides)
    except (TypeError, ValueError, KeyError) as err:
        raise UsageError(f"bad configuration: {err}") from None
    try:
        out, rep = protect(bundle, cfg, KeyPair.from_int(args.key_seed))
    except ProtectError as err:
        print(f"protect: {err}", file=sys.stderr)
        return EXIT_FAILED
    _write(args.output, serialize(out))
    _emit(args, rep.to_dict(), f"{args.scheme}: {rep.sites_protected}/{rep.sites_found} sites, "
          f"{rep.original_size} -> {rep.protected_size} bytes")
    return EXIT_OK


def _payload(spec: Optional[str]):
    if spec in (None, "sentinel"):
        return sentinel_payload()
    if spec == "none":
        return None
    try:
        prog = decode_program(Path(spec).read_bytes())
    except OSError as err:
        raise UsageError(f"cannot read payload {spec}: {err.strerror}") from None
    except DecodeError as err:
        raise UsageError(f"payload {spec}: {err}") from None
    return prog.functions[prog.entry]


def cmd_attack(args) -> int:
    if args.pipeline not in PIPELINES:
        raise UsageError(f"unknown pipeline {args.pipeline!r}; choose from {', '.join(PIPELINES)}")
    bundle = _read_bundle(args.input)
    scheme = args.pipeline.split(":")[0] if ":" in args.pipeline else "none"
    suite = _read_suite(args.suite) if args.suite else None
    out, ar = bypass_pipeline(bundle, scheme, args.pipeline, payload=_payload(args.payload),
                              attacker_key=KeyPair.from_int(args.key_seed), suite=suite,
                              seed=args.seed)
    _write(args.output, serialize(out))
    _emit(args, ar.to_dict(), f"{ar.pipeline}: bypass_success={ar.bypass_success} "
          f"found={ar.sites_found} neutralized={ar.sites_neutralized} secrets={len(ar.secrets)}"
          + (f" error={ar.error}" if ar.error else ""))
    return EXIT_OK if ar.bypass_success else EXIT_FAILED


def cmd_run(args) -> int:
    bundle = _read_bundle(args.input)
    if args.against:
        other = _read_bundle(args.against)
        suite = _read_suite(args.suite) if args.suite else [tuple(_inputs(args.inputs))]
        v = run_equivalence(bundle, other, suite, ignore=_inputs(args.ignore), seed=args.seed,
                            limit=args.limit)
        _emit(args, {"schema_version": 1, "kind": "equivalence", **v.to_dict()},
              "equal" if v.equal else f"diverged: {v.first_divergence}")
        return EXIT_OK if v.equal else EXIT_FAILED
    res = run(bundle, _inputs(args.inputs), seed=args.seed, limit=args.limit)
    payload = {"schema_version": 1, "kind": "run", "outputs": res.outputs, "steps": res.steps,
               "termination": res.termination,
               "trigger_log": [list(t) for t in res.trigger_log], "loaded": list(res.loaded)}
    _emit(args, payload, f"{res.termination} steps={res.steps} outputs={res.outputs}")
    return EXIT_OK


def cmd_verify(args) -> int:
    bundle = _read_bundle(args.input)
    v = verify(bundle)
    ok = bool(v)
    if ok and args.key_seed is not None:
        ok = bundle.signer_public_key == KeyPair.from_int(args.key_seed).public_key
    signer = bundle.signer_public_key
    payload = {"schema_version": 1, "kind": "verify", "ok": ok, "reason": v.reason,
               "section": v.section, "signer_public_key": signer.hex() if signer else None}
    _emit(args, payload, "ok" if ok else f"FAILED: {v.reason if not v else 'unexpected signer'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_trace(args) -> int:
    bundle = _read_bundle(args.input)
    lines: list[str] = []
    res = run(bundle, _inputs(args.inputs), seed=args.seed, limit=args.limit, trace=lines.append)
    if args.format == "json" or args.report:
        _emit(args, {"schema_version": 1, "kind": "trace", "lines": lines,
                     "termination": res.termination, "outputs": res.outputs}, "")
    if args.format != "json":
        print("\n".join(lines))
        print(f"-- {res.termination} steps={res.steps} outputs={res.outputs}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = CorpusSpec(seed=args.seed, n_programs=args.n_programs)
    schemes = [s for s in args.schemes.split(",") if s] if args.schemes else list(SCHEMES)
    for s in schemes:
        if s not in SCHEMES:
            raise UsageError(f"unknown scheme {s!r}")
    pipelines = args.pipelines
    if pipelines not in ("best", "all"):
        pipelines = [p for p in pipelines.split(",") if p]
        for p in pipelines:
            if p not in PIPELINES:
                raise UsageError(f"unknown pipeline {p!r}")
    m = evaluate(spec, schemes, pipelines, seed=args.seed, fuzz_runs=args.fuzz_runs,
                 workers=args.workers)
    lines = [f"{r['scheme']:12s} {r['pipeline']:24s} {r['n_success']:3d}/{r['n_programs']:<3d} "
             f"insn x{_ratio(r['instruction_ratio'])} size x{_ratio(r['size_ratio'])}" for r in m.rows]
    bypassed = m.schemes_bypassed()
    lines.append("bypassed: " + ", ".join(f"{s}={'yes' if b else 'no'}" for s, b in bypassed.items()))
    if args.report:
        _write(args.report, (m.to_json() + "\n").encode())
    if args.format == "json":
        print(m.to_json())
    else:
        print("\n".join(lines))
    return EXIT_OK if all(bypassed.values()) else EXIT_FAILED


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--report", metavar="PATH", help="also write the JSON report here")
    common.add_argument("--format", choices=("text", "json"), default="text")

    p = argparse.ArgumentParser(prog="repacklab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a corpus of signed apps")
    g.add_argument("outdir")
    g.add_argument("--n-programs", type=int, default=20)
    g.add_argument("--n-functions", type=int, default=8)
    g.add_argument("--n-conditions", type=int, default=6)
    g.add_argument("--suite-size", type=int, default=100)
    g.set_defaults(func=cmd_gen)

    pr = sub.add_parser("protect", parents=[common], help="apply a protection scheme")
    pr.add_argument("input")
    pr.add_argument("output")
    pr.add_argument("--scheme", required=True, choices=SCHEMES)
    pr.add_argument("--key-seed", type=int, default=1, help="developer key seed (default 1)")
    pr.add_argument("--density", type=float, help="fraction of qualified conditions to protect")
    pr.add_argument("--checksum-mode", choices=("fixed", "buggy"))
    pr.add_argument("--nesting-depth", type=int)
    pr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="scheme option, e.g. nesting_depth=2 or checksum_mode=buggy")
    pr.set_defaults(func=cmd_protect)

    a = sub.add_parser("attack", parents=[common], help="run a bypass pipeline")
    a.add_argument("input")
    a.add_argument("output")
    a.add_argument("--pipeline", required=True)
    a.add_argument("--payload", default="sentinel",
                   help="'sentinel' (default), 'none', or a program file whose entry is injected")
    a.add_argument("--key-seed", type=int, default=666, help="attacker key seed (default 666)")
    a.add_argument("--suite", help="JSON list of input vectors used to judge the bypass")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("run", parents=[common], help="execute a bundle, or compare two")
    r.add_argument("input")
    r.add_argument("--inputs", help="comma-separated input values")
    r.add_argument("--limit", type=int, default=DEFAULT_STEP_LIMIT)
    r.add_argument("--against", metavar="BUNDLE", help="compare with this bundle instead")
    r.add_argument("--suite", help="JSON list of input vectors for --against")
    r.add_argument("--ignore", help="comma-separated output values dropped before comparing")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", parents=[common], help="check manifest and signature")
    v.add_argument("input")
    v.add_argument("--key-seed", type=int, default=None, help="also require this signer")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("eval", parents=[common], help="scheme x pipeline evaluation matrix")
    e.add_argument("--n-programs", type=int, default=20)
    e.add_argument("--schemes", help="comma-separated (default: all six)")
    e.add_argument("--pipelines", default="best", help="'best', 'all' or a comma-separated list")
    e.add_argument("--fuzz-runs", type=int, default=200)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("trace", parents=[common], help="execute with an instruction trace")
    t.add_argument("input")
    t.add_argument("--inputs")
    t.add_argument("--limit", type=int, default=10_000)
    t.set_defaults(func=cmd_trace)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; we reserve 2 for failures
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as err:
        print(f"repacklab {args.verb}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
