"""Every scheme against every attack, on a small corpus.

Prints one row per (scheme, pipeline) with the success count and the
overheads the protection costs.
"""

from repacklab.harness import CorpusSpec, evaluate

m = evaluate(CorpusSpec(n_programs=5), pipelines="all", fuzz_runs=100)
print(f"{'scheme':12} {'pipeline':24} {'ok':>5} {'instr x':>8} {'size x':>7}")
for r in m.rows:
    print(f"{r['scheme']:12} {r['pipeline']:24} {r['n_success']:>2}/{r['n_programs']:<2} "
          f"{r['instruction_ratio']:8.2f} {r['size_ratio']:7.2f}")
print("bypassed:", ", ".join(s for s, ok in m.schemes_bypassed().items() if ok))
