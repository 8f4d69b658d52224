"""Repackaging an unprotected app takes three steps and leaves no trace.

Generate a signed app, inject a payload, resign it with a different key,
and compare the two on a suite of inputs.
"""

from repacklab import run, verify
from repacklab.attack import SENTINEL, repackage, sentinel_payload
from repacklab.equivalence import run_equivalence
from repacklab.harness import ATTACKER_KEY, CorpusSpec, gen_corpus, input_suite

app = gen_corpus(CorpusSpec(n_programs=1))[0]
inputs = input_suite(app, 50)
print(f"original app: {len(app.sections)} sections, signature check: {verify(app).reason}")

evil = repackage(app, sentinel_payload(), ATTACKER_KEY)
print(f"repackaged app verifies too: {verify(evil).reason} (Android only checks self-consistency)")

first = inputs[0]
print(f"outputs on {first}:")
print(f"  original   {run(app, first).outputs}")
print(f"  repackaged {run(evil, first).outputs}  <- {hex(SENTINEL)} is the injected payload")

same = run_equivalence(app, evil, inputs, ignore=(SENTINEL,))
print(f"apart from the payload, behavior is identical on {same.runs} inputs: {bool(same)}")
