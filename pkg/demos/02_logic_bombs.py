"""Logic bombs (NRP flavor) and the two ways an attacker takes them apart.

A protected app hides blocks of code behind hashed branch constants.  A
naive repackager trips them.  An attacker who brute forces the small
constants, or who points the integrity check at a pristine copy of the
code, gets a clean repackaged app with every bomb defused.
"""

from repacklab.attack import (
    brute_force,
    bypass_pipeline,
    fuzz,
    key_reuse_scan,
    repackage,
    scan_patterns,
    sentinel_payload,
)
from repacklab.harness import ATTACKER_KEY, DEV_KEY, CorpusSpec, gen_corpus, input_suite
from repacklab.protect import SchemeConfig, protect

app = gen_corpus(CorpusSpec(n_programs=1, seed=3))[0]
suite = input_suite(app, 100)
prot, report = protect(app, SchemeConfig("nrp"), DEV_KEY)
print(f"protected with {report.sites_protected} bombs; sections {len(app.sections)} -> {len(prot.sections)}")

naive = repackage(prot, sentinel_payload(), ATTACKER_KEY)
stats = fuzz(naive, 1000)
print(f"naive repackaging, tamper faults in 1000 fuzz runs: {stats.tamper_faults}")

sites = [s for s in scan_patterns(prot) if s.kind == "hasheq"]
print(f"static scan finds {len(sites)} trigger hashes; brute force over [-1024, 1024]:")
for s in sites:
    print(f"  {s.function}[{s.index}] digest {s.digest32:08x} -> v = {brute_force(s)}")
print(f"digest groups shared by equal constants (unsalted): {len(key_reuse_scan(sites))} reuse groups")

for strategy in ("override", "redirect"):
    _, ar = bypass_pipeline(prot, "nrp", strategy, suite=suite, report=report)
    print(f"nrp:{strategy}: success={ar.bypass_success}, "
          f"bombs neutralized {ar.bombs_neutralized}/{ar.bombs_total}, faults {ar.tamper_faults}")
