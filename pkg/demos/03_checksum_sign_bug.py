"""A sign-extension bug that makes an integrity check fail on untampered apps.

NRP folds the first 100 bytes of the code into four bytes and combines
them into a 32-bit value.  Read as signed chars, any fold byte at 0x80 or
above changes the result, except in the top byte where the difference is
a multiple of 2^32.  The honest app then crashes at its first check.
"""

import random

from repacklab import ChecksumMode, checksum32, run
from repacklab.harness import DEV_KEY, CorpusSpec, gen_corpus, input_suite
from repacklab.protect import SchemeConfig, protect

crashes = 0
apps = gen_corpus(CorpusSpec())
for app in apps:
    prot, report = protect(app, SchemeConfig("nrp", checksum_mode=ChecksumMode.BUGGY), DEV_KEY)
    inputs = input_suite(app, 100) + [(s.const_v,) * 4 for s in report.bomb_sites]
    crashes += any(run(prot, v).termination == "Crashed(TAMPER_DETECTED)" for v in inputs)
print(f"buggy checksum: {crashes}/{len(apps)} untampered apps crash")

rng = random.Random(0)
n = 10_000
differ = 0
for _ in range(n):
    data = rng.randbytes(100)
    differ += checksum32(data, 100, ChecksumMode.FIXED) != checksum32(data, 100, ChecksumMode.BUGGY)
print(f"random prefixes where the modes disagree: {differ / n:.2%} (1 - 1/8 = 87.5%)")
