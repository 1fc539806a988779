"""Finite-difference check of every layer's backward pass, including all 27 GCT variants.

Run: python3 demos/gradient_check.py [instances]
"""
import sys
import time

from gctnet.gradcheck import TOLERANCE, run_suite

instances = int(sys.argv[1]) if len(sys.argv) > 1 else 10
t0 = time.perf_counter()
results = run_suite(instances=instances)
for r in results:
    flag = "ok  " if r.passed else "FAIL"
    print(f"{flag} {r.name:42s} {r.max_rel_error:.2e}  (worst array: {r.worst})")
print(f"\n{sum(r.passed for r in results)}/{len(results)} cases below {TOLERANCE:g} "
      f"with {instances} instances each, {time.perf_counter() - t0:.1f} s")
