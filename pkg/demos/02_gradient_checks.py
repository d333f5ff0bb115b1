"""Check every differentiable op against central finite differences.

Equivalent to `adld gradcheck`, but as a library call so the per-op errors
can be inspected programmatically.  The corrupted run at the end shows the
mutation test tripping on a deliberately wrong backward rule.
"""

from adld import gradcheck

results = gradcheck.run_checks(seeds=20)
width = max(len(k) for k in results)
for name, err in sorted(results.items(), key=lambda kv: -kv[1]):
    status = "ok " if err < gradcheck.TOLERANCE else "FAIL"
    print(f"{status} {name:<{width}} max rel err {err:.3e}")
print()

corrupt = gradcheck.run_checks(ops=["tanh"], seeds=3, corrupt=True)
print(f"deliberately corrupted backward rule: err {corrupt['corrupted_tanh']:.3f} (should be large)")
