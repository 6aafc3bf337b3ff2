"""Finite-difference checks for every differentiable op and the whole network.

Each line reports the normwise relative error between the taped gradient and
central differences in float64. The same suite backs ``dynmotion grad-check``.
"""
from dynmotion.gradcheck import TOLERANCE, all_pass, run_checks

errors = run_checks(seeds=(0,))
for name, err in errors.items():
    print(f"{name:24s} {err:.2e}")
print("all below", TOLERANCE, ":", all_pass(errors))
