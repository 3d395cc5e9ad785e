"""
Checking gradients
==================

Every loss is compared against central finite differences at random points.
"""

from siamreloc.checks import run_gradcheck_suite

for name, err in run_gradcheck_suite(n_points=5, seed=0).items():
    print(f"{name:22s} worst relative error {err:.1e}")
