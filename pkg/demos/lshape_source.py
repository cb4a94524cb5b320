"""Adaptive plate bending on the L-shaped domain.

The corner at the origin makes the solution singular, so uniform refinement
converges slowly. Doerfler marking on the estimator concentrates cells near
the corner and recovers the rate (k+1)/2 with respect to ndof.

    python demos/lshape_source.py [k] [max_ndof]
"""
import sys

import numpy as np

from hhoplate.cli import constant_one, tail_rate
from hhoplate.estimate import adaptive_source
from hhoplate.local import DofLayout
from hhoplate.mesh import build_initial

k = int(sys.argv[1]) if len(sys.argv) > 1 else 0
max_ndof = int(sys.argv[2]) if len(sys.argv) > 2 else 20000

runs = {}
for adaptive in (True, False):
    runs[adaptive] = adaptive_source(build_initial("lshape"), DofLayout(k), constant_one,
                                     adaptive=adaptive, max_ndof=max_ndof)

print(f"k = {k}: estimator eta against ndof")
print(f"{'ndof':>8} {'eta':>12}")
for row in runs[True].rows:
    print(f"{int(row['ndof']):8d} {row['eta']:12.4e}")

for adaptive, hist in runs.items():
    rate = tail_rate(hist.column("eta"), hist.column("ndof"))
    print(f"{'adaptive' if adaptive else 'uniform':>8} rate over the last decade: {rate:.3f}")
print(f"optimal rate: {(k + 1) / 2}")
