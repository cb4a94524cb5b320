"""Convergence against the smooth solution sin(pi x)^2 sin(pi y)^2 on the unit square.

The energy error of the reconstruction decays like h^(k+1) and the L2 error
gains at least one further order.

    python demos/manufactured.py [k] [max_ndof]
"""
import sys

import numpy as np

from hhoplate.cli import manufactured_f, manufactured_hessian, manufactured_u
from hhoplate.estimate import adaptive_source
from hhoplate.local import DofLayout
from hhoplate.mesh import build_initial

k = int(sys.argv[1]) if len(sys.argv) > 1 else 0
max_ndof = int(sys.argv[2]) if len(sys.argv) > 2 else 20000
hist = adaptive_source(build_initial("unit_square"), DofLayout(k), manufactured_f, adaptive=False,
                       max_ndof=max_ndof, exact=(manufactured_u, manufactured_hessian))

en, l2 = hist.eoc("energy_err", "h"), hist.eoc("l2_err", "h")
print(f"{'hmax':>10} {'energy':>11} {'eoc':>6} {'L2':>11} {'eoc':>6}")
for i, row in enumerate(hist.rows):
    a = f"{en[i - 1]:6.2f}" if i else " " * 6
    b = f"{l2[i - 1]:6.2f}" if i else " " * 6
    print(f"{row['hmax']:10.4f} {row['energy_err']:11.3e} {a} {row['l2_err']:11.3e} {b}")
