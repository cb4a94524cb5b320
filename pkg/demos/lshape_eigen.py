"""Guaranteed lower bound for the first clamped-plate eigenvalue on the L-shape.

With the eigen stabilisation the discrete eigenvalue lambda_h, scaled by
min{1, 1/(alpha + beta lambda_h)}, is below the exact eigenvalue on every mesh.
Once alpha + beta lambda_h <= 1 the discrete value itself is the bound.

Coarse meshes carry a spurious small discrete eigenvalue that scales like
h^-4. It is a valid but poor bound; the physical mode takes over once the
corner is resolved, after which the gap decays like ndof^-(k+1).

    python demos/lshape_eigen.py [max_ndof]
"""
import sys

from hhoplate.cli import LSHAPE_LAMBDA1
from hhoplate.estimate import adaptive_eigen
from hhoplate.local import DofLayout
from hhoplate.mesh import build_initial

max_ndof = int(sys.argv[1]) if len(sys.argv) > 1 else 50000
hist = adaptive_eigen(build_initial("lshape"), DofLayout(1), sigma=0.4086, max_ndof=max_ndof)

print(f"reference eigenvalue {LSHAPE_LAMBDA1}")
print(f"{'ndof':>8} {'lambda_h':>12} {'LEB':>12} {'gap':>10}")
for row in hist.rows:
    print(f"{int(row['ndof']):8d} {row['lambda_h']:12.4f} {row['leb']:12.4f} {LSHAPE_LAMBDA1 - row['leb']:10.3e}")
assert all(r["leb"] <= LSHAPE_LAMBDA1 for r in hist.rows)
