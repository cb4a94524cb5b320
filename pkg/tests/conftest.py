import re

import numpy as np
import pytest
from numpy.polynomial import polynomial as P


def random_triangle(rng, rho_max=8.0, scale=1.0):
    """Counter-clockwise triangle with shape regularity h/inradius <= rho_max."""
    while True:
        v = rng.uniform(-1.0, 1.0, size=(3, 2)) * scale
        e1, e2 = v[1] - v[0], v[2] - v[0]
        area = 0.5 * (e1[0] * e2[1] - e1[1] * e2[0])
        if area < 0:
            v = v[[0, 2, 1]]
            area = -area
        sides = np.linalg.norm(v[[1, 2, 0]] - v[[2, 0, 1]], axis=1)
        if area <= 0:
            continue
        rho = sides.max() / (2 * area / sides.sum())
        if rho <= rho_max:
            return v


def random_triangles(rng, n, rho_max=8.0):
    return np.stack([random_triangle(rng, rho_max) for _ in range(n)])


class Poly2D:
    """Bivariate polynomial sum c[a, b] x^a y^b with derivative helpers."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    @classmethod
    def random(cls, rng, degree):
        c = rng.standard_normal((degree + 1, degree + 1))
        a, b = np.indices(c.shape)
        c[a + b > degree] = 0.0
        return cls(c)

    def d(self, i, j):
        c = self.c
        if i:
            c = P.polyder(c, i, axis=0)
        if j:
            c = P.polyder(c, j, axis=1)
        return Poly2D(c)

    def __call__(self, p):
        return P.polyval2d(p[..., 0], p[..., 1], self.c)

    def grad(self, p):
        return np.stack([self.d(1, 0)(p), self.d(0, 1)(p)], axis=-1)

    def hessian(self, p):
        xx, xy, yy = self.d(2, 0)(p), self.d(1, 1)(p), self.d(0, 2)(p)
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)

    def bilap(self, p):
        return self.d(4, 0)(p) + 2 * self.d(2, 2)(p) + self.d(0, 4)(p)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def report(request):
    """Record a one-line verdict for an acceptance criterion."""

    def _report(number, title, ok, detail=""):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        request.node.user_properties.append(("criterion", line))
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call":
                continue
            m = re.search(r"test_criterion_(\d+)", rep.nodeid)
            if not m:
                continue
            recorded = [v for k, v in rep.user_properties if k == "criterion"]
            if recorded:
                line = recorded[-1]
                if outcome == "failed" and "[PASS]" in line:
                    line = line.replace("[PASS]", "[FAIL]")
            else:
                line = f"criterion {int(m.group(1)):2d} [{'PASS' if outcome == 'passed' else 'FAIL'}] {rep.nodeid}"
            lines.append((int(m.group(1)), line))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
