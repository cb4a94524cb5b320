import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import Poly2D, random_triangles
from oracle import brute_force
from hhoplate.local import DofLayout, LocalOperators, local_weights_eigen
from hhoplate.polyspace import cell_rule

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def interp(ops, p):
    return ops.interpolate(p, p.grad)


def hessian_table(ops, coeffs, pts):
    t = ops.eval_poly(coeffs, pts, 2)
    return np.stack([np.stack([t[(2, 0)], t[(1, 1)]], -1), np.stack([t[(1, 1)], t[(0, 2)]], -1)], -2)


def hessian_error(ops, p, x, degree=16):
    """||hess(p - R_T x)||_T^2 per cell."""
    pts, w = cell_rule(degree).map_to_cells(ops.vertices)
    d = p.hessian(pts) - hessian_table(ops, ops.reconstruct(x), pts)
    return np.einsum("cq,cqij,cqij->c", w, d, d)


def hessian_norm2(ops, p, degree=16):
    pts, w = cell_rule(degree).map_to_cells(ops.vertices)
    H = p.hessian(pts)
    return np.einsum("cq,cqij,cqij->c", w, H, H)


def quad_form(M, x):
    return np.einsum("cl,clm,cm->c", x, M, x)


# -- layout ----------------------------------------------------------------

def test_layout_sizes_for_lowest_order():
    L = DofLayout(0)
    assert (L.ell, L.m, L.n_cell, L.n_local, L.n_rec) == (2, 0, 6, 15, 6)
    assert LocalOperators(REF, L).R.shape == (1, 6, 15)


@pytest.mark.parametrize("k", range(5))
def test_layout_block_sizes(k):
    L = DofLayout(k)
    assert L.n_value == max(k - 1, 0) + 1
    assert L.n_normal == k + 1
    # one scalar per vertex regardless of k
    assert L.n_local - L.n_cell - 3 * (L.n_value + L.n_normal) == 3


def test_layout_rejects_small_cell_degree():
    assert DofLayout(4, ell=2).ell == 2
    with pytest.raises(ValueError, match="ell"):
        DofLayout(4, ell=1)
    with pytest.raises(ValueError):
        DofLayout(-1)


# -- interpolation -----------------------------------------------------------

def test_interpolate_constant():
    L = DofLayout(1)
    ops = LocalOperators(REF, L)
    x = ops.interpolate(lambda p: np.full(p.shape[:-1], 3.0), lambda p: np.zeros(p.shape))
    assert x[0, 0] == pytest.approx(3.0 * np.sqrt(0.5))
    assert np.allclose(x[0, 1:L.n_cell], 0.0, atol=1e-14)
    for f in range(3):
        vals = x[0, L.value_slice(f)]
        assert vals[0] == pytest.approx(3.0 * np.sqrt(ops.facet_length[0, f]))
        assert np.allclose(vals[1:], 0.0, atol=1e-14)
        assert np.allclose(x[0, L.normal_slice(f)], 0.0, atol=1e-14)
    assert np.allclose([x[0, L.vertex_index(v)] for v in range(3)], 3.0)


def test_interpolate_x_has_zero_normal_derivative_on_bottom_facet():
    L = DofLayout(0)
    ops = LocalOperators(REF, L)
    p = Poly2D([[0], [1]])
    x = interp(ops, p)
    # local facet 2 joins (0,0) and (1,0); its outward normal is (0,-1)
    assert np.allclose(ops.normal[0, 2], [0.0, -1.0])
    assert abs(x[0, L.normal_slice(2)][0]) < 1e-15


def test_interpolate_vertex_value():
    L = DofLayout(2)
    ops = LocalOperators(REF, L)
    x = interp(ops, Poly2D([[0, 0, 1], [0, 0, 0], [1, 0, 0]]))
    assert x[0, L.vertex_index(1)] == pytest.approx(1.0, abs=1e-15)


# -- reconstruction ------------------------------------------------------------

def test_reconstruction_reproduces_x_squared():
    ops = LocalOperators(REF, DofLayout(0))
    p = Poly2D([[0], [0], [1]])
    x = interp(ops, p)
    pts, w = cell_rule(8).map_to_cells(ops.vertices)
    ref = np.einsum("cq,cq,cqi->ci", w, p(pts), ops.basis.values(pts, 6))
    assert np.abs(ops.reconstruct(x) - ref).max() <= 1e-11


@settings(max_examples=20, deadline=None)
@given(k=st.integers(0, 3), seed=st.integers(0, 2**31 - 1))
def test_reconstruction_reproduces_polynomials(k, seed):
    rng = np.random.default_rng(seed)
    tris = random_triangles(rng, 5)
    ops = LocalOperators(tris, DofLayout(k))
    p = Poly2D.random(rng, k + 2)
    x = interp(ops, p)
    pts, w = cell_rule(2 * k + 6).map_to_cells(tris)
    ref = np.einsum("cq,cq,cqi->ci", w, p(pts), ops.basis.values(pts, DofLayout(k).n_rec))
    assert np.abs(ops.reconstruct(x) - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


@pytest.mark.parametrize("k", range(4))
def test_commuting_orthogonality(k, rng):
    tris = random_triangles(rng, 10)
    ops = LocalOperators(tris, DofLayout(k))
    v = Poly2D.random(rng, k + 4)
    x = interp(ops, v)
    pts, w = cell_rule(2 * k + 8).map_to_cells(tris)
    d = v.hessian(pts) - hessian_table(ops, ops.reconstruct(x), pts)
    tab = ops.basis.eval(pts, 2, DofLayout(k).n_rec)
    Hq = np.stack([np.stack([tab[(2, 0)], tab[(1, 1)]], -1), np.stack([tab[(1, 1)], tab[(0, 2)]], -1)], -2)
    inner = np.einsum("cq,cqij,cqnij->cn", w, d, Hq)
    qnorm = np.sqrt(np.einsum("cq,cqnij,cqnij->cn", w, Hq, Hq))
    vnorm = np.sqrt(hessian_norm2(ops, v))
    assert np.all(np.abs(inner) <= 1e-9 * vnorm[:, None] * np.maximum(qnorm, 1e-300))


@pytest.mark.parametrize("k", [0, 1, 2])
def test_best_approximation_in_hessian_seminorm(k, rng):
    tris = random_triangles(rng, 4)
    ops = LocalOperators(tris, DofLayout(k))
    v = Poly2D.random(rng, k + 4)
    err = hessian_error(ops, v, interp(ops, v))
    for _ in range(100):
        q = Poly2D.random(rng, k + 2)
        diff = Poly2D(v.c - np.pad(q.c, [(0, 2), (0, 2)]))
        assert np.all(err <= hessian_norm2(ops, diff) * (1 + 1e-10) + 1e-12)


@pytest.mark.parametrize("k", [0, 1, 3])
def test_mean_value_constraints(k, rng):
    tris = random_triangles(rng, 6)
    ops = LocalOperators(tris, DofLayout(k))
    v = Poly2D.random(rng, k + 5)
    x = interp(ops, v)
    pts, w = cell_rule(2 * k + 10).map_to_cells(tris)
    t = ops.eval_poly(ops.reconstruct(x), pts, 1)
    assert np.allclose(np.einsum("cq,cq->c", w, t[(0, 0)]), np.einsum("cq,cq->c", w, v(pts)), atol=1e-11)
    grad = np.stack([t[(1, 0)], t[(0, 1)]], -1)
    assert np.allclose(np.einsum("cq,cqd->cd", w, grad), np.einsum("cq,cqd->cd", w, v.grad(pts)), atol=1e-11)


def test_reconstruction_matches_brute_force_on_a_random_triangle(rng):
    tri = random_triangles(rng, 1)[0]
    R, S, _ = brute_force(tri, 1)
    ops = LocalOperators(tri, DofLayout(1))
    assert np.abs(ops.R[0] - R).max() <= 1e-9
    assert np.abs(ops.S[0] - S).max() <= 1e-9 * max(1.0, np.abs(S).max())


# -- stabilisation -------------------------------------------------------------

@pytest.mark.parametrize("variant", ["source", "eigen"])
@pytest.mark.parametrize("k", range(4))
def test_stabilization_kernel(variant, k, rng):
    tris = random_triangles(rng, 8)
    ops = LocalOperators(tris, DofLayout(k), variant=variant, sigma=0.4086)
    p = Poly2D.random(rng, k + 2)
    # evaluated from the projected residuals, as a sum of squares
    s = ops.stabilization_terms(interp(ops, p)).sum(axis=1)
    assert np.all(s <= 1e-20 * hessian_norm2(ops, p))


def test_source_stabilization_cubic_matches_oracle():
    ops = LocalOperators(REF, DofLayout(0))
    v = Poly2D([[0], [0], [0], [1]])
    x = interp(ops, v)
    s = quad_form(ops.S, x)[0]
    _, S, _ = brute_force(REF, 0)
    assert s > 0
    assert s == pytest.approx(x[0] @ S @ x[0], rel=1e-10)


@pytest.mark.parametrize("variant", ["source", "eigen"])
def test_stabilization_symmetric_psd(variant, rng):
    ops = LocalOperators(random_triangles(rng, 20), DofLayout(2), variant=variant, sigma=2.0)
    S = ops.S
    assert np.allclose(S, np.swapaxes(S, 1, 2), rtol=0, atol=1e-13 * np.abs(S).max())
    ev = np.linalg.eigvalsh(S)
    assert np.all(ev.min(axis=1) >= -1e-12 * np.abs(ev).max(axis=1))


def test_stabilization_terms_sum_to_quadratic_form(rng):
    ops = LocalOperators(random_triangles(rng, 5), DofLayout(1), variant="eigen", sigma=0.7)
    x = rng.standard_normal((5, DofLayout(1).n_local))
    assert np.allclose(ops.stabilization_terms(x).sum(axis=1), quad_form(ops.S, x), rtol=1e-12)


def test_eigen_weights_on_reference_hypotenuse():
    ops = LocalOperators(REF, DofLayout(0), variant="eigen")
    lf, lef = local_weights_eigen(ops.h, ops.area, ops.facet_length)
    # local facet 0 is the hypotenuse
    assert ops.facet_length[0, 0] == pytest.approx(np.sqrt(2))
    assert lf[0, 0] == pytest.approx(4 * np.sqrt(2), rel=1e-14)
    assert lef[0, 0] == pytest.approx(np.sqrt(2), rel=1e-14)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_eigen_variant_requires_positive_sigma(sigma):
    with pytest.raises(ValueError, match="sigma"):
        LocalOperators(REF, DofLayout(0), variant="eigen", sigma=sigma)


def test_unknown_variant():
    with pytest.raises(ValueError):
        LocalOperators(REF, DofLayout(0), variant="weak")


def test_eigen_stabilization_scales_linearly_in_sigma(rng):
    tris = random_triangles(rng, 3)
    a = LocalOperators(tris, DofLayout(1), variant="eigen", sigma=1.0).S
    b = LocalOperators(tris, DofLayout(1), variant="eigen", sigma=0.25).S
    assert np.allclose(b, 0.25 * a, rtol=1e-13, atol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), degree=st.sampled_from([4, 5]), k=st.integers(0, 2))
def test_eigen_stabilization_constant(seed, degree, k):
    rng = np.random.default_rng(seed)
    tris = random_triangles(rng, 4)
    ops = LocalOperators(tris, DofLayout(k), variant="eigen", sigma=1.0)
    # quartics and quintics outside P_{k+2}, where both sides would be roundoff
    v = Poly2D.random(rng, max(degree, k + 3))
    x = interp(ops, v)
    ctr = (2 + 3 / np.pi) / np.pi
    const = 1 / np.pi**4 + ctr / np.pi**2 + ctr + ctr * (2 / np.pi + 2 / np.pi**2)
    lhs = ops.stabilization_terms(x).sum(axis=1)
    rhs = const * hessian_error(ops, v, x)
    assert np.all(lhs <= rhs * (1 + 1e-8) + 1e-14)


# -- local matrices ------------------------------------------------------------

@pytest.mark.parametrize("variant", ["source", "eigen"])
def test_stiffness_symmetric(variant, rng):
    A = LocalOperators(random_triangles(rng, 10), DofLayout(2), variant=variant).stiffness
    assert np.abs(A - np.swapaxes(A, 1, 2)).max() <= 1e-13 * np.abs(A).max()


@pytest.mark.parametrize("k", range(3))
def test_stiffness_on_interpolated_polynomials_is_hessian_energy(k, rng):
    ops = LocalOperators(random_triangles(rng, 6), DofLayout(k))
    p = Poly2D.random(rng, k + 2)
    ref = hessian_norm2(ops, p)
    assert np.allclose(quad_form(ops.stiffness, interp(ops, p)), ref, rtol=1e-10)


def test_stiffness_dominates_reconstructed_energy(rng):
    ops = LocalOperators(random_triangles(rng, 6), DofLayout(1))
    psi = Poly2D.random(rng, 6)
    x = interp(ops, psi)
    pts, w = cell_rule(12).map_to_cells(ops.vertices)
    H = hessian_table(ops, ops.reconstruct(x), pts)
    energy = np.einsum("cq,cqij,cqij->c", w, H, H)
    assert np.all(quad_form(ops.stiffness, x) >= energy * (1 - 1e-12))


def test_load_of_one_and_zero():
    ops = LocalOperators(REF, DofLayout(1))
    b = ops.load(lambda p: np.ones(p.shape[:-1]))
    assert b[0, 0] == pytest.approx(np.sqrt(0.5), rel=1e-14)
    assert np.abs(b[0, 1:]).max() < 1e-14
    assert not ops.load(lambda p: np.zeros(p.shape[:-1])).any()


def test_load_of_x_matches_exact_moments(rng):
    tris = random_triangles(rng, 5)
    ops = LocalOperators(tris, DofLayout(0))
    b = ops.load(lambda p: p[..., 0])
    area = ops.area
    xs = tris[..., 0]
    mean = xs.mean(axis=1)
    second = area / 6 * (np.sum(xs**2, axis=1) + xs[:, 0] * xs[:, 1] + xs[:, 0] * xs[:, 2] + xs[:, 1] * xs[:, 2])
    # x lies in P_ell, so the entries are its coefficients (Parseval)
    assert np.allclose(b[:, 0], np.sqrt(area) * mean, rtol=1e-12)
    assert np.allclose(np.sum(b**2, axis=1), second, rtol=1e-12)
    assert not b[:, 6:].any()


def test_mass_is_identity_on_cell_block():
    L = DofLayout(1)
    M = LocalOperators(REF, L).mass[0]
    assert np.array_equal(M[:L.n_cell, :L.n_cell], np.eye(L.n_cell))
    assert not M[L.n_cell:].any() and not M[:, L.n_cell:].any()
    assert np.trace(M) == L.n_cell
