import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from micromorph import transform as T
from micromorph.errors import InadmissibleShift
from micromorph.fespace import FieldU, H1VectorSpace, HCurlTensorSpace, gradient_to_edges
from micromorph.geometry import DomainSpec, build_mesh

CUBE = DomainSpec.unit_cube()
LP = DomainSpec.l_prism()


@pytest.fixture(scope="module")
def iv():
    return T.InnerVariation.at(LP, LP.reentrant_point(), 0.04)


@pytest.fixture(scope="module")
def lp_mesh():
    return build_mesh(LP, 4)


def test_cutoff_profile():
    c = T.CutoffSpec(np.zeros(3), 0.4)
    assert c.phi(np.zeros((1, 3)))[0] == 1.0
    assert c.phi(np.array([[0.19, 0, 0]]))[0] == 1.0
    assert c.phi(np.array([[0.4, 0, 0]]))[0] == 0.0
    # gradient bound is attained at the middle of the transition
    g = c.grad(np.array([[0.3, 0, 0]]))
    assert np.linalg.norm(g) == pytest.approx(c.grad_bound)
    s = np.linspace(0, 0.5, 2001)[:, None] * np.array([[0, 1, 0]])
    assert np.linalg.norm(c.grad(s), axis=1).max() <= c.grad_bound * (1 + 1e-12)
    with pytest.raises(ValueError):
        T.CutoffSpec(np.zeros(3), 0.0)


def test_cutoff_gradient_matches_finite_differences(rng):
    c = T.CutoffSpec(np.array([0.5, 0.5, 0.0]), 0.3)
    x = c.center + 0.3 * (rng.random((200, 3)) - 0.5)
    e = 1e-6 * np.eye(3)
    fd = np.stack([(c.phi(x + e[j]) - c.phi(x - e[j])) / 2e-6 for j in range(3)], axis=1)
    np.testing.assert_allclose(fd, c.grad(x), atol=1e-7)


def test_admissibility(iv):
    assert iv.h0 == pytest.approx(min(iv.delta, iv.cone.rho))
    with pytest.raises(InadmissibleShift):
        iv.with_h(1.01 * iv.h0 * iv.cone.axis)
    with pytest.raises(InadmissibleShift):
        iv.with_h(-0.5 * iv.h0 * iv.cone.axis)
    assert iv.shift_at(0.5).norm_h == pytest.approx(0.5 * iv.h0)


def test_jacobian_algebra(iv, rng):
    x = iv.x0 + iv.radius * (rng.random((300, 3)) - 0.5)
    F = T.dt_h(iv, x)
    np.testing.assert_allclose(np.linalg.det(F), T.det_dt_h(iv, x), rtol=1e-12)
    np.testing.assert_allclose(T.inv_dt_h(iv, x) @ F, np.broadcast_to(np.eye(3), F.shape), atol=1e-13)
    assert T.det_dt_h(iv, x).min() >= 0.5
    e = 1e-6 * np.eye(3)
    fd = np.stack([(T.t_h(iv, x + e[j]) - T.t_h(iv, x - e[j])) / 2e-6 for j in range(3)], axis=2)
    np.testing.assert_allclose(fd, F, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(0, 2**32 - 1))
def test_inverse_map_round_trip(fraction, seed):
    base = T.InnerVariation.at(CUBE, CUBE.reentrant_point())
    ivf = base.shift_at(fraction)
    rng = np.random.default_rng(seed)
    x = ivf.x0 + 1.2 * ivf.radius * (rng.random((100, 3)) - 0.5)
    np.testing.assert_allclose(T.s_h(ivf, T.t_h(ivf, x)), x, atol=1e-12)
    np.testing.assert_allclose(T.t_h(ivf, T.s_h(ivf, x)), x, atol=1e-12)


def test_inverse_jacobian(iv, rng):
    y = iv.x0 + iv.radius * (rng.random((100, 3)) - 0.5)
    e = 1e-6 * np.eye(3)
    fd = np.stack([(T.s_h(iv, y + e[j]) - T.s_h(iv, y - e[j])) / 2e-6 for j in range(3)], axis=2)
    np.testing.assert_allclose(fd, T.ds_h(iv, y), atol=1e-8)


def test_identity_outside_ball(iv):
    far = iv.x0 + np.array([[iv.radius * 1.01, 0, 0], [0, 0, -iv.radius * 1.5]])
    np.testing.assert_array_equal(T.t_h(iv, far), far)
    np.testing.assert_array_equal(T.s_h(iv, far), far)


def test_pullback_of_gradient_is_gradient_of_pullback(iv, lp_mesh, rng):
    U = H1VectorSpace(lp_mesh)
    u = FieldU(U, rng.standard_normal(U.ndof) * ~U.boundary_mask)
    P = gradient_to_edges(HCurlTensorSpace(lp_mesh), u)
    x = iv.x0 + 0.8 * iv.radius * (rng.random((200, 3)) - 0.5)
    x = x[LP.contains(x)]
    np.testing.assert_allclose(T.pullback_Th(iv, P).value(x), T.tau_h(iv, u).grad(x), atol=1e-10)


def test_piola_of_constant_has_zero_divergence(iv, rng):
    A = rng.standard_normal((3, 3))
    pm = T.piola_Ph(iv, lambda x: np.broadcast_to(A, (len(x), 3, 3)), lambda x: np.zeros((len(x), 3)))
    chk = T.div_identity_check(iv, pm.M, pm.div_M, LP, rng, n_points=300)
    assert chk["defect"] <= 1e-5
    with pytest.raises(ValueError):
        T.piola_Ph(iv, pm.M).div(iv.x0[None])


def test_curl_identity(iv, lp_mesh, rng):
    P = T.random_field_P(HCurlTensorSpace(lp_mesh), rng)
    chk = T.curl_identity_check(iv, P, rng, n_points=300)
    assert chk["n_points"] > 100
    assert chk["defect"] <= 1e-5


def test_adjointness_zero_shift_is_exact(lp_mesh, rng):
    iv0 = T.InnerVariation.at(LP, LP.reentrant_point())
    P = T.random_field_P(HCurlTensorSpace(lp_mesh), rng)
    M, _ = T.random_polynomial_tensor(rng)
    res = T.adjoint_check(iv0, P, M)
    assert res["passed"] and res["defect"] <= 1e-12


def test_random_polynomial_divergence(rng):
    M, div_M = T.random_polynomial_tensor(rng, 3)
    x = rng.random((20, 3))
    e = 1e-5 * np.eye(3)
    fd = sum((M(x + e[j]) - M(x - e[j]))[:, :, j] / 2e-5 for j in range(3))
    np.testing.assert_allclose(fd, div_M(x), atol=1e-7)


def test_diff_quotient_vanishes_without_shift(lp_mesh, rng):
    iv0 = T.InnerVariation.at(LP, LP.reentrant_point())
    u = T.random_field_U(H1VectorSpace(lp_mesh), rng)
    P = T.random_field_P(HCurlTensorSpace(lp_mesh), rng)
    assert T.diff_quotient(iv0, u, P) == 0.0


def test_diff_quotient_of_zero_fields(iv, lp_mesh):
    u, P = H1VectorSpace(lp_mesh).zero(), HCurlTensorSpace(lp_mesh).zero()
    assert T.diff_quotient(iv, u, P, n_side=32) == 0.0


def test_ball_samples_measure_ball(iv, lp_mesh):
    x, cells, _, w = T.ball_samples(iv, lp_mesh, n_side=64)
    # B_r centred on the re-entrant edge: three quarters of the ball lie in the domain
    assert len(x) * w == pytest.approx(0.75 * 4 / 3 * np.pi * iv.radius**3, rel=0.02)
    assert np.all(cells >= 0)


def test_dyadic_sweep_and_csv(iv, lp_mesh, rng, tmp_path):
    u = T.random_field_U(H1VectorSpace(lp_mesh), rng)
    P = T.random_field_P(HCurlTensorSpace(lp_mesh), rng)
    M, div_M = T.random_polynomial_tensor(rng)
    rows = T.dyadic_sweep(iv, u, P, M, div_M, ks=range(2, 4), n_side=32)
    assert [r["k"] for r in rows] == [2, 3]
    assert rows[1]["h"] == pytest.approx(rows[0]["h"] / 2)
    assert all(r["quotient"] > 0 and r["ratio"] >= 0 for r in rows)
    T.write_sweep_csv(tmp_path / "s.csv", rows)
    with open(tmp_path / "s.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["k", "h", "quotient", "ratio"] and len(got) == 3


@pytest.mark.parametrize("dom", [CUBE, LP])
def test_mapping_properties(dom):
    res = T.mapping_fuzz(dom, dom.reentrant_point(), 5, n=2000)
    assert res["passed"], res


def test_uniform_bound_closed_form(iv):
    res = T.uniform_bound(iv, 0)
    assert res["sampled"] <= res["closed_form"] * (1 + 1e-12)
    assert res["relative_gap"] <= 1e-3
