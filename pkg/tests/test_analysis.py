import json

import numpy as np
import pytest

from micromorph import analysis as A
from micromorph.errors import EmptyInteriorRegion
from micromorph.fespace import FieldU, H1VectorSpace, HCurlTensorSpace, gradient_to_edges, interpolate_u
from micromorph.geometry import DomainSpec, build_mesh
from micromorph.loads import constant_body_force, zero_loads

CUBE = DomainSpec.unit_cube()


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(CUBE, 3)


def test_helmholtz_of_gradient_has_no_solenoidal_part(mesh, rng):
    nodal = rng.standard_normal(mesh.n_vertices) * ~mesh.boundary_vertices
    coeffs = nodal[mesh.edges[:, 1]] - nodal[mesh.edges[:, 0]]
    split = A.helmholtz_decompose(mesh, coeffs, tol=1e-13)
    np.testing.assert_allclose(split.v, nodal, atol=1e-10)
    assert split.norms["q"] <= 1e-18 * split.norms["p"]


@pytest.mark.parametrize("kind", ["edge", "callable"])
def test_helmholtz_pythagoras(mesh, rng, kind):
    a = rng.standard_normal((3, 3))
    p = rng.standard_normal(mesh.n_edges) if kind == "edge" else (lambda x: np.sin(x @ a))
    s = A.helmholtz_decompose(mesh, p, tol=1e-12)
    assert s.cross <= 1e-9
    assert s.norms["Dv"] + s.norms["q"] == pytest.approx(s.norms["p"], rel=1e-9)
    assert s.div_residual <= 1e-9
    x = np.array([[0.3, 0.6, 0.2]])
    c, _ = mesh.locate(x)
    np.testing.assert_allclose(s.q(x) + s.grad_v(c), s.p(x), atol=1e-14)


def test_korn_eigen_matches_dense_solver():
    import scipy.linalg

    mesh = build_mesh(CUBE, 2)
    space = HCurlTensorSpace(mesh)
    Am, Bm, _ = A.korn_matrices(space)
    lam = scipy.linalg.eigh(Am.toarray(), Bm.toarray(), eigvals_only=True)[0]
    res = A.korn_eigen(mesh, tol=1e-10)
    assert res.lam_min == pytest.approx(lam, rel=1e-9)
    assert res.c_tilde == pytest.approx(1 / lam, rel=1e-9)
    assert A.rayleigh_ratio(space, res.vector) == pytest.approx(res.c_tilde, rel=1e-8)


def test_korn_probes_below_constant(rng):
    mesh = build_mesh(CUBE, 2)
    space = HCurlTensorSpace(mesh)
    mats = A.korn_matrices(space)
    c = A.korn_constant(mesh)
    U = H1VectorSpace(mesh)
    for _ in range(5):
        x = rng.standard_normal(space.ndof) * ~space.boundary_mask
        assert A.rayleigh_ratio(space, x, mats) <= c + 1e-8
        u = FieldU(U, rng.standard_normal(U.ndof) * ~U.boundary_mask)
        assert A.rayleigh_ratio(space, gradient_to_edges(space, u).coeffs, mats) <= c + 1e-8


def test_sample_grid_volume():
    pts, vol = A.sample_grid(DomainSpec.l_prism(), 16, rng=3)
    assert len(pts) * vol == pytest.approx(3.0)
    mid, _ = A.sample_grid(CUBE, 4)
    assert np.allclose(np.sort(np.unique(mid[:, 0])), [0.125, 0.375, 0.625, 0.875])


def test_besov_quotient_of_linear_function():
    # |f(x+h) - f(x)|^2 = |a.h|^2 everywhere
    a = np.array([1.0, 2.0, 0.0])
    h = np.array([0.01, 0.0, 0.0])
    q = A.besov_quotient(lambda x: x @ a, 0, 0.5, h, 0.05, grid=32)
    # the interior region is resolved to the grid spacing
    assert q == pytest.approx(0.01**2 / 0.01 * 0.9**3, rel=0.01)


def test_besov_quotient_input_checks():
    f = lambda x: x[:, 0]
    with pytest.raises(ValueError):
        A.besov_quotient(f, 0, 0.5, [0.1, 0, 0], 0.05)
    with pytest.raises(ValueError):
        A.besov_quotient(f, 2, 0.5, [0.01, 0, 0], 0.05)
    with pytest.raises(ValueError):
        A.besov_quotient(f, 0, 1.5, [0.01, 0, 0], 0.05)
    with pytest.raises(EmptyInteriorRegion):
        A.besov_quotient(f, 0, 0.5, [0.3, 0, 0], 0.6)


def test_fit_slope_recovers_line():
    x = np.log(2.0 ** -np.arange(2, 7))
    slope, err, half = A.fit_slope(x, 1.3 * x + 0.2)
    assert slope == pytest.approx(1.3)
    assert err == pytest.approx(0.0, abs=1e-12) and half == pytest.approx(0.0, abs=1e-11)


def test_regularity_index_calibration():
    step = A.regularity_index(lambda x: (x[:, 0] > 0.5).astype(float), 0, CUBE, rng=0)
    assert step.s_est == pytest.approx(0.5, abs=0.05)
    assert step.band[0] <= step.s_raw <= step.band[1]
    smooth = A.regularity_index(lambda x: np.cos(x @ [1.0, 0.5, -0.3]), 0, CUBE, rng=0)
    assert smooth.s_est == 1.0 and smooth.s_raw > 0.95
    d = smooth.to_dict()
    assert "rows" not in d and d["s_est"] == 1.0


def test_regularity_index_of_p1_gradient():
    """The gradient of a P1 interpolant jumps across faces: fractional index 1/2 above m = 1."""
    mesh = build_mesh(CUBE, 4)
    u = interpolate_u(H1VectorSpace(mesh), lambda x: np.stack([np.sin(3 * x[:, 0] + x[:, 1])] * 3, 1))
    rep = A.regularity_index(lambda x: u.grad_in(mesh.locate(x)[0]), 1, CUBE, rng=0, h_bar=0.125, grid=32)
    assert rep.s_raw - 1 == pytest.approx(0.5, abs=0.1)


def test_regularity_index_zero_field(tmp_path):
    rep = A.regularity_index(lambda x: np.zeros(len(x)), 0, CUBE, grid=16)
    assert rep.s_est is None and rep.status.startswith("undefined")
    tiny = A.regularity_index(lambda x: 1e-12 * x[:, 0], 0, CUBE, grid=16, scale=1.0)
    assert tiny.s_est is None
    rep = A.regularity_index(lambda x: x[:, 0] > 0.5, 0, CUBE, grid=16)
    rep.write_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "k,h,direction,integral,quotient"


def test_regularity_experiment_small_level():
    rep = A.regularity_experiment(DomainSpec.l_prism(), None, constant_body_force(), 2, grid=16, ks=range(2, 5),
                                  n_side=32)
    assert set(rep.verdicts) == {"s_u", "s_P", "s_CurlP", "sweep_bounded"}
    # identity tensors with M = 0 give P = Du / 2, so Curl P vanishes
    assert rep.verdicts["s_CurlP"] is None
    assert rep.probes["P"].s_raw == pytest.approx(rep.probes["u"].s_raw - 1, abs=1e-9)
    data = json.loads(rep.to_json())
    assert data["level"] == 2 and "passed" in data


def test_regularity_experiment_zero_loads():
    rep = A.regularity_experiment(CUBE, None, zero_loads(), 2, grid=8, ks=range(2, 4), n_side=16)
    assert all(v is None for k, v in rep.verdicts.items() if k != "sweep_bounded")
