import numpy as np
import pytest
import scipy.sparse as sp

from micromorph.energy import CoefficientField, DiscreteEnergy, LinearCoefficients, NonlinearParams
from micromorph.errors import NoConvergence, ZeroLoad
from micromorph.fespace import interpolate_P, interpolate_u
from micromorph.geometry import DomainSpec, build_mesh
from micromorph.loads import constant_body_force, constant_moment, manufactured_loads, zero_loads
from micromorph.solve import (apriori_check, el_residual, el_residual_fields, l2_errors, load_norms, load_vector,
                              pcg, solve_linear, solve_nonlinear, spaces)


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(DomainSpec.unit_cube(), 3)


def test_pcg_solves_spd_system(rng):
    A = sp.random(200, 200, density=0.05, random_state=1)
    A = (A @ A.T + sp.eye(200)).tocsr()
    b = rng.standard_normal(200)
    x, it = pcg(A, b, tol=1e-12)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)
    assert it > 0
    assert np.all(pcg(A, 0 * b)[0] == 0)


def test_load_vector_pairs_with_interpolants(mesh, rng):
    U, Pp = spaces(mesh)
    f, M = rng.standard_normal(3), rng.standard_normal((3, 3))
    loads = constant_body_force(f)
    b = load_vector(U, Pp, loads)
    v = interpolate_u(U, lambda x: np.tile([1.0, 2.0, 3.0], (len(x), 1)))
    assert b[:U.ndof] @ v.coeffs == pytest.approx(f @ [1.0, 2.0, 3.0])
    b = load_vector(U, Pp, constant_moment(M))
    Q = interpolate_P(Pp, lambda x: np.broadcast_to(np.eye(3), (len(x), 3, 3)))
    assert b[U.ndof:] @ Q.coeffs == pytest.approx(np.trace(M))


def test_zero_loads_give_zero_solution(mesh):
    u, P, rep = solve_linear(mesh, None, zero_loads())
    assert not np.any(u.coeffs) and not np.any(P.coeffs)
    u, P, rep = solve_nonlinear(mesh, NonlinearParams(1.5), zero_loads())
    assert not np.any(P.coeffs) and rep.iterations == 0
    assert rep.apriori_ratio is None


def test_linear_solve_residual_and_boundary(mesh):
    coeffs = LinearCoefficients(c_e=CoefficientField.isotropic(1.0, 0.5),
                                c_micro=CoefficientField.graded(np.eye(9), 0.5))
    loads = constant_body_force()
    u, P, rep = solve_linear(mesh, coeffs, loads, tol=1e-12)
    assert rep.residual <= 1e-12
    assert el_residual_fields(u, P, coeffs, loads, relative=True) <= 1e-11
    assert np.all(u.coeffs[u.space.boundary_mask] == 0)
    assert np.all(P.coeffs[P.space.boundary_mask] == 0)


def test_body_force_solution_has_gradient_microdistortion(mesh):
    """With identity tensors and M = 0 the minimizer satisfies P = Du / 2."""
    u, P, _ = solve_linear(mesh, None, constant_body_force(), tol=1e-13)
    cells = np.arange(mesh.n_cells)
    bary = np.full((mesh.n_cells, 4), 0.25)
    np.testing.assert_allclose(P.value_in(cells, bary), 0.5 * u.grad_in(cells), atol=1e-10)


@pytest.mark.parametrize("precond", ["jacobi", "linear"])
def test_nonlinear_solver_converges_monotonically(mesh, precond):
    params = NonlinearParams(1.5, 2 / 3)
    loads = manufactured_loads()
    u, P, rep = solve_nonlinear(mesh, params, loads, tol=1e-8, precond=precond)
    h = rep.energy_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert h[-1] < 0
    E = DiscreteEnergy(*spaces(mesh), params)
    b = load_vector(*spaces(mesh), loads) * E.free
    assert el_residual(E, E.pack(u, P), b, relative=True) <= 1e-6


def test_preconditioners_agree(mesh):
    params = NonlinearParams(1.5, 2 / 3)
    loads = manufactured_loads()
    a = solve_nonlinear(mesh, params, loads, tol=1e-9, precond="jacobi")
    b = solve_nonlinear(mesh, params, loads, tol=1e-9, precond="linear")
    E = DiscreteEnergy(*spaces(mesh), params)
    xa, xb = E.pack(a[0], a[1]), E.pack(b[0], b[1])
    assert np.sqrt(E.norm2(xa - xb) / E.norm2(xb)) <= 1e-6


def test_nonlinear_solver_errors(mesh):
    with pytest.raises(NoConvergence):
        solve_nonlinear(mesh, NonlinearParams(1.5), manufactured_loads(), max_iter=1, precond="jacobi")
    with pytest.raises(ValueError):
        solve_nonlinear(mesh, NonlinearParams(1.5), manufactured_loads(), precond="newton")


def test_apriori_ratio(mesh):
    loads = constant_body_force()
    u, P, rep = solve_linear(mesh, None, loads)
    assert rep.apriori_ratio == pytest.approx(apriori_check(u, P, loads))
    assert 0 < rep.apriori_ratio < 10
    assert load_norms(mesh, loads)["f"] == pytest.approx(1.0)
    with pytest.raises(ZeroLoad):
        apriori_check(u, P, zero_loads())


def test_l2_errors_vanish_for_exact_discrete_fields(mesh, rng):
    U, Pp = spaces(mesh)
    A = rng.standard_normal((3, 3))
    u = interpolate_u(U, lambda x: x @ A.T)
    P = interpolate_P(Pp, lambda x: np.broadcast_to(A, (len(x), 3, 3)))
    exact = {"u": lambda x: x @ A.T, "P": lambda x: np.broadcast_to(A, (len(x), 3, 3)),
             "CurlP": lambda x: np.zeros((len(x), 3, 3))}
    e = l2_errors(u, P, exact)
    assert max(e.values()) <= 1e-12


def test_report_serializes(mesh):
    _, _, rep = solve_nonlinear(mesh, NonlinearParams(1.5), manufactured_loads())
    d = rep.to_dict()
    assert "energy_history" not in d and "energy_history" in rep.to_dict(history=True)
