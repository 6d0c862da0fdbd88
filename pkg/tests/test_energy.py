import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from micromorph.energy import (CoefficientField, DiscreteEnergy, LinearCoefficients, NonlinearParams,
                               check_convexity_gap, check_w1_lipschitz, dw_nonlinear, gradient_bound_constant,
                               w_linear, w_nonlinear)
from micromorph.errors import NonPositiveCoefficient
from micromorph.geometry import DomainSpec, build_mesh
from micromorph.solve import spaces

mats = arrays(np.float64, (3, 3), elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(mats, mats, mats)
def test_densities_nonnegative(F, P, C):
    Q = (F, P, C)
    assert w_linear(np.zeros(3), Q, LinearCoefficients.identity()) >= 0
    assert w_nonlinear(Q, NonlinearParams(1.5, 2 / 3)) >= 0


@settings(max_examples=60, deadline=None)
@given(mats, mats)
def test_nonlinear_density_zero_curl_is_linear(F, P):
    Q = (F, P, np.zeros((3, 3)))
    assert w_nonlinear(Q, NonlinearParams(1.3, 5.0)) == pytest.approx(
        w_linear(np.zeros(3), Q, LinearCoefficients.identity()))
    g = dw_nonlinear(Q, NonlinearParams(1.3, 5.0))
    assert np.all(g[2] == 0)


def test_nonlinear_params_validation():
    with pytest.raises(ValueError):
        NonlinearParams(2.5)
    with pytest.raises(ValueError):
        NonlinearParams(1.0)
    with pytest.raises(ValueError):
        NonlinearParams(1.5, -1.0)
    assert NonlinearParams(1.25).alpha == pytest.approx(0.8)


def test_coefficients_must_be_positive():
    bad = LinearCoefficients(c_e=CoefficientField(-np.eye(9)))
    with pytest.raises(NonPositiveCoefficient):
        bad.validate(((0, 0, 0), (1, 1, 1)))
    # grading that turns negative inside the box
    graded = LinearCoefficients(c_micro=CoefficientField.graded(np.eye(9), -2.0))
    with pytest.raises(NonPositiveCoefficient):
        graded.validate(((0, 0, 0), (1, 1, 1)))
    LinearCoefficients(c_e=CoefficientField.isotropic(1.0, 0.5)).validate(((0, 0, 0), (1, 1, 1)))


def test_lipschitz_constant_bounds_samples():
    coeffs = LinearCoefficients(c_e=CoefficientField.graded(np.eye(9), 0.7, 1),
                                l_c=CoefficientField.graded(np.eye(9), 0.3, 2))
    observed = check_w1_lipschitz(coeffs, rng=0, n=2000)
    assert 0 < observed <= coeffs.lipschitz
    assert check_w1_lipschitz(LinearCoefficients.identity(), rng=0) == 0.0


def test_gradient_growth_bound(rng):
    coeffs = LinearCoefficients(c_e=CoefficientField.isotropic(2.0, 1.0))
    c2 = gradient_bound_constant(coeffs)
    from micromorph.energy import dw_linear

    Q = tuple(rng.standard_normal((500, 3, 3)) * 5 for _ in range(3))
    g = dw_linear(rng.random((500, 3)), Q, coeffs)
    gn = np.sqrt(sum(np.sum(a**2, axis=(1, 2)) for a in g))
    qn = np.sqrt(sum(np.sum(a**2, axis=(1, 2)) for a in Q))
    assert np.all(gn <= c2 * (1 + qn))
    params = NonlinearParams(1.5, 2 / 3)
    g = dw_nonlinear(Q, params)
    gn = np.sqrt(sum(np.sum(a**2, axis=(1, 2)) for a in g))
    assert np.all(gn <= gradient_bound_constant(params) * (1 + qn))


@pytest.fixture(scope="module")
def small():
    mesh = build_mesh(DomainSpec.unit_cube(), 2)
    return spaces(mesh)


@pytest.mark.parametrize("model", [LinearCoefficients.identity(), NonlinearParams(1.5, 2 / 3)])
def test_discrete_gradient_matches_finite_differences(small, model, rng):
    E = DiscreteEnergy(*small, model)
    x = rng.standard_normal(E.nu + E.npp) * E.free
    d = rng.standard_normal(len(x)) * E.free
    t = 1e-6
    fd = (E.value(x + t * d) - E.value(x - t * d)) / (2 * t)
    assert fd == pytest.approx(E.gradient(x) @ d, rel=1e-6)


@pytest.mark.parametrize("t", [1e-12, 1e-6, 0.3])
def test_energy_change_matches_difference(small, rng, t):
    E = DiscreteEnergy(*small, NonlinearParams(1.5, 2 / 3))
    x = rng.standard_normal(E.nu + E.npp) * E.free
    p = rng.standard_normal(len(x)) * E.free
    b = rng.standard_normal(len(x))
    direct = (E.value(x + t * p) - b @ (x + t * p)) - (E.value(x) - b @ x)
    change = E.change(x, p, t, b)
    assert change == pytest.approx(direct, rel=1e-6, abs=1e-12 * abs(E.value(x)))


def test_energy_change_from_zero_curl(small, rng):
    E = DiscreteEnergy(*small, NonlinearParams(1.5, 2 / 3))
    x = np.zeros(E.nu + E.npp)
    p = rng.standard_normal(len(x)) * E.free
    assert E.change(x, p, 0.5) == pytest.approx(E.value(0.5 * p), rel=1e-12)


def test_rounding_level_curls_are_zero(small, rng):
    from micromorph.fespace import FieldU, gradient_to_edges

    U, Pp = small
    E = DiscreteEnergy(U, Pp, NonlinearParams(1.5, 2 / 3))
    u = FieldU(U, rng.standard_normal(U.ndof) * ~U.boundary_mask)
    P = gradient_to_edges(Pp, u)
    x = E.pack(u, P)
    # the q-term gradient must not pick up cancellation noise from a curl-free P
    g = E.gradient(x)
    np.testing.assert_allclose(g, E.quadratic @ x, atol=1e-13 * np.abs(E.quadratic @ x).max())


def test_convexity_gap_positive(small, rng):
    E = DiscreteEnergy(*small, NonlinearParams(1.5, 2 / 3))
    n = E.nu + E.npp
    pairs = [(rng.standard_normal(n), rng.standard_normal(n)) for _ in range(5)]
    assert check_convexity_gap(E, None, pairs) > 0
