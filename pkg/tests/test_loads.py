import numpy as np

from micromorph.loads import PRESETS, X, constant_body_force, constant_moment, manufactured_loads, zero_loads


def test_presets_exist():
    assert {"zero", "body_force", "manufactured", "constant_moment"} <= set(PRESETS)


def test_constant_loads(rng):
    x = rng.random((7, 3))
    f = constant_body_force((0, 0, 1))
    np.testing.assert_allclose(f.f(x), np.tile([0, 0, 1.0], (7, 1)))
    assert zero_loads().is_zero
    M = np.arange(9.0).reshape(3, 3)
    m = constant_moment(M)
    np.testing.assert_allclose(m.M(x)[3], M)
    np.testing.assert_allclose(m.div_M(x), 0.0)
    np.testing.assert_allclose(m.scaled(2.0).M(x)[0], 2 * M)


def test_manufactured_loads_balance_equations(rng):
    """Independent check of the strong form with finite differences of the exact fields."""
    loads = manufactured_loads()
    ex = loads.exact
    x = 0.2 + 0.6 * rng.random((20, 3))
    h = 1e-4

    def d(fn, j):
        e = np.zeros(3)
        e[j] = h
        return (fn(x + e) - fn(x - e)) / (2 * h)

    def sym(a):
        return 0.5 * (a + np.swapaxes(a, -1, -2))

    stress = lambda y: sym(ex["Du"](y) - ex["P"](y))
    div_stress = sum(d(stress, j)[:, :, j] for j in range(3))
    np.testing.assert_allclose(-div_stress, loads.f(x), atol=1e-6)
    # M = Curl Curl P - sym(Du - P) + sym P, checked through Div M
    div_M = sum(d(loads.M, j)[:, :, j] for j in range(3))
    np.testing.assert_allclose(div_M, loads.div_M(x), atol=1e-6)


def test_manufactured_exact_fields_vanish_on_boundary(rng):
    ex = manufactured_loads().exact
    pts = rng.random((30, 3))
    pts[:, 0] = 0.0
    np.testing.assert_allclose(ex["u"](pts), 0.0, atol=1e-14)
    # tangential trace of each row of P on x = 0 is zero
    np.testing.assert_allclose(ex["P"](pts)[:, :, 1:], 0.0, atol=1e-14)


def test_custom_manufactured_pair():
    u = [X[0] * (1 - X[0]), 0, 0]
    loads = manufactured_loads(u_expr=u)
    x = np.array([[0.3, 0.5, 0.5]])
    np.testing.assert_allclose(loads.exact["u"](x), [[0.21, 0, 0]])
