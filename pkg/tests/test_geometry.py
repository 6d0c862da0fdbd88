import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from micromorph.errors import NotOnBoundary
from micromorph.geometry import (DomainSpec, Mesh, build_mesh, cone_test, exterior_cone, point_in_domain, refine,
                                 refine_times)


@pytest.mark.parametrize("dom, vol", [(DomainSpec.unit_cube(), 1.0), (DomainSpec.l_prism(), 3.0),
                                      (DomainSpec.box(2.0, 1.0, 0.5), 1.0)])
def test_mesh_volume_and_orientation(dom, vol):
    mesh = build_mesh(dom, 2)
    assert np.all(mesh.volumes > 0)
    assert mesh.volumes.sum() == pytest.approx(vol)
    assert dom.volume == pytest.approx(vol)
    assert mesh.boundary_area() == pytest.approx(dom.boundary_area)


def test_cube_counts():
    mesh = build_mesh(DomainSpec.unit_cube(), 3)
    assert mesh.n_cells == 6 * 27
    assert mesh.n_vertices == 64
    # Euler characteristic of a ball: V - E + F - T = 1
    faces = {tuple(sorted(t[list(f)])) for t in mesh.tets for f in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))}
    assert mesh.n_vertices - mesh.n_edges + len(faces) - mesh.n_cells == 1


def test_edges_are_globally_oriented():
    mesh = build_mesh(DomainSpec.l_prism(), 2)
    assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])
    local = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
    a = mesh.tets[:, local[:, 0]]
    b = mesh.tets[:, local[:, 1]]
    ends = mesh.edges[mesh.cell_edges]
    sign = np.where(a < b, 1, -1)
    assert np.array_equal(sign, mesh.cell_edge_signs)
    assert np.array_equal(np.minimum(a, b), ends[..., 0])


def test_refine_nests():
    mesh = build_mesh(DomainSpec.unit_cube(), 2)
    fine = refine(mesh)
    assert fine.n_cells == 8 * mesh.n_cells
    assert fine.volumes.sum() == pytest.approx(1.0)
    assert fine.h_max == pytest.approx(mesh.h_max / 2)
    assert refine_times(mesh, 2).n_cells == 64 * mesh.n_cells
    # every fine centroid lies in some coarse cell
    cells, _ = mesh.locate(fine.centroids())
    assert np.all(cells >= 0)


def test_locate_inside_and_outside(rng):
    dom = DomainSpec.l_prism()
    mesh = build_mesh(dom, 3)
    pts = rng.random((2000, 3)) * np.array([2.0, 2.0, 1.0])
    cells, bary = mesh.locate(pts)
    inside = dom.contains(pts)
    assert np.array_equal(cells >= 0, inside)
    ok = cells >= 0
    rebuilt = np.einsum("nk,nkj->nj", bary[ok], mesh.vertices[mesh.tets[cells[ok]]])
    np.testing.assert_allclose(rebuilt, pts[ok], atol=1e-12)
    np.testing.assert_allclose(bary[ok].sum(axis=1), 1.0)


def test_locate_tie_goes_to_lowest_cell():
    mesh = build_mesh(DomainSpec.unit_cube(), 1)
    shared = mesh.vertices[mesh.tets[0, 0]]
    cells, _ = mesh.locate(shared[None])
    candidates = np.flatnonzero(np.any(mesh.tets == mesh.tets[0, 0], axis=1))
    assert cells[0] == candidates.min()


def test_contains_is_open():
    cube = DomainSpec.unit_cube()
    assert point_in_domain(cube, [0.5, 0.5, 0.5])
    assert not point_in_domain(cube, [0.5, 0.5, 0.0])
    lp = DomainSpec.l_prism()
    assert not point_in_domain(lp, [1.5, 1.5, 0.5])
    assert point_in_domain(lp, [0.5, 1.5, 0.5])


def test_domain_rejects_bad_input():
    with pytest.raises(ValueError):
        DomainSpec("sphere")
    with pytest.raises(ValueError):
        DomainSpec.box(1.0, -1.0, 1.0)


def test_exterior_cone_at_reentrant_edge():
    lp = DomainSpec.l_prism()
    cone = exterior_cone(lp, lp.reentrant_point())
    np.testing.assert_allclose(cone.axis, np.array([1, 1, 0]) / np.sqrt(2))
    assert cone.half_angle == pytest.approx(np.pi / 8)
    assert cone.radius > 0


def test_exterior_cone_requires_boundary_point():
    with pytest.raises(NotOnBoundary):
        exterior_cone(DomainSpec.unit_cube(), [0.5, 0.5, 0.5])


@pytest.mark.parametrize("dom", [DomainSpec.unit_cube(), DomainSpec.l_prism()])
def test_cone_points_leave_domain(dom):
    cone = exterior_cone(dom, dom.reentrant_point())
    assert cone_test(dom, cone, np.random.default_rng(0), n=2000) == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.3, 0.7), st.floats(0.3, 0.7), st.integers(0, 2**32 - 1))
def test_cone_directions_sampled_inside_cone(a, b, seed):
    cone = exterior_cone(DomainSpec.unit_cube(), [a, b, 0.0])
    h = cone.sample(np.random.default_rng(seed), 50)
    assert np.all(cone.contains_direction(h))
    assert np.all(np.linalg.norm(h, axis=1) <= cone.rho)


def test_from_tets_reorients():
    v = np.vstack([np.zeros(3), np.eye(3)])
    m = Mesh.from_tets(v, [[0, 2, 1, 3]])
    assert m.volumes[0] == pytest.approx(1 / 6)
