"""Lowest-order finite element spaces for the displacement and the microdistortion.

* ``H1VectorSpace``: continuous P1 vector fields, dof ``comp * n_vertices + vertex``.
* ``HCurlTensorSpace``: three rows of first-kind Whitney edge elements,
  dof ``row * n_edges + edge``.  The edge basis uses the global orientation
  (lower vertex id first): ``w_e = lam_a grad lam_b - lam_b grad lam_a`` with
  ``curl w_e = 2 grad lam_a x grad lam_b``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .errors import PointOutsideDomain
from .geometry import LOCAL_EDGES, Mesh, refine

FORM_KINDS = (
    "mass_u",
    "symgrad_symgrad",
    "coupling_symgradU_symP",
    "symP_symP",
    "mass_P",
    "curlcurl",
)

# flattened (row-major) index of the transpose
TRANSPOSE = np.array([0, 3, 6, 1, 4, 7, 2, 5, 8])


def sym9(a: np.ndarray) -> np.ndarray:
    """Symmetric part of flattened 3x3 matrices along the last axis."""
    return 0.5 * (a + a[..., TRANSPOSE])


# ----------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference tetrahedron; weights sum to its volume 1/6."""

    bary: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def points(self) -> np.ndarray:
        return self.bary[:, 1:]


@lru_cache(maxsize=None)
def quadrature(order: int) -> QuadratureRule:
    """Collapsed (conical product) Gauss-Jacobi rule exact for degree ``order``."""
    n = max(1, (order + 2) // 2)
    a, wa = _gauss_jacobi01(n, 0)
    b, wb = _gauss_jacobi01(n, 1)
    c, wc = _gauss_jacobi01(n, 2)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = (wa[:, None, None] * wb[None, :, None] * wc[None, None, :]).ravel()
    z = C.ravel()
    y = B.ravel() * (1 - z)
    x = A.ravel() * (1 - B.ravel()) * (1 - z)
    bary = np.stack([1 - x - y - z, x, y, z], axis=1)
    return QuadratureRule(bary, W, order)


def _gauss_jacobi01(n, alpha):
    t, w = roots_jacobi(n, alpha, 0)
    return (1 + t) / 2, w / 2 ** (alpha + 1)


@lru_cache(maxsize=None)
def composite(order: int, levels: int = 0) -> QuadratureRule:
    """Rule ``order`` applied on each child of ``levels`` red refinements."""
    base = quadrature(order)
    if levels == 0:
        return base
    ref = Mesh.from_tets(np.vstack([np.zeros(3), np.eye(3)]), [[0, 1, 2, 3]])
    for _ in range(levels):
        ref = refine(ref)
    v = ref.vertices[ref.tets]  # (nsub, 4, 3)
    x = np.einsum("qk,skj->sqj", base.bary, v).reshape(-1, 3)
    w = (np.abs(ref.volumes)[:, None] * 6.0 * base.weights[None, :]).ravel()
    bary = np.concatenate([1 - x.sum(axis=1, keepdims=True), x], axis=1)
    return QuadratureRule(bary, w, order)


def rule_points(mesh: Mesh, order: int = 4, levels: int = 0, cells=None):
    """Physical quadrature data: ``(cells, bary, x, weights)`` flattened over cells."""
    rule = composite(order, levels)
    if cells is None:
        cells = np.arange(mesh.n_cells)
    cells = np.asarray(cells)
    nq = len(rule.weights)
    cid = np.repeat(cells, nq)
    bary = np.tile(rule.bary, (len(cells), 1))
    v = mesh.vertices[mesh.tets[cells]]
    x = np.einsum("qk,ckj->cqj", rule.bary, v).reshape(-1, 3)
    w = (6.0 * mesh.volumes[cells][:, None] * rule.weights[None, :]).ravel()
    return cid, bary, x, w


# --------------------------------------------------------------------- spaces


@dataclass(frozen=True, eq=False)
class H1VectorSpace:
    mesh: Mesh

    @property
    def ndof(self) -> int:
        return 3 * self.mesh.n_vertices

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return np.tile(self.mesh.boundary_vertices, 3)

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        """(nc, 12) global dofs, local index ``comp * 4 + vertex``."""
        nv = self.mesh.n_vertices
        t = self.mesh.tets
        return np.concatenate([t + c * nv for c in range(3)], axis=1)

    def zero(self) -> "FieldU":
        return FieldU(self, np.zeros(self.ndof))


@dataclass(frozen=True, eq=False)
class HCurlTensorSpace:
    mesh: Mesh

    @property
    def ndof(self) -> int:
        return 3 * self.mesh.n_edges

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return np.tile(self.mesh.boundary_edges, 3)

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        """(nc, 18) global dofs, local index ``row * 6 + local_edge``."""
        ne = self.mesh.n_edges
        ce = self.mesh.cell_edges
        return np.concatenate([ce + r * ne for r in range(3)], axis=1)

    @cached_property
    def cell_curls(self) -> np.ndarray:
        """(nc, 6, 3) curls of the signed local edge functions."""
        g = self.mesh.grad_lambda
        c = 2.0 * np.cross(g[:, LOCAL_EDGES[:, 0]], g[:, LOCAL_EDGES[:, 1]])
        return c * self.mesh.cell_edge_signs[:, :, None]

    def whitney(self, cells, bary) -> np.ndarray:
        """(N, 6, 3) signed local edge functions at points given by cell and bary."""
        g = self.mesh.grad_lambda[cells]
        a, b = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
        w = bary[:, a, None] * g[:, b] - bary[:, b, None] * g[:, a]
        return w * self.mesh.cell_edge_signs[cells][:, :, None]

    def zero(self) -> "FieldP":
        return FieldP(self, np.zeros(self.ndof))


@dataclass(frozen=True, eq=False)
class H1ScalarSpace:
    """Scalar P1 space; only used by the Helmholtz decomposition."""

    mesh: Mesh

    @property
    def ndof(self) -> int:
        return self.mesh.n_vertices

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.mesh.boundary_vertices

    def stiffness(self) -> sp.csr_matrix:
        m = self.mesh
        g = m.grad_lambda
        loc = np.einsum("cik,cjk->cij", g, g) * m.volumes[:, None, None]
        return _scatter(loc, m.tets, m.tets, m.n_vertices, m.n_vertices)

    def gradient_rhs(self, p, order: int = 4) -> np.ndarray:
        """Load vector ``<p, grad w_i>`` for a callable vector field ``p``."""
        m = self.mesh
        cid, bary, x, w = rule_points(m, order)
        pv = np.asarray(p(x), dtype=float).reshape(-1, 3)
        g = m.grad_lambda[cid]
        vals = np.einsum("nk,nik->ni", pv * w[:, None], g)
        return np.bincount(m.tets[cid].ravel(), vals.ravel(), minlength=m.n_vertices)

    def gradient(self, coeffs, cells) -> np.ndarray:
        g = self.mesh.grad_lambda[cells]
        return np.einsum("ni,nik->nk", coeffs[self.mesh.tets[cells]], g)


# ---------------------------------------------------------------------- fields


def _locate(mesh, x, outside):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cells, bary = mesh.locate(x)
    miss = cells < 0
    if outside == "raise" and np.any(miss):
        raise PointOutsideDomain(f"{int(miss.sum())} point(s) outside the mesh, e.g. {x[miss][0]}")
    return cells, bary, miss


@dataclass(frozen=True, eq=False)
class FieldU:
    space: H1VectorSpace
    coeffs: np.ndarray

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    def _nodal(self, cells) -> np.ndarray:
        """(N, 3, 4) nodal values per component."""
        nv = self.mesh.n_vertices
        return self.coeffs.reshape(3, nv)[:, self.mesh.tets[cells]].transpose(1, 0, 2)

    def value_in(self, cells, bary) -> np.ndarray:
        return np.einsum("nck,nk->nc", self._nodal(cells), bary)

    def grad_in(self, cells, bary=None) -> np.ndarray:
        return np.einsum("nck,nkj->ncj", self._nodal(cells), self.mesh.grad_lambda[cells])

    def value(self, x, outside: str = "raise") -> np.ndarray:
        cells, bary, miss = _locate(self.mesh, x, outside)
        out = self.value_in(np.maximum(cells, 0), bary)
        out[miss] = 0.0
        return out

    def grad(self, x, outside: str = "raise") -> np.ndarray:
        cells, bary, miss = _locate(self.mesh, x, outside)
        out = self.grad_in(np.maximum(cells, 0))
        out[miss] = 0.0
        return out

    def __add__(self, other):
        return FieldU(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return FieldU(self.space, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return FieldU(self.space, s * self.coeffs)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class FieldP:
    space: HCurlTensorSpace
    coeffs: np.ndarray

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    def _local(self, cells) -> np.ndarray:
        """(N, 3, 6) coefficients per row and local edge (unsigned)."""
        ne = self.mesh.n_edges
        return self.coeffs.reshape(3, ne)[:, self.mesh.cell_edges[cells]].transpose(1, 0, 2)

    @cached_property
    def vertex_tensors(self) -> np.ndarray:
        """(nc, 4, 3, 3) tensors V with ``P = sum_i lambda_i V_i`` on each cell."""
        m = self.mesh
        g = m.grad_lambda
        c = self._local(np.arange(m.n_cells)) * m.cell_edge_signs[:, None, :]  # (nc, 3, 6)
        V = np.zeros((m.n_cells, 4, 3, 3))
        for k, (a, b) in enumerate(LOCAL_EDGES):
            V[:, a] += c[:, :, k, None] * g[:, b, None, :]
            V[:, b] -= c[:, :, k, None] * g[:, a, None, :]
        return V

    def value_in(self, cells, bary) -> np.ndarray:
        return np.einsum("ni,nirj->nrj", bary, self.vertex_tensors[cells])

    def curl_in(self, cells, bary=None) -> np.ndarray:
        return np.einsum("nrk,nkj->nrj", self._local(cells), self.space.cell_curls[cells])

    def value(self, x, outside: str = "raise") -> np.ndarray:
        cells, bary, miss = _locate(self.mesh, x, outside)
        out = self.value_in(np.maximum(cells, 0), bary)
        out[miss] = 0.0
        return out

    def curl(self, x, outside: str = "raise") -> np.ndarray:
        cells, bary, miss = _locate(self.mesh, x, outside)
        out = self.curl_in(np.maximum(cells, 0))
        out[miss] = 0.0
        return out

    def row(self, i: int):
        """Row ``i`` as a callable vector field."""
        return lambda x: self.value(x)[:, i]

    def __add__(self, other):
        return FieldP(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return FieldP(self.space, self.coeffs - other.coeffs)

    def __mul__(self, s):
        return FieldP(self.space, s * self.coeffs)

    __rmul__ = __mul__


def evaluate_u(field: FieldU, points) -> np.ndarray:
    return field.value(points)


def evaluate_Du(field: FieldU, points) -> np.ndarray:
    return field.grad(points)


def evaluate_P(field: FieldP, points) -> np.ndarray:
    return field.value(points)


def evaluate_CurlP(field: FieldP, points) -> np.ndarray:
    return field.curl(points)


# --------------------------------------------------------------- interpolation


def interpolate_u(space: H1VectorSpace, f) -> FieldU:
    vals = np.asarray(f(space.mesh.vertices), dtype=float).reshape(-1, 3)
    return FieldU(space, vals.T.ravel().copy())


_EDGE_S, _EDGE_W = np.polynomial.legendre.leggauss(6)
_EDGE_S = (_EDGE_S + 1) / 2
_EDGE_W = _EDGE_W / 2


def interpolate_P(space: HCurlTensorSpace, G) -> FieldP:
    """Edge moments ``int_e G_row . t ds`` (6-point Gauss per edge)."""
    m = space.mesh
    xa = m.vertices[m.edges[:, 0]]
    t = m.vertices[m.edges[:, 1]] - xa
    pts = xa[:, None, :] + _EDGE_S[None, :, None] * t[:, None, :]
    vals = np.asarray(G(pts.reshape(-1, 3)), dtype=float).reshape(m.n_edges, len(_EDGE_S), 3, 3)
    dof = np.einsum("g,egrj,ej->re", _EDGE_W, vals, t)
    return FieldP(space, dof.ravel().copy())


def gradient_to_edges(space: HCurlTensorSpace, u: FieldU) -> FieldP:
    """Exact edge interpolant of ``Du`` for a discrete ``u`` (differences along edges)."""
    m = space.mesh
    nodal = u.coeffs.reshape(3, m.n_vertices)
    dof = nodal[:, m.edges[:, 1]] - nodal[:, m.edges[:, 0]]
    return FieldP(space, dof.ravel().copy())


# -------------------------------------------------------------------- assembly


def _scatter(local, rows, cols, nr, nc):
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    return sp.coo_matrix((local.ravel(), (r, c)), shape=(nr, nc)).tocsr()


def _coef_at(coef, x, shape):
    """Coefficient (9, 9) or its values (ncell, nq, 9, 9) at points ``x``."""
    if coef is None:
        return None
    if getattr(coef, "is_constant", False):
        return np.asarray(coef(None))
    return np.asarray(coef(x)).reshape(*shape, 9, 9)


def _contract(A, C, B, w):
    """sum_q w[c,q] A[c,q,a,:] . C . B[c,q,b,:] with C constant or per point."""
    if C is None:
        return np.einsum("cq,cqai,cqbi->cab", w, A, B, optimize=True)
    if C.ndim == 2:
        return np.einsum("cq,cqai,ij,cqbj->cab", w, A, C, B, optimize=True)
    return np.einsum("cq,cqai,cqij,cqbj->cab", w, A, C, B, optimize=True)


def assemble(form: str, coeffs=None, u_space: H1VectorSpace | None = None,
             p_space: HCurlTensorSpace | None = None, order: int | None = None,
             chunk: int = 2048) -> sp.csr_matrix:
    """Assemble one bilinear form.

    ``coeffs`` is a ``LinearCoefficients``-like object with callables ``c_e``,
    ``c_micro`` and ``l_c`` mapping points to flattened 9x9 tensors; ``None``
    means identity tensors.
    """
    if form not in FORM_KINDS:
        raise ValueError(f"unknown form {form!r}")
    mesh = (u_space or p_space).mesh
    if coeffs is not None:
        coeffs.validate(mesh)
    affine = coeffs is not None and not coeffs.is_constant
    if order is None:
        order = 4 if affine else 2
    rule = quadrature(order)
    nq = len(rule.weights)
    nv, ne = mesh.n_vertices, mesh.n_edges
    blocks = []
    for s in range(0, mesh.n_cells, chunk):
        cells = np.arange(s, min(s + chunk, mesh.n_cells))
        nc = len(cells)
        cid = np.repeat(cells, nq)
        bary = np.tile(rule.bary, (nc, 1))
        x = np.einsum("qk,ckj->cqj", rule.bary, mesh.vertices[mesh.tets[cells]]).reshape(-1, 3)
        w = 6.0 * mesh.volumes[cells][:, None] * rule.weights[None, :]
        shape = (nc, nq)

        def du_feat():
            g = mesh.grad_lambda[cells]  # (nc, 4, 3)
            F = np.zeros((nc, 12, 3, 3))
            for c in range(3):
                F[:, c * 4:(c + 1) * 4, c, :] = g
            return np.broadcast_to(F.reshape(nc, 1, 12, 9), (nc, nq, 12, 9))

        def p_feat():
            W = p_space.whitney(cid, bary).reshape(nc, nq, 6, 3)
            F = np.zeros((nc, nq, 18, 3, 3))
            for r in range(3):
                F[:, :, r * 6:(r + 1) * 6, r, :] = W
            return F.reshape(nc, nq, 18, 9)

        def curl_feat():
            Cc = p_space.cell_curls[cells]
            F = np.zeros((nc, 18, 3, 3))
            for r in range(3):
                F[:, r * 6:(r + 1) * 6, r, :] = Cc
            return np.broadcast_to(F.reshape(nc, 1, 18, 9), (nc, nq, 18, 9))

        if form == "mass_u":
            lam = np.broadcast_to(rule.bary, (nc, nq, 4))
            loc1 = np.einsum("cq,cqa,cqb->cab", w, lam, lam)
            loc = np.zeros((nc, 12, 12))
            for c in range(3):
                loc[:, c * 4:(c + 1) * 4, c * 4:(c + 1) * 4] = loc1
            rows = cols = u_space.cell_dofs[cells]
        elif form == "symgrad_symgrad":
            S = sym9(du_feat())
            loc = _contract(S, _coef_at(coeffs and coeffs.c_e, x, shape), S, w)
            rows = cols = u_space.cell_dofs[cells]
        elif form == "coupling_symgradU_symP":
            loc = _contract(sym9(du_feat()), _coef_at(coeffs and coeffs.c_e, x, shape),
                            sym9(p_feat()), w)
            rows, cols = u_space.cell_dofs[cells], p_space.cell_dofs[cells]
        elif form == "symP_symP":
            S = sym9(p_feat())
            if coeffs is None:
                C = 2.0 * np.eye(9)
            else:
                C = _coef_at(coeffs.c_e, x, shape) + _coef_at(coeffs.c_micro, x, shape)
            loc = _contract(S, C, S, w)
            rows = cols = p_space.cell_dofs[cells]
        elif form == "mass_P":
            Pf = p_feat()
            loc = _contract(Pf, None, Pf, w)
            rows = cols = p_space.cell_dofs[cells]
        else:  # curlcurl
            Cf = curl_feat()
            loc = _contract(Cf, _coef_at(coeffs and coeffs.l_c, x, shape), Cf, w)
            rows = cols = p_space.cell_dofs[cells]
        blocks.append((loc, rows, cols))
    nr = 3 * nv if form in ("mass_u", "symgrad_symgrad", "coupling_symgradU_symP") else 3 * ne
    ncol = 3 * nv if form in ("mass_u", "symgrad_symgrad") else 3 * ne
    loc = np.concatenate([b[0] for b in blocks])
    rows = np.concatenate([b[1] for b in blocks])
    cols = np.concatenate([b[2] for b in blocks])
    return _scatter(loc, rows, cols, nr, ncol)


def stiffness_u(u_space: H1VectorSpace) -> sp.csr_matrix:
    """Full-gradient form ``int Du : Dv`` (for H1 norms)."""
    m = u_space.mesh
    g = m.grad_lambda
    loc1 = np.einsum("cik,cjk->cij", g, g) * m.volumes[:, None, None]
    loc = np.zeros((m.n_cells, 12, 12))
    for c in range(3):
        loc[:, c * 4:(c + 1) * 4, c * 4:(c + 1) * 4] = loc1
    return _scatter(loc, u_space.cell_dofs, u_space.cell_dofs, u_space.ndof, u_space.ndof)


def apply_essential_bc(matrix, rhs, mask):
    """Replace masked rows and columns by the identity and zero the masked rhs."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return sp.csr_matrix(matrix), np.array(rhs, dtype=float)
    free = sp.diags((~mask).astype(float))
    A = (free @ matrix @ free + sp.diags(mask.astype(float))).tocsr()
    A.eliminate_zeros()
    b = np.array(rhs, dtype=float)
    b[mask] = 0.0
    return A, b


# ----------------------------------------------------------------------- norms


def norms(field, order: int = 4) -> dict:
    """L2 and H1 / H(Curl) norms by direct quadrature of the field."""
    mesh = field.mesh
    cid, bary, _, w = rule_points(mesh, order)
    val = field.value_in(cid, bary).reshape(len(w), -1)
    l2 = float(np.sqrt(np.sum(w * np.sum(val**2, axis=1))))
    if isinstance(field, FieldU):
        d = field.grad_in(cid).reshape(len(w), -1)
        semi = float(np.sqrt(np.sum(w * np.sum(d**2, axis=1))))
        return {"L2": l2, "H1_semi": semi, "H1": float(np.hypot(l2, semi))}
    c = field.curl_in(cid).reshape(len(w), -1)
    curl = float(np.sqrt(np.sum(w * np.sum(c**2, axis=1))))
    return {"L2": l2, "Curl": curl, "HCurl": float(np.hypot(l2, curl))}


def write_matrix_market(path, matrix) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix))
