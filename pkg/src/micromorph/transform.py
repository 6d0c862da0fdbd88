"""Inner variations ``T_h(x) = x + phi(x) h`` near a boundary point and the
transformations they induce on displacement and tensor fields.

* ``tau_h``: ``u -> u~ o T_h`` (extension of ``u`` by zero)
* ``pullback_Th``: ``P -> P~(T_h) DT_h`` (covariant, commutes with Curl)
* ``piola_Ph``: ``M -> det DS_h M(S_h) DS_h^{-T}`` (contravariant, commutes with Div)

with ``S_h`` the inverse of ``T_h``.  Pullbacks are evaluators, never
re-interpolated, so that identity checks are not polluted by interpolation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InadmissibleShift, NoConvergence
from .fespace import FieldP, FieldU, HCurlTensorSpace, quadrature, rule_points
from .geometry import ConeSpec, DomainSpec, Mesh, exterior_cone, refine

# ----------------------------------------------------------------- cutoff


@dataclass(frozen=True)
class CutoffSpec:
    """Radial C^2 bump: 1 on B_{r/2}(x0), 0 outside B_r(x0), quintic in between."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("cutoff radius must be positive")

    @property
    def grad_bound(self) -> float:
        # max of 30 s^2 (1-s)^2 * (2/r) at s = 1/2
        return 3.75 / self.radius

    def _s(self, x):
        d = np.asarray(x, dtype=float) - self.center
        rho = np.sqrt(np.einsum("...i,...i->...", d, d))
        s = np.clip((rho - 0.5 * self.radius) / (0.5 * self.radius), 0.0, 1.0)
        return d, rho, s

    def phi(self, x) -> np.ndarray:
        _, _, s = self._s(x)
        return 1.0 - s**3 * (10 - 15 * s + 6 * s * s)

    def grad(self, x) -> np.ndarray:
        d, rho, s = self._s(x)
        dphi = -30 * s * s * (1 - s) ** 2 * (2.0 / self.radius)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(rho[..., None] > 0, d / rho[..., None], 0.0)
        return dphi[..., None] * unit


# --------------------------------------------------------- inner variation


@dataclass(frozen=True)
class InnerVariation:
    cutoff: CutoffSpec
    cone: ConeSpec
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(3)
        object.__setattr__(self, "h", h)
        n = np.linalg.norm(h)
        if n == 0:
            return
        if n >= self.h0:
            raise InadmissibleShift(f"|h| = {n:.4g} is not below h0 = {self.h0:.4g}")
        if not self.cone.contains_direction(h):
            raise InadmissibleShift("h is not inside the exterior cone")

    @property
    def delta(self) -> float:
        return 0.5 / self.cutoff.grad_bound

    @property
    def h0(self) -> float:
        return min(self.delta, self.cone.rho)

    @property
    def norm_h(self) -> float:
        return float(np.linalg.norm(self.h))

    @property
    def x0(self) -> np.ndarray:
        return self.cutoff.center

    @property
    def radius(self) -> float:
        return self.cutoff.radius

    def with_h(self, h) -> "InnerVariation":
        return InnerVariation(self.cutoff, self.cone, h)

    @classmethod
    def at(cls, domain: DomainSpec, x0, length: float = 0.0, direction=None):
        """Cutoff on the cone's neighbourhood of ``x0`` and a shift of ``length`` along ``direction``."""
        cone = exterior_cone(domain, x0)
        cutoff = CutoffSpec(cone.x0, cone.radius)
        d = cone.axis if direction is None else np.asarray(direction, dtype=float)
        return cls(cutoff, cone, length * d / np.linalg.norm(d))

    def shift_at(self, fraction: float) -> "InnerVariation":
        """Shift along the cone axis of length ``fraction * h0``."""
        return self.with_h(fraction * self.h0 * self.cone.axis)


def t_h(iv: InnerVariation, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x + iv.cutoff.phi(x)[..., None] * iv.h


def dt_h(iv: InnerVariation, x) -> np.ndarray:
    g = iv.cutoff.grad(x)
    return np.eye(3) + iv.h[:, None] * g[..., None, :]


def det_dt_h(iv: InnerVariation, x) -> np.ndarray:
    return 1.0 + iv.cutoff.grad(x) @ iv.h


def inv_dt_h(iv: InnerVariation, x) -> np.ndarray:
    g = iv.cutoff.grad(x)
    den = 1.0 + g @ iv.h
    return np.eye(3) - (iv.h[:, None] * g[..., None, :]) / den[..., None, None]


def s_h(iv: InnerVariation, y, tol: float = 1e-15, max_iter: int = 200) -> np.ndarray:
    """Inverse of ``t_h`` by the contraction ``x <- y - phi(x) h``.

    Points outside B_r(x0) are fixed points and are skipped; the others are
    swept until their update stalls at round-off.
    """
    y = np.asarray(y, dtype=float)
    x = y.copy()
    if iv.norm_h == 0 or y.size == 0:
        return x
    flat_y = y.reshape(-1, 3)
    flat_x = x.reshape(-1, 3)
    scale = max(1.0, float(np.abs(iv.x0).max()) + iv.radius)
    act = np.flatnonzero(np.linalg.norm(flat_y - iv.x0, axis=1) < iv.radius)
    ya, xa = flat_y[act], flat_y[act].copy()
    it = 0
    while len(act) and it < max_iter:
        for _ in range(4):
            xn = ya - iv.cutoff.phi(xa)[:, None] * iv.h
            step = np.abs(xn - xa).max(axis=1)
            xa = xn
        it += 4
        done = step <= tol * scale
        if done.any():
            flat_x[act[done]] = xa[done]
            keep = ~done
            act, ya, xa = act[keep], ya[keep], xa[keep]
    if len(act):
        flat_x[act] = xa
    res = np.abs(t_h(iv, flat_x) - flat_y).max()
    if res > 1e-13 * scale:
        raise NoConvergence(f"inverse map residual {res:.2e}")
    return x


def ds_h(iv: InnerVariation, y) -> np.ndarray:
    return inv_dt_h(iv, s_h(iv, y))


# ---------------------------------------------------------- pulled fields


class PulledU:
    """``x -> u~(T_h(x))`` with gradient ``Du~(T_h x) DT_h(x)``."""

    def __init__(self, iv: InnerVariation, u: FieldU):
        self.iv, self.u = iv, u

    def value(self, x):
        return self.u.value(t_h(self.iv, x), outside="zero")

    def grad(self, x):
        return self.u.grad(t_h(self.iv, x), outside="zero") @ dt_h(self.iv, x)


class PulledP:
    """``x -> P~(T_h(x)) DT_h(x)``; its Curl by the transformation identity."""

    def __init__(self, iv: InnerVariation, P: FieldP):
        self.iv, self.P = iv, P

    def value(self, x, cells=None):
        """Pulled-back values; ``cells`` optionally names the cell holding each ``T_h(x)``."""
        y = t_h(self.iv, x)
        if cells is None:
            v = self.P.value(y, outside="zero")
        else:
            v = self.P.value_in(cells, self.P.mesh.barycentric(cells, y))
        return v @ dt_h(self.iv, x)

    def curl(self, x):
        y = t_h(self.iv, x)
        c = self.P.curl(y, outside="zero")
        return det_dt_h(self.iv, x)[..., None, None] * c @ np.swapaxes(inv_dt_h(self.iv, x), -1, -2)


class PiolaM:
    """``y -> det DS_h(y) M(S_h y) DS_h(y)^{-T} = M(x) DT_h(x)^T / det DT_h(x)``."""

    def __init__(self, iv: InnerVariation, M, div_M=None):
        self.iv, self.M, self.div_M = iv, M, div_M

    def value(self, y):
        x = s_h(self.iv, y)
        m = np.asarray(self.M(x), dtype=float).reshape(-1, 3, 3)
        F = dt_h(self.iv, x)
        return m @ np.swapaxes(F, -1, -2) / det_dt_h(self.iv, x)[..., None, None]

    def div(self, y):
        if self.div_M is None:
            raise ValueError("divergence of M not supplied")
        x = s_h(self.iv, y)
        return np.asarray(self.div_M(x), dtype=float).reshape(-1, 3) / det_dt_h(self.iv, x)[..., None]


def tau_h(iv: InnerVariation, u: FieldU) -> PulledU:
    return PulledU(iv, u)


def pullback_Th(iv: InnerVariation, P: FieldP) -> PulledP:
    return PulledP(iv, P)


def piola_Ph(iv: InnerVariation, M, div_M=None) -> PiolaM:
    return PiolaM(iv, M, div_M)


# ------------------------------------------------------------ test fields


def random_field_P(space: HCurlTensorSpace, rng) -> FieldP:
    c = rng.standard_normal(space.ndof)
    c[space.boundary_mask] = 0.0
    return FieldP(space, c)


def random_field_U(space, rng) -> FieldU:
    c = rng.standard_normal(space.ndof)
    c[space.boundary_mask] = 0.0
    return FieldU(space, c)


def random_polynomial_tensor(rng, degree: int = 2):
    """A random polynomial 3x3 field ``M`` of total degree ``degree`` and its row-wise divergence."""
    exps = [(a, b, c) for a in range(degree + 1) for b in range(degree + 1 - a)
            for c in range(degree + 1 - a - b)]
    E = np.array(exps)
    A = rng.standard_normal((len(exps), 3, 3))

    def mono(x, e):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pw = np.ones((degree + 1,) + x.shape)
        for k in range(1, degree + 1):
            pw[k] = pw[k - 1] * x
        return (pw[e[:, 0], :, 0] * pw[e[:, 1], :, 1] * pw[e[:, 2], :, 2]).T

    def M(x):
        return np.einsum("nk,kij->nij", mono(x, E), A)

    def div_M(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(x), 3))
        for j in range(3):
            ej = E.copy()
            coef = ej[:, j].astype(float)
            ej[:, j] = np.maximum(ej[:, j] - 1, 0)
            out += np.einsum("nk,k,ki->ni", mono(x, ej), coef, A[:, :, j])
        return out

    return M, div_M


# ---------------------------------------------------------- finite differences

_FD = ((1, 8.0), (2, -1.0))  # 4th order central: (8(f1 - f-1) - (f2 - f-2)) / 12 s


def _stencil(x, step):
    """(N, 3, 4, 3) points x + k step e_j for k in (1, -1, 2, -2)."""
    ks = np.array([1, -1, 2, -2], dtype=float)
    return x[:, None, None, :] + step * ks[None, None, :, None] * np.eye(3)[None, :, None, :]


def _fd_derivs(f, x, step, shape):
    """Partial derivatives d f / d x_j, shape (N, 3) + shape."""
    pts = _stencil(x, step).reshape(-1, 3)
    v = np.asarray(f(pts)).reshape((len(x), 3, 4) + shape)
    return (8 * (v[:, :, 0] - v[:, :, 1]) - (v[:, :, 2] - v[:, :, 3])) / (12 * step)


def _rowwise_curl(d):
    """Row-wise curl from partials ``d[:, j, r, k] = d G_rk / d x_j``."""
    c = np.empty(d.shape[:1] + (3, 3))
    c[:, :, 0] = d[:, 1, :, 2] - d[:, 2, :, 1]
    c[:, :, 1] = d[:, 2, :, 0] - d[:, 0, :, 2]
    c[:, :, 2] = d[:, 0, :, 1] - d[:, 1, :, 0]
    return c


def _ball_points(iv: InnerVariation, mesh: Mesh, order: int = 6) -> np.ndarray:
    """Quadrature points of cells meeting B_r(x0)."""
    near = np.linalg.norm(mesh.centroids() - iv.x0, axis=1) < iv.radius + mesh.h_max
    _, _, x, _ = rule_points(mesh, order, cells=np.flatnonzero(near))
    return x[np.linalg.norm(x - iv.x0, axis=1) < iv.radius]


def _away_from_seams(iv, x, margin):
    rho = np.linalg.norm(x - iv.x0, axis=1)
    r = iv.radius
    return (np.abs(rho - 0.5 * r) > margin) & (np.abs(rho - r) > margin)


def curl_identity_check(iv: InnerVariation, P: FieldP, rng=None, n_points: int = 2000,
                        step: float = 1e-3) -> dict:
    """Compare a finite-difference Curl of the pullback with the closed-form identity.

    Only points whose whole stencil stays in one cell, whose image stencil
    stays in one cell, and which avoid the bump's seams are used; there both
    sides are classical.  Defect is ``max |L - R| / (1 + |R|)``.
    """
    rng = np.random.default_rng(rng)
    mesh = P.mesh
    x = _ball_points(iv, mesh)
    x = x[_away_from_seams(iv, x, 3 * step)]
    if len(x) > 4 * n_points:
        x = x[rng.choice(len(x), 4 * n_points, replace=False)]
    st = _stencil(x, step).reshape(-1, 3)
    c0, _ = mesh.locate(x)
    cs, _ = mesh.locate(st)
    ok = np.all(cs.reshape(len(x), 12) == c0[:, None], axis=1) & (c0 >= 0)
    ty, tst = t_h(iv, x), t_h(iv, st)
    d0, _ = mesh.locate(ty)
    ds, _ = mesh.locate(tst)
    ok &= np.all(ds.reshape(len(x), 12) == d0[:, None], axis=1) & (d0 >= 0)
    x = x[ok][:n_points]
    if len(x) == 0:
        return {"defect": 0.0, "n_points": 0}
    pb = pullback_Th(iv, P)
    lhs = _rowwise_curl(_fd_derivs(pb.value, x, step, (3, 3)))
    rhs = pb.curl(x)
    err = np.linalg.norm((lhs - rhs).reshape(len(x), -1), axis=1)
    scale = np.linalg.norm(rhs.reshape(len(x), -1), axis=1)
    return {"defect": float(np.max(err / (1 + scale))), "n_points": int(len(x)),
            "max_abs": float(err.max())}


def div_identity_check(iv: InnerVariation, M, div_M, domain: DomainSpec, rng=None,
                       n_points: int = 2000, step: float = 1e-3) -> dict:
    """Finite-difference Div of the Piola transform against ``det DS_h (Div M) o S_h``."""
    rng = np.random.default_rng(rng)
    d = rng.standard_normal((4 * n_points, 3))
    d *= (rng.random(len(d)) ** (1 / 3) / np.linalg.norm(d, axis=1))[:, None]
    y = iv.x0 + iv.radius * d
    y = y[domain.contains(y) & (domain.distance_to_boundary(y) > 3 * step)]
    y = y[_away_from_seams(iv, s_h(iv, y), 6 * step)][:n_points]
    pm = piola_Ph(iv, M, div_M)
    dd = _fd_derivs(pm.value, y, step, (3, 3))
    lhs = np.einsum("njrj->nr", dd)
    rhs = pm.div(y)
    err = np.linalg.norm(lhs - rhs, axis=1)
    scale = np.linalg.norm(rhs, axis=1)
    return {"defect": float(np.max(err / (1 + scale))), "n_points": int(len(y)),
            "max_abs": float(err.max())}


# ------------------------------------------------------------- adjointness


@lru_cache(maxsize=None)
def _red_children() -> tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of the 10 points of a red-refined tet and its 8 children."""
    ref = Mesh.from_tets(np.vstack([np.zeros(3), np.eye(3)]), [[0, 1, 2, 3]])
    fine = refine(ref)
    v = fine.vertices
    bary = np.concatenate([1 - v.sum(axis=1, keepdims=True), v], axis=1)
    return bary, fine.tets


def _seam_subcells(iv: InnerVariation, mesh: Mesh, cells, depth: int):
    """Sub-cells (parent cell, barycentric vertex matrix, level) of ``cells``.

    Sub-cells cut by a sphere where the integrands lose smoothness
    (``|y - x0| = r`` and ``|y - x0 - h| = r/2``) are red-refined ``depth``
    times; all others are kept whole.
    """
    cb, kids = _red_children()
    seams = ((iv.x0, iv.radius), (iv.x0 + iv.h, 0.5 * iv.radius))
    parent = np.asarray(cells)
    B = np.broadcast_to(np.eye(4), (len(parent), 4, 4)).copy()
    done = []
    for lev in range(depth + 1):
        X = np.einsum("nab,nbj->naj", B, mesh.vertices[mesh.tets[parent]])
        c = X.mean(axis=1)
        rad = np.linalg.norm(X - c[:, None], axis=2).max(axis=1)
        cut = np.zeros(len(parent), dtype=bool)
        for ctr, R in seams:
            far = np.linalg.norm(X - ctr, axis=2).max(axis=1)
            near = np.linalg.norm(c - ctr, axis=1) - rad
            cut |= (far > R) & (near < R)
        if lev == depth:
            cut[:] = False
        done.append((parent[~cut], B[~cut], lev))
        parent, B = parent[cut], B[cut]
        if len(parent) == 0:
            break
        pts = np.einsum("pa,nab->npb", cb, B)  # (n, 10, 4)
        B = pts[:, kids].reshape(-1, 4, 4)
        parent = np.repeat(parent, len(kids))
    return done


def _subcell_quadrature(mesh, pieces, rule, perm=None):
    r = rule
    bary_r = r.bary if perm is None else r.bary[:, perm]
    for parent, B, lev in pieces:
        if len(parent) == 0:
            continue
        for s in range(0, len(parent), 4096):
            p, b = parent[s:s + 4096], B[s:s + 4096]
            bary = np.einsum("qa,nab->nqb", bary_r, b).reshape(-1, 4)
            cid = np.repeat(p, len(r.weights))
            y = np.einsum("nk,nkj->nj", bary, mesh.vertices[mesh.tets[cid]])
            w = np.outer(6.0 * mesh.volumes[p] * 8.0**-lev, r.weights).ravel()
            yield cid, bary, y, w


def _pairing_rhs(iv, P, pm, pieces, rule):
    """int <P, Piola M> dy over the given sub-cells."""
    total = 0.0
    for cid, bary, y, w in _subcell_quadrature(P.mesh, pieces, rule):
        total += float(w @ np.sum(P.value_in(cid, bary) * pm.value(y), axis=(1, 2)))
    return total


def _pairing_lhs(iv, P, M, pieces, rule, perm=(2, 3, 0, 1)):
    """int <T_h P, M> dx over the curved sub-cells S_h(K), parametrized from K.

    Uses a vertex-permuted rule, so the two sides share no quadrature nodes.
    """
    total = 0.0
    pb = pullback_Th(iv, P)
    for cid, _, y, w in _subcell_quadrature(P.mesh, pieces, rule, list(perm)):
        x = s_h(iv, y)
        jac = 1.0 / det_dt_h(iv, x)  # det DS_h(y)
        # T_h maps the curved cell S_h(K) onto K, so the cell is known
        val = np.sum(pb.value(x, cells=cid) * np.asarray(M(x)).reshape(-1, 3, 3), axis=(1, 2))
        total += float(w @ (val * jac))
    return total


def adjoint_check(iv: InnerVariation, P: FieldP, M, levels=((1, 6), (2, 10)),
                  floor: float = 1e-12) -> dict:
    """Defect of ``int <T_h P, M> dx = int <P, P_h M> dy`` under quadrature refinement.

    The right side is integrated in y over mesh cells, the left side in x
    over their images ``S_h(K)``.  Each entry of ``levels`` is a pair
    (seam refinement depth, rule order); refining means cutting the seam
    cells finer and raising the order on the smooth cells.  The defect
    ``|L - R| / (1 + |L|)`` must fall below 1e-6 and shrink at least 4x from
    the first to the last level, or both be at round-off level ``floor``.
    Cells away from B_r(x0), where the two integrands coincide, are added
    once to both sides.
    """
    mesh = P.mesh
    near = np.linalg.norm(mesh.centroids() - iv.x0, axis=1) < iv.radius + mesh.h_max
    inner, outer = np.flatnonzero(near), np.flatnonzero(~near)
    pm = piola_Ph(iv, M)
    base = _pairing_rhs(iv, P, pm, [(outer, np.broadcast_to(np.eye(4), (len(outer), 4, 4)), 0)],
                        quadrature(6))
    defects, lhs_vals = [], []
    for depth, order in levels:
        rule = quadrature(order)
        pieces = _seam_subcells(iv, mesh, inner, depth) if iv.norm_h > 0 else \
            [(inner, np.broadcast_to(np.eye(4), (len(inner), 4, 4)), 0)]
        rhs = base + _pairing_rhs(iv, P, pm, pieces, rule)
        lhs = base + _pairing_lhs(iv, P, M, pieces, rule)
        defects.append(abs(lhs - rhs) / (1 + abs(lhs)))
        lhs_vals.append(lhs)
    d0, d1 = defects[0], defects[-1]
    reduction = d0 / d1 if d1 > 0 else np.inf
    passed = d1 <= 1e-6 and (reduction >= 4 or max(d0, d1) <= floor)
    return {"defects": [float(d) for d in defects], "defect": float(d1),
            "reduction": float(reduction), "lhs": lhs_vals[-1], "passed": bool(passed)}


# ---------------------------------------------------------- difference quotient


def _ball_quadrature(iv, mesh, order, levels):
    near = np.linalg.norm(mesh.centroids() - iv.x0, axis=1) < iv.radius + mesh.h_max
    return rule_points(mesh, order, levels, cells=np.flatnonzero(near))


def ball_samples(iv: InnerVariation, mesh: Mesh, n_side: int = 128, rng=0):
    """Stratified sample of ``B_r(x0)`` inside the mesh: one uniform point per cell
    of an ``n_side^3`` grid over the enclosing cube.

    Unlike a fixed quadrature rule this stays unbiased for integrands that
    jump across thin slabs, as ``Du - D(u o T_h)`` does near mesh faces.
    Returns ``(x, cells, bary, weight)``.
    """
    rng = np.random.default_rng(rng)
    r = iv.radius
    step = 2 * r / n_side
    idx = np.stack(np.meshgrid(*[np.arange(n_side)] * 3, indexing="ij"), -1).reshape(-1, 3)
    x = iv.x0 - r + (idx + rng.random(idx.shape)) * step
    x = x[np.linalg.norm(x - iv.x0, axis=1) < r]
    if mesh.domain is not None:
        x = x[mesh.domain.contains(x)]
    cells, bary = mesh.locate(x)
    ok = cells >= 0
    return x[ok], cells[ok], bary[ok], step**3


def diff_quotient(iv: InnerVariation, u: FieldU, P: FieldP, n_side: int = 128, rng=0,
                  parts: bool = False, sample=None):
    """``|h|^-1 (|u - tau_h u|^2_H1 + |P - T_h P|^2_H(Curl))`` over ``B_r(x0)``.

    Integrated on a seeded stratified sample (see ``ball_samples``); pass
    ``sample`` to reuse one across shifts with the same cutoff.
    """
    if iv.norm_h == 0:
        return {"total": 0.0, "u": 0.0, "P": 0.0} if parts else 0.0
    mesh = u.mesh
    x, c, b, wt = sample if sample is not None else ball_samples(iv, mesh, n_side, rng)
    y = t_h(iv, x)
    cy, by = mesh.locate(y)
    # T_h pushes points out of the domain, where both fields extend by zero
    inside = (cy >= 0).astype(float)
    cy = np.maximum(cy, 0)
    F = dt_h(iv, x) * inside[:, None, None]
    det = det_dt_h(iv, x) * inside
    Fi_t = np.swapaxes(inv_dt_h(iv, x), -1, -2)
    du = u.value_in(c, b) - u.value_in(cy, by) * inside[:, None]
    dg = u.grad_in(c) - u.grad_in(cy) @ F
    dp = P.value_in(c, b) - P.value_in(cy, by) @ F
    dc = P.curl_in(c) - det[:, None, None] * P.curl_in(cy) @ Fi_t

    def sq(a):
        return float(wt * np.sum(a**2))

    qu = (sq(du) + sq(dg)) / iv.norm_h
    qp = (sq(dp) + sq(dc)) / iv.norm_h
    if parts:
        return {"total": qu + qp, "u": qu, "P": qp}
    return qu + qp


def hdiv_norm(mesh: Mesh, M, div_M, order: int = 4) -> float:
    _, _, x, w = rule_points(mesh, order)
    m = np.asarray(M(x)).reshape(len(w), -1)
    d = np.asarray(div_M(x)).reshape(len(w), -1)
    return float(np.sqrt(w @ (np.sum(m**2, 1) + np.sum(d**2, 1))))


def divcurl_pairing_check(iv: InnerVariation, P: FieldP, M, div_M, order: int = 6,
                          levels: int = 1) -> dict:
    """``|int <T_h P - P, M>|`` and its ratio to ``|h| |P|_H(Curl) |M|_H(Div)``.

    The pairing is evaluated as ``int <P, P_h M - M> dy`` on the cells near x0.
    """
    from .fespace import norms

    if iv.norm_h == 0:
        return {"pairing": 0.0, "ratio": 0.0}
    mesh = P.mesh
    cid, bary, y, w = _ball_quadrature(iv, mesh, order, levels)
    diff = piola_Ph(iv, M).value(y) - np.asarray(M(y)).reshape(-1, 3, 3)
    pairing = abs(float(w @ np.sum(P.value_in(cid, bary) * diff, axis=(1, 2))))
    den = iv.norm_h * norms(P)["HCurl"] * hdiv_norm(mesh, M, div_M)
    return {"pairing": pairing, "ratio": pairing / den if den > 0 else 0.0}


def dyadic_sweep(iv: InnerVariation, u: FieldU | None = None, P: FieldP | None = None,
                 M=None, div_M=None, ks=range(2, 7), h_bar: float | None = None,
                 n_side: int = 128, rng=0) -> list[dict]:
    """Rows ``(k, |h|, quotient, ratio)`` for ``h = 2^-k h_bar`` along the cone axis."""
    h_bar = iv.h0 if h_bar is None else h_bar
    rows = []
    sample = ball_samples(iv, u.mesh, n_side, rng) if u is not None and P is not None else None
    for k in ks:
        ivk = iv.with_h(2.0**-k * h_bar * iv.cone.axis)
        row = {"k": int(k), "h": float(ivk.norm_h)}
        if sample is not None:
            row["quotient"] = diff_quotient(ivk, u, P, sample=sample)
        if P is not None and M is not None:
            row["ratio"] = divcurl_pairing_check(ivk, P, M, div_M)["ratio"]
        rows.append(row)
    return rows


def write_sweep_csv(path, rows) -> None:
    cols = ["k", "h", "quotient", "ratio", "curl_defect", "div_defect", "adjoint_defect"]
    cols = [c for c in cols if any(c in r for r in rows)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r.get(c, "")) for c in cols])


def _fmt(v):
    return f"{v:.12e}" if isinstance(v, float) else v


# ------------------------------------------------------ mapping properties


def mapping_fuzz(domain: DomainSpec, x0, rng=None, n: int = 10_000) -> dict:
    """Seeded checks of the mapping properties of admissible ``T_h`` at ``x0``."""
    rng = np.random.default_rng(rng)
    iv0 = InnerVariation.at(domain, x0)
    cone, h0 = iv0.cone, iv0.h0
    hs = cone.sample(rng, n, max_length=h0 * (1 - 1e-9))
    d = rng.standard_normal((n, 3))
    d *= (rng.random(n) ** (1 / 3) / np.linalg.norm(d, axis=1))[:, None]
    x = iv0.x0 + 1.05 * iv0.radius * d
    phi = iv0.cutoff.phi(x)
    g = iv0.cutoff.grad(x)
    tx = x + phi[:, None] * hs
    det = 1.0 + np.sum(g * hs, axis=1)
    inside = domain.contains(x)
    # T_h(R^3 \ Omega) in R^3 \ Omega
    leak_out = int(np.sum(~inside & domain.contains(tx)))
    # S_h(Omega) in Omega: invert per sample (each has its own h)
    y = x
    xs = y.copy()
    for _ in range(200):
        xn = y - iv0.cutoff.phi(xs)[:, None] * hs
        if np.abs(xn - xs).max() <= 1e-16:
            xs = xn
            break
        xs = xn
    leak_in = int(np.sum(domain.contains(y) & ~domain.contains(xs)))
    # s_h o t_h = id
    back = tx.copy()
    for _ in range(200):
        bn = tx - iv0.cutoff.phi(back)[:, None] * hs
        if np.abs(bn - back).max() <= 1e-16:
            back = bn
            break
        back = bn
    round_trip = float(np.abs(back - x).max())
    return {
        "n": int(n),
        "outside_to_inside": leak_out,
        "inside_preimage_outside": leak_in,
        "min_det": float(det.min()),
        "round_trip": round_trip,
        "passed": leak_out == 0 and leak_in == 0 and det.min() >= 0.5 and round_trip <= 1e-12,
    }


def uniform_bound(iv: InnerVariation, rng=None, n: int = 20_000) -> dict:
    """Sampled ``|det DT|_inf + |det DT^-1|_inf + Lip T + Lip T^-1`` vs its closed form."""
    rng = np.random.default_rng(rng)
    a = iv.norm_h * iv.cutoff.grad_bound
    closed = 2 * (1 + a) + 2 / (1 - a)
    d = rng.standard_normal((n, 3))
    d *= (rng.random(n) ** (1 / 3) / np.linalg.norm(d, axis=1))[:, None]
    x = iv.x0 + iv.radius * d
    # points where grad phi is parallel to h maximize every term
    s = np.linspace(0, 1, 201)
    rho = 0.5 * iv.radius * (1 + s)
    if iv.norm_h > 0:
        u = iv.h / iv.norm_h
        x = np.vstack([x, iv.x0 + rho[:, None] * u, iv.x0 - rho[:, None] * u])
    det = det_dt_h(iv, x)
    F = dt_h(iv, x)
    Fi = inv_dt_h(iv, x)
    sampled = (np.abs(det).max() + np.abs(1 / det).max() + np.linalg.norm(F, 2, axis=(1, 2)).max()
               + np.linalg.norm(Fi, 2, axis=(1, 2)).max())
    return {"sampled": float(sampled), "closed_form": float(closed),
            "relative_gap": float(abs(closed - sampled) / closed)}
