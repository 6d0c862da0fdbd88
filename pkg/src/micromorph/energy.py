"""Stored-energy densities, their gradients, and checks of the structural conditions.

States are triples ``(F, P, C)`` of 3x3 matrices standing for ``(Du, P, Curl P)``.
All pointwise functions broadcast over leading axes.  Fourth-order tensors are
9x9 matrices acting on row-major flattened 3x3 matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import NonPositiveCoefficient, NonPositiveGap
from .fespace import H1VectorSpace, HCurlTensorSpace, assemble, stiffness_u, sym9

I9 = np.eye(9)
P_SYM = 0.5 * (I9 + I9[[0, 3, 6, 1, 4, 7, 2, 5, 8]])


def _sym_basis() -> np.ndarray:
    """Orthonormal basis of Sym(3) inside R^9, shape (9, 6)."""
    cols = []
    for i in range(3):
        for j in range(i, 3):
            e = np.zeros((3, 3))
            e[i, j] = e[j, i] = 1.0
            cols.append(e.ravel() / np.linalg.norm(e))
    return np.array(cols).T


SYM_BASIS = _sym_basis()


# ---------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class CoefficientField:
    """``C(x) = c0 + sum_k x_k slopes[k]``; constant when ``slopes`` is None."""

    c0: np.ndarray
    slopes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "c0", np.asarray(self.c0, dtype=float).reshape(9, 9))
        if self.slopes is not None:
            s = np.asarray(self.slopes, dtype=float).reshape(3, 9, 9)
            object.__setattr__(self, "slopes", None if not np.any(s) else s)

    @classmethod
    def identity(cls):
        return cls(I9.copy())

    @classmethod
    def isotropic(cls, mu: float, lam: float = 0.0):
        """``sigma -> 2 mu sym(sigma) + lam tr(sigma) Id``."""
        i = np.eye(3).ravel()
        return cls(2 * mu * P_SYM + lam * np.outer(i, i))

    @classmethod
    def graded(cls, base, beta: float, axis: int = 0):
        """``(1 + beta x_axis) * base``."""
        base = np.asarray(base, dtype=float).reshape(9, 9)
        s = np.zeros((3, 9, 9))
        s[axis] = beta * base
        return cls(base, s)

    @property
    def is_constant(self) -> bool:
        return self.slopes is None

    def __call__(self, x):
        if self.slopes is None or x is None:
            if x is None:
                return self.c0
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(self.c0, x.shape[:-1] + (9, 9))
        x = np.asarray(x, dtype=float)
        return self.c0 + np.einsum("...k,kij->...ij", x, self.slopes)

    @property
    def lipschitz(self) -> float:
        if self.slopes is None:
            return 0.0
        return float(np.sqrt(sum(np.linalg.norm(s, 2) ** 2 for s in self.slopes)))

    def corner_values(self, lo, hi) -> np.ndarray:
        corners = np.array([[(lo, hi)[b >> k & 1][k] for k in range(3)] for b in range(8)])
        return np.atleast_3d(self(corners)) if self.slopes is not None else self.c0[None]

    def max_norm(self, lo, hi) -> float:
        return float(max(np.linalg.norm(c, 2) for c in self.corner_values(lo, hi)))


def _as_field(c) -> CoefficientField:
    if isinstance(c, CoefficientField):
        return c
    return CoefficientField(c)


@dataclass(frozen=True)
class LinearCoefficients:
    c_e: CoefficientField = field(default_factory=CoefficientField.identity)
    c_micro: CoefficientField = field(default_factory=CoefficientField.identity)
    l_c: CoefficientField = field(default_factory=CoefficientField.identity)

    def __post_init__(self):
        for k in ("c_e", "c_micro", "l_c"):
            object.__setattr__(self, k, _as_field(getattr(self, k)))

    @classmethod
    def identity(cls):
        return cls()

    @property
    def is_constant(self) -> bool:
        return self.c_e.is_constant and self.c_micro.is_constant and self.l_c.is_constant

    @property
    def lipschitz(self) -> float:
        """Bound L with |W(x,Q) - W(y,Q)| <= L |x-y| (1 + |Q|^2)."""
        le, lm, lc = self.c_e.lipschitz, self.c_micro.lipschitz, self.l_c.lipschitz
        return max(le + 0.5 * lm, 0.5 * lc)

    def validate(self, mesh_or_bounds) -> None:
        """Check symmetry and positivity at the corners of the bounding box."""
        if hasattr(mesh_or_bounds, "vertices"):
            v = mesh_or_bounds.vertices
            lo, hi = v.min(axis=0), v.max(axis=0)
        else:
            lo, hi = (np.asarray(b, dtype=float) for b in mesh_or_bounds)
        for name, fld, on_sym in (("c_e", self.c_e, True), ("c_micro", self.c_micro, True),
                                  ("l_c", self.l_c, False)):
            for C in fld.corner_values(lo, hi):
                _check_tensor(name, C, on_sym)

    def bounds(self, lo, hi) -> dict:
        return {k: getattr(self, k).max_norm(lo, hi) for k in ("c_e", "c_micro", "l_c")}


def _check_tensor(name, C, on_sym):
    if on_sym:
        leak = (I9 - P_SYM) @ C @ SYM_BASIS
        if np.abs(leak).max() > 1e-12 * max(1.0, np.abs(C).max()):
            raise NonPositiveCoefficient(f"{name} does not map Sym(3) into Sym(3)")
        C = SYM_BASIS.T @ C @ SYM_BASIS
    if np.abs(C - C.T).max() > 1e-12 * max(1.0, np.abs(C).max()):
        raise NonPositiveCoefficient(f"{name} is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (C + C.T)).min()
    if lam <= 0:
        raise NonPositiveCoefficient(f"{name} has smallest eigenvalue {lam:.3e} <= 0")


@dataclass(frozen=True)
class NonlinearParams:
    q: float
    alpha: float | None = None

    def __post_init__(self):
        if not 1.0 < self.q < 2.0:
            raise ValueError(f"q must lie in (1, 2), got {self.q}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", 1.0 / self.q)
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


# ---------------------------------------------------------------- densities


def _flat(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(a.shape[:-2] + (9,))


def _apply(C, v):
    return np.einsum("...ij,...j->...i", C, v)


def _coeffs_at(coeffs: LinearCoefficients, x, shape):
    out = []
    for c in (coeffs.c_e, coeffs.c_micro, coeffs.l_c):
        if c.is_constant:
            out.append(c.c0)
        else:
            out.append(c(np.broadcast_to(np.asarray(x, dtype=float), shape + (3,))))
    return out


def w_linear(x, Q, coeffs: LinearCoefficients):
    F, P, C = (_flat(a) for a in Q)
    ce, cm, lc = _coeffs_at(coeffs, x, F.shape[:-1])
    s = sym9(F - P)
    sp_ = sym9(P)
    return 0.5 * (np.sum(_apply(ce, s) * s, -1) + np.sum(_apply(cm, sp_) * sp_, -1)
                  + np.sum(_apply(lc, C) * C, -1))


def dw_linear(x, Q, coeffs: LinearCoefficients):
    F, P, C = (_flat(a) for a in Q)
    shape = np.shape(Q[0])
    ce, cm, lc = _coeffs_at(coeffs, x, F.shape[:-1])
    t = _apply(ce, sym9(F - P))
    return (t.reshape(shape), (-t + _apply(cm, sym9(P))).reshape(shape),
            _apply(lc, C).reshape(shape))


def _q_term_grad(C, params: NonlinearParams):
    """``q alpha |C|^(q-2) C`` with value 0 at C = 0."""
    n = np.linalg.norm(C, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(n > 0, params.q * params.alpha * n ** (params.q - 2) * C, 0.0)
    return g


def w_nonlinear(Q, params: NonlinearParams):
    F, P, C = (_flat(a) for a in Q)
    s = sym9(F - P)
    sp_ = sym9(P)
    nc = np.linalg.norm(C, axis=-1)
    return (0.5 * np.sum(s * s, -1) + 0.5 * np.sum(sp_ * sp_, -1)
            + params.alpha * nc**params.q + 0.5 * nc**2)


def dw_nonlinear(Q, params: NonlinearParams):
    F, P, C = (_flat(a) for a in Q)
    shape = np.shape(Q[0])
    t = sym9(F - P)
    return (t.reshape(shape), (-t + sym9(P)).reshape(shape),
            (_q_term_grad(C, params) + C).reshape(shape))


def gradient_bound_constant(model, bounds=((0, 0, 0), (1, 1, 1))) -> float:
    """c2 with |DW(x,Q)| <= c2 (1 + |Q|)."""
    if isinstance(model, NonlinearParams):
        return 6.0 + model.q * model.alpha
    b = model.bounds(*(np.asarray(v, dtype=float) for v in bounds))
    return 4 * b["c_e"] + b["c_micro"] + b["l_c"]


def check_w1_lipschitz(model, samples=None, rng=None, n: int = 1000,
                       bounds=((0, 0, 0), (1, 1, 1))) -> float:
    """Largest observed |W(x,Q) - W(y,Q)| / (|x-y| (1 + |Q|^2)).

    ``samples`` is ``(x, y, (F, P, C))`` with leading axis over pairs; when
    omitted, ``n`` pairs are drawn in the box ``bounds``.
    """
    if isinstance(model, NonlinearParams):
        return 0.0
    if samples is None:
        rng = np.random.default_rng(rng)
        lo, hi = (np.asarray(v, dtype=float) for v in bounds)
        x = lo + (hi - lo) * rng.random((n, 3))
        y = lo + (hi - lo) * rng.random((n, 3))
        Q = tuple(rng.standard_normal((n, 3, 3)) for _ in range(3))
    else:
        x, y, Q = samples
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    dist = np.linalg.norm(x - y, axis=-1)
    nq2 = sum(np.sum(np.asarray(a) ** 2, axis=(-2, -1)) for a in Q)
    diff = np.abs(w_linear(x, Q, model) - w_linear(y, Q, model))
    keep = dist > 0
    if not keep.any():
        return 0.0
    return float(np.max(diff[keep] / (dist[keep] * (1 + nq2[keep]))))


# ----------------------------------------------------------- discrete energy


_CURL_ROUNDING = 64 * np.finfo(float).eps


class DiscreteEnergy:
    """The integrated energy on ``H1VectorSpace x HCurlTensorSpace``.

    The dof vector stacks ``[u; P]``.  For the nonlinear model the quadratic
    part uses identity tensors and the ``alpha |Curl P|^q`` term is integrated
    exactly, since the discrete curl is constant per cell.
    """

    def __init__(self, u_space: H1VectorSpace, p_space: HCurlTensorSpace, model):
        self.u_space = u_space
        self.p_space = p_space
        self.model = model
        self.nu = u_space.ndof
        self.npp = p_space.ndof

    @property
    def mesh(self):
        return self.u_space.mesh

    @property
    def is_linear(self) -> bool:
        return not isinstance(self.model, NonlinearParams) or self.model.alpha == 0

    @cached_property
    def quadratic(self) -> sp.csr_matrix:
        coeffs = self.model if isinstance(self.model, LinearCoefficients) else None
        U, Pp = self.u_space, self.p_space
        ss = assemble("symgrad_symgrad", coeffs, U, Pp)
        cp = assemble("coupling_symgradU_symP", coeffs, U, Pp)
        pp = assemble("symP_symP", coeffs, U, Pp) + assemble("curlcurl", coeffs, U, Pp)
        K = sp.bmat([[ss, -cp], [-cp.T, pp]], format="csr")
        return (0.5 * (K + K.T)).tocsr()

    @cached_property
    def free(self) -> np.ndarray:
        return ~np.concatenate([self.u_space.boundary_mask, self.p_space.boundary_mask])

    @cached_property
    def curl_operator(self) -> sp.csr_matrix:
        """Maps P dofs to the per-cell curls, shape (9 * n_cells, n_P)."""
        m = self.mesh
        cc = self.p_space.cell_curls  # (nc, 6, 3)
        nc, ne = m.n_cells, m.n_edges
        c = np.arange(nc)[:, None, None, None]
        r = np.arange(3)[None, :, None, None]
        j = np.arange(3)[None, None, None, :]
        shape = (nc, 3, 6, 3)
        rows = np.broadcast_to(c * 9 + r * 3 + j, shape).ravel()
        cols = np.broadcast_to(r * ne + m.cell_edges[:, None, :, None], shape).ravel()
        vals = np.broadcast_to(cc[:, None, :, :], shape).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(9 * nc, 3 * ne))

    @cached_property
    def norm_matrix(self) -> sp.csr_matrix:
        """Gram matrix of the H1 x H(Curl) norm."""
        U, Pp = self.u_space, self.p_space
        nu = assemble("mass_u", None, U, Pp) + stiffness_u(U)
        npp = assemble("mass_P", None, U, Pp) + assemble("curlcurl", None, U, Pp)
        return sp.block_diag([nu, npp], format="csr")

    def split(self, x):
        from .fespace import FieldP, FieldU
        return FieldU(self.u_space, x[: self.nu].copy()), FieldP(self.p_space, x[self.nu:].copy())

    @staticmethod
    def pack(u, P) -> np.ndarray:
        return np.concatenate([u.coeffs, P.coeffs])

    @cached_property
    def _abs_curl_operator(self) -> sp.csr_matrix:
        return abs(self.curl_operator)

    def _curls(self, x, raw=None):
        """Per-cell curls with values below their own rounding bound set to zero.

        The q-term gradient behaves like ``|C|^(q-1)``, so cancellation noise of
        size eps in a curl that is exactly zero would show up as a spurious
        gradient of size eps^(q-1).
        """
        p = x[self.nu:]
        c = (self.curl_operator @ p).reshape(-1, 9) if raw is None else raw
        bound = _CURL_ROUNDING * (self._abs_curl_operator @ np.abs(p)).reshape(-1, 9)
        tiny = np.linalg.norm(c, axis=1) <= np.linalg.norm(bound, axis=1)
        if tiny.any():
            c = c.copy()
            c[tiny] = 0.0
        return c

    def value(self, x) -> float:
        v = 0.5 * float(x @ (self.quadratic @ x))
        if not self.is_linear:
            n = np.linalg.norm(self._curls(x), axis=1)
            v += self.model.alpha * float(self.mesh.volumes @ n**self.model.q)
        return v

    def gradient(self, x) -> np.ndarray:
        g = self.quadratic @ x
        if not self.is_linear:
            gc = _q_term_grad(self._curls(x), self.model) * self.mesh.volumes[:, None]
            g[self.nu:] += self.curl_operator.T @ gc.ravel()
        return g

    def change(self, x, p, t: float, b=None) -> float:
        """``E(x + t p) - E(x)`` without cancellation, ``E = W - b.x``.

        Differences of large nearly equal energies lose all digits once the
        steps are small; here every term is formed from the increment itself.
        """
        Kx = self.quadratic @ x
        Kp = self.quadratic @ p
        lin = Kx if b is None else Kx - b
        d = t * float(p @ lin) + 0.5 * t * t * float(p @ Kp)
        if not self.is_linear:
            raw = (self.curl_operator @ x[self.nu:]).reshape(-1, 9)
            c = self._curls(x, raw)
            dc = t * (self.curl_operator @ p[self.nu:]).reshape(-1, 9)
            c1 = self._curls(x + t * p, raw + dc)
            snapped = np.any(c != raw, axis=1) | np.any(c1 != raw + dc, axis=1)
            dc[snapped] = c1[snapped] - c[snapped]
            n0 = np.linalg.norm(c, axis=1)
            dn2 = 2 * np.sum(c * dc, axis=1) + np.sum(dc * dc, axis=1)  # |c+dc|^2 - |c|^2
            n1 = np.sqrt(np.maximum(n0**2 + dn2, 0.0))
            q = self.model.q
            pos = n0 > 0
            dq = n1**q  # cells starting from zero curl
            dn = dn2[pos] / (n1[pos] + n0[pos])
            dq[pos] = n0[pos] ** q * np.expm1(q * np.log1p(dn / n0[pos]))
            d += self.model.alpha * float(self.mesh.volumes @ dq)
        return d

    def q_term_gap(self, x, y) -> float:
        """Convexity gap of the ``alpha |Curl P|^q`` integral between states x and y."""
        if self.is_linear:
            return 0.0
        cx, cy = self._curls(x), self._curls(y)
        a, q, V = self.model.alpha, self.model.q, self.mesh.volumes
        nx, ny = np.linalg.norm(cx, axis=1), np.linalg.norm(cy, axis=1)
        g = _q_term_grad(cx, self.model)
        return float(V @ (a * ny**q - a * nx**q - np.sum(g * (cy - cx), axis=1)))

    def norm2(self, x) -> float:
        return float(x @ (self.norm_matrix @ x))


def check_convexity_gap(model, spaces, pairs) -> float:
    """Smallest convexity ratio over pairs of dof vectors ``(x, y)``.

    Raises NonPositiveGap if some ratio is not positive.
    """
    E = model if isinstance(model, DiscreteEnergy) else DiscreteEnergy(*spaces, model)
    worst = np.inf
    for x, y in pairs:
        x = np.where(E.free, x, 0.0)
        y = np.where(E.free, y, 0.0)
        d = y - x
        den = E.norm2(d)
        if den == 0:
            continue
        gap = E.value(y) - E.value(x) - float(E.gradient(x) @ d)
        worst = min(worst, gap / den)
    if not worst > 0:
        raise NonPositiveGap(f"convexity ratio {worst:.3e} is not positive")
    return float(worst)
