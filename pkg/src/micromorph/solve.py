"""Minimizers of E(v, Q) = W(v, Q) - <f, v> - <M, Q> on the constrained discrete spaces."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from .energy import DiscreteEnergy, LinearCoefficients, NonlinearParams
from .errors import LineSearchStall, NoConvergence, ZeroLoad
from .fespace import FieldP, FieldU, H1VectorSpace, HCurlTensorSpace, apply_essential_bc, norms, rule_points
from .geometry import Mesh
from .loads import LoadSpec


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = 0.0  # relative E-L residual on free dofs
    energy: float = 0.0
    norm_u_h1: float = 0.0
    norm_p_hcurl: float = 0.0
    apriori_ratio: float | None = None
    converged: bool = True
    energy_history: list = field(default_factory=list, repr=False)

    def to_dict(self, history: bool = False) -> dict:
        d = asdict(self)
        if not history:
            d.pop("energy_history")
        return d


def spaces(mesh: Mesh):
    return H1VectorSpace(mesh), HCurlTensorSpace(mesh)


def load_vector(u_space, p_space, loads: LoadSpec, order: int = 4) -> np.ndarray:
    m = u_space.mesh
    cid, bary, x, w = rule_points(m, order)
    f = np.asarray(loads.f(x), dtype=float).reshape(-1, 3)
    nv, ne = m.n_vertices, m.n_edges
    bu = np.zeros(3 * nv)
    tets = m.tets[cid]
    for c in range(3):
        bu[c * nv:(c + 1) * nv] = np.bincount(tets.ravel(), (bary * (w * f[:, c])[:, None]).ravel(),
                                              minlength=nv)
    M = np.asarray(loads.M(x), dtype=float).reshape(-1, 3, 3)
    W = p_space.whitney(cid, bary)  # (N, 6, 3)
    edges = m.cell_edges[cid]
    bp = np.zeros(3 * ne)
    for r in range(3):
        vals = np.einsum("nkj,nj->nk", W, M[:, r, :]) * w[:, None]
        bp[r * ne:(r + 1) * ne] = np.bincount(edges.ravel(), vals.ravel(), minlength=ne)
    return np.concatenate([bu, bp])


def _jacobi(A):
    d = A.diagonal().copy()
    d[d == 0] = 1.0
    return d


def pcg(A, b, tol: float = 1e-10, x0=None, max_iter: int = 100_000, restarts: int = 20):
    """Jacobi-preconditioned CG, restarted until ``|b - A x| <= tol |b|``.

    Returns ``(x, iterations)``.
    """
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0:
        return np.zeros_like(b), 0
    prec = sp.diags(1.0 / _jacobi(A))
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    res = np.inf
    for _ in range(restarts):
        x, info = cg(A, b, x0=x, rtol=0.5 * tol, atol=0.0, maxiter=max_iter, M=prec, callback=count)
        res = np.linalg.norm(b - A @ x) / bnorm
        if res <= tol:
            return x, iters
        if info > 0 and iters >= max_iter:
            break
    raise NoConvergence(f"CG stopped at relative residual {res:.2e} after {iters} iterations")


def _report(E: DiscreteEnergy, x, b, loads, iterations, residual, history=None):
    u, P = E.split(x)
    nu, npn = norms(u), norms(P)
    rep = SolveReport(iterations=iterations, residual=residual,
                      energy=E.value(x) - float(b @ x), norm_u_h1=nu["H1"],
                      norm_p_hcurl=npn["HCurl"], energy_history=history or [])
    try:
        rep.apriori_ratio = apriori_check(u, P, loads)
    except ZeroLoad:
        rep.apriori_ratio = None
    return u, P, rep


def _model_energy(mesh, model) -> DiscreteEnergy:
    U, Pp = spaces(mesh)
    return DiscreteEnergy(U, Pp, model)


def solve_linear(mesh: Mesh, coeffs: LinearCoefficients | None, loads: LoadSpec,
                 tol: float = 1e-10, max_iter: int = 100_000, energy: DiscreteEnergy | None = None):
    """One SPD solve of the block system by Jacobi-preconditioned CG."""
    coeffs = coeffs or LinearCoefficients.identity()
    E = energy or _model_energy(mesh, coeffs)
    b = load_vector(E.u_space, E.p_space, loads) * E.free
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return _report(E, x, b, loads, 0, 0.0)
    A, rhs = apply_essential_bc(E.quadratic, b, ~E.free)
    x, iters = pcg(A, rhs, tol=tol, max_iter=max_iter)
    return _report(E, x, b, loads, iters, el_residual(E, x, b, relative=True))


def solve_nonlinear(mesh: Mesh, params: NonlinearParams, loads: LoadSpec, tol: float = 1e-8,
                    max_iter: int = 10_000, x0=None, energy: DiscreteEnergy | None = None,
                    c_armijo: float = 1e-4, max_backtracks: int = 60, precond: str = "auto"):
    """Preconditioned gradient descent with Barzilai-Borwein steps and Armijo backtracking.

    ``precond`` picks the metric of the descent: ``"jacobi"`` (diagonal of the
    quadratic part) or ``"linear"`` (a sparse LU of the quadratic part, so the
    iteration only has to resolve the nonlinear term).  ``"auto"`` uses the LU
    up to 60000 free dofs.

    Stops when the Jacobi-preconditioned gradient norm falls below ``tol``
    times its value at the zero state (the preconditioned load), so that the
    stopping test does not depend on the starting guess or the metric.
    """
    E = energy or _model_energy(mesh, params)
    b = load_vector(E.u_space, E.p_space, loads) * E.free
    free = E.free
    d = _jacobi(E.quadratic)
    dinv = np.where(free, 1.0 / d, 0.0)
    x = np.zeros_like(b) if x0 is None else np.where(free, x0, 0.0)
    fi = np.flatnonzero(free)
    if precond == "auto":
        precond = "linear" if len(fi) <= 60_000 else "jacobi"
    if precond == "linear":
        Kf = E.quadratic.tocsc()[fi][:, fi].tocsc()
        lu = splu(Kf, permc_spec="COLAMD")

        def apply_prec(g):
            out = np.zeros_like(g)
            out[fi] = lu.solve(g[fi])
            return out

        def metric(s_):
            return float(s_[fi] @ (Kf @ s_[fi]))
    elif precond == "jacobi":
        def apply_prec(g):
            return dinv * g

        def metric(s_):
            return float(s_ @ (d * s_))
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")

    def obj(z):
        return E.value(z) - float(b @ z)

    def grad(z):
        return (E.gradient(z) - b) * free

    ref = float(np.sqrt(b @ (dinv * b)))
    if ref == 0:
        # zero loads: the zero state is the unique minimizer
        x = np.zeros_like(b)
        return _report(E, x, b, loads, 0, 0.0, [0.0])
    e, g = obj(x), grad(x)
    pg = apply_prec(g)
    pnorm = float(np.sqrt(g @ (dinv * g)))
    history = [e]
    step = 1.0
    it = 0
    while pnorm > tol * ref:
        if it >= max_iter:
            raise NoConvergence(f"no convergence in {max_iter} iterations (rel. gradient {pnorm / ref:.2e})")
        it += 1
        slope = -float(g @ pg)
        t = step
        for _ in range(max_backtracks):
            de = E.change(x, -pg, t, b)
            if de <= c_armijo * t * slope:
                break
            t *= 0.5
        else:
            raise LineSearchStall(f"Armijo backtracking failed at iteration {it}")
        xn = x - t * pg
        gn = grad(xn)
        s_, y_ = xn - x, gn - g
        sy = float(s_ @ y_)
        # BB1 step in the chosen metric
        step = metric(s_) / sy if sy > 0 else 1.0
        x, g, e = xn, gn, e + de
        pg = apply_prec(g)
        pnorm = float(np.sqrt(max(g @ (dinv * g), 0.0)))
        history.append(e)
    return _report(E, x, b, loads, it, pnorm / ref, history)


def el_residual(energy: DiscreteEnergy, x, b, relative: bool = False) -> float:
    """Norm of ``DW(x) - b`` on free dofs; divided by ``|b|`` if ``relative``."""
    r = (energy.gradient(x) - b) * energy.free
    n = float(np.linalg.norm(r))
    if relative:
        bn = float(np.linalg.norm(b * energy.free))
        return n / bn if bn > 0 else n
    return n


def el_residual_fields(u: FieldU, P: FieldP, model, loads: LoadSpec, relative: bool = False) -> float:
    E = DiscreteEnergy(u.space, P.space, model)
    b = load_vector(u.space, P.space, loads) * E.free
    return el_residual(E, E.pack(u, P), b, relative)


def load_norms(mesh: Mesh, loads: LoadSpec, order: int = 4) -> dict:
    _, _, x, w = rule_points(mesh, order)

    def l2(v):
        v = np.asarray(v, dtype=float).reshape(len(w), -1)
        return float(np.sqrt(w @ np.sum(v**2, axis=1)))

    return {"f": l2(loads.f(x)), "M": l2(loads.M(x)), "div_M": l2(loads.div_M(x))}


def apriori_check(u: FieldU, P: FieldP, loads: LoadSpec) -> float:
    """(|u|_H1 + |P|_H(Curl)) / (|f| + |M| + |Div M|)."""
    ln = load_norms(u.mesh, loads)
    den = ln["f"] + ln["M"] + ln["div_M"]
    if den == 0:
        raise ZeroLoad("a-priori ratio undefined for zero loads")
    return (norms(u)["H1"] + norms(P)["HCurl"]) / den


def l2_errors(u: FieldU, P: FieldP, exact: dict, order: int = 6) -> dict:
    """L2 errors of ``u`` and ``P`` against exact callables."""
    cid, bary, x, w = rule_points(u.mesh, order)
    eu = u.value_in(cid, bary) - exact["u"](x)
    ep = P.value_in(cid, bary) - exact["P"](x)
    ec = P.curl_in(cid) - exact["CurlP"](x)
    return {
        "u": float(np.sqrt(w @ np.sum(eu**2, axis=1))),
        "P": float(np.sqrt(w @ np.sum(ep.reshape(len(w), -1) ** 2, axis=1))),
        "CurlP": float(np.sqrt(w @ np.sum(ec.reshape(len(w), -1) ** 2, axis=1))),
    }
