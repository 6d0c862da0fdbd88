"""Helmholtz splitting, the discrete incompatible Korn constant and difference-quotient regularity probes."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import splu
from scipy import stats

from .energy import NonlinearParams
from .errors import EmptyInteriorRegion, NoConvergence
from .fespace import H1ScalarSpace, HCurlTensorSpace, FieldP, FieldU, apply_essential_bc, assemble, rule_points
from .geometry import DomainSpec, Mesh, build_mesh
from .loads import LoadSpec
from .solve import pcg, solve_linear, solve_nonlinear
from .transform import InnerVariation, dyadic_sweep

# ------------------------------------------------------------------ Helmholtz


def _edge_field(mesh: Mesh, coeffs):
    """Evaluator ``(cells, bary) -> (N, 3)`` of a scalar-row Whitney field."""
    space = HCurlTensorSpace(mesh)
    coeffs = np.asarray(coeffs, dtype=float)

    def at(cells, bary):
        W = space.whitney(cells, bary)
        return np.einsum("nk,nkj->nj", coeffs[mesh.cell_edges[cells]], W)

    return at


@dataclass
class HelmholtzSplit:
    """``p = D v + q`` with ``v`` in P1 (zero on the boundary) and ``q`` weakly divergence-free."""

    mesh: Mesh
    v: np.ndarray
    p_at: Callable = field(repr=False)  # (cells, bary, x) -> p
    div_residual: float = 0.0  # max_i |<q, D w_i>| / |<p, D w_i>|
    norms: dict = field(default_factory=dict)
    iterations: int = 0

    def grad_v(self, cells) -> np.ndarray:
        return H1ScalarSpace(self.mesh).gradient(self.v, cells)

    def p(self, x) -> np.ndarray:
        cells, bary = self.mesh.locate(np.atleast_2d(x))
        return self.p_at(cells, bary, np.atleast_2d(x))

    def q(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        cells, bary = self.mesh.locate(x)
        return self.p_at(cells, bary, x) - self.grad_v(cells)

    @property
    def cross(self) -> float:
        """``<D v, q>`` relative to ``|p|^2``."""
        pp = self.norms["p"]
        return abs(self.norms["cross"]) / pp if pp > 0 else 0.0


def helmholtz_decompose(mesh: Mesh, p, tol: float = 1e-10, order: int = 4) -> HelmholtzSplit:
    """Split ``p`` (callable, or coefficients of one row of the edge space) as ``D v + q``."""
    if callable(p):
        p_at = lambda cells, bary, x: np.asarray(p(x), dtype=float).reshape(-1, 3)
    else:
        ev = _edge_field(mesh, p)
        p_at = lambda cells, bary, x: ev(cells, bary)
    S = H1ScalarSpace(mesh)
    cid, bary, x, w = rule_points(mesh, order)
    pv = p_at(cid, bary, x)
    g = mesh.grad_lambda[cid]
    b = np.bincount(mesh.tets[cid].ravel(), np.einsum("nk,nik->ni", pv * w[:, None], g).ravel(),
                    minlength=mesh.n_vertices)
    K = S.stiffness()
    A, rhs = apply_essential_bc(K, b, S.boundary_mask)
    v, iters = pcg(A, rhs, tol=tol)
    v[S.boundary_mask] = 0.0
    dv = S.gradient(v, cid)
    q = pv - dv
    free = ~S.boundary_mask
    r = np.abs((b - K @ v)[free])
    bmax = np.abs(b[free]).max() if free.any() else 0.0
    nrm = {
        "p": float(w @ np.sum(pv**2, 1)),
        "Dv": float(w @ np.sum(dv**2, 1)),
        "q": float(w @ np.sum(q**2, 1)),
        "cross": float(w @ np.sum(dv * q, 1)),
    }
    return HelmholtzSplit(mesh, v, p_at, float(r.max() / bmax) if bmax > 0 else 0.0, nrm, iters)


# ------------------------------------------------------------------- Korn


@dataclass
class KornResult:
    c_tilde: float
    lam_min: float
    vector: np.ndarray = field(repr=False)  # full-length P coefficients, B-normalized
    iterations: int = 0  # inner linear solves
    n_dofs: int = 0


def korn_matrices(p_space: HCurlTensorSpace):
    """``A`` (sym-mass + curl-curl) and ``B`` (mass) restricted to the free edge dofs."""
    A = 0.5 * assemble("symP_symP", None, p_space=p_space) + assemble("curlcurl", None, p_space=p_space)
    B = assemble("mass_P", None, p_space=p_space)
    free = ~p_space.boundary_mask
    return A[free][:, free].tocsr(), B[free][:, free].tocsr(), free


def rayleigh_ratio(p_space: HCurlTensorSpace, coeffs, matrices=None) -> float:
    """``|P|^2 / (|sym P|^2 + |Curl P|^2)`` for a field vanishing tangentially on the boundary."""
    A, B, free = matrices or korn_matrices(p_space)
    x = np.asarray(coeffs, dtype=float)[free]
    return float(x @ (B @ x)) / float(x @ (A @ x))


def korn_eigen(mesh: Mesh, tol: float = 1e-8, shift: float = 0.0, krylov: int = 120,
               max_restarts: int = 30, inner: str = "auto", inner_tol: float = 1e-12,
               seed: int = 0) -> KornResult:
    """Smallest eigenvalue of ``A x = lam B x`` by shifted inverse iteration.

    The iterates ``(A - shift B)^-1 B x`` are combined by Lanczos in the B
    inner product, which matters because the spectrum clusters just above its
    minimum.  Restarts keep the best Ritz vector.  The inner solves use a
    sparse factorization up to ``20000`` unknowns (``inner="auto"``) and
    Jacobi-preconditioned CG otherwise.  Stops when the residual bound
    ``res^2 / gap`` on the inverted eigenvalue is below ``tol`` (relative).
    """
    space = HCurlTensorSpace(mesh)
    A, B, free = korn_matrices(space)
    n = A.shape[0]
    As = (A - shift * B).tocsr() if shift else A
    if inner == "auto":
        inner = "lu" if n <= 20_000 else "cg"
    if inner == "lu":
        lu = splu(As.tocsc())
        solve = lu.solve
    else:
        solve = lambda r: pcg(As, r, tol=inner_tol)[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    solves = 0
    vec = None
    for _ in range(max_restarts):
        m = min(krylov, n)
        Q = np.zeros((m + 1, n))
        BQ = np.zeros((m + 1, n))
        alpha, beta = np.zeros(m), np.zeros(m)
        bx = B @ x
        nrm = np.sqrt(x @ bx)
        Q[0], BQ[0] = x / nrm, bx / nrm
        done = False
        for j in range(m):
            w = solve(BQ[j])
            solves += 1
            alpha[j] = BQ[j] @ w
            # full reorthogonalization in the B inner product, twice
            for _ in range(2):
                w -= Q[:j + 1].T @ (BQ[:j + 1] @ w)
            bw = B @ w
            beta[j] = np.sqrt(max(w @ bw, 0.0))
            theta, S = _ritz(alpha[:j + 1], beta[:j])
            mu = theta[-1]
            res = abs(beta[j] * S[-1, -1])
            gap = theta[-1] - theta[-2] if j else mu
            k_used = j + 1
            if beta[j] <= 1e-14 * mu or (j >= 2 and res**2 <= 0.1 * tol * mu * max(gap, 1e-3 * mu)
                                         and res <= 1e-3 * mu):
                done = True
                break
            Q[j + 1], BQ[j + 1] = w / beta[j], bw / beta[j]
        x = S[:, -1] @ Q[:k_used]
        if done:
            vec = x
            break
    if vec is None:
        raise NoConvergence(f"Korn eigenvalue not converged after {max_restarts} restarts")
    # one more inverse step damps the high end of the spectrum before the
    # Rayleigh quotient of the original pencil is taken
    vec = solve(B @ vec)
    solves += 1
    lam = float(vec @ (As @ vec)) / float(vec @ (B @ vec)) + shift
    full = np.zeros(space.ndof)
    full[free] = vec / np.sqrt(vec @ (B @ vec))
    return KornResult(1.0 / lam, lam, full, solves, n)


def _ritz(alpha, beta):
    if len(alpha) == 1:
        return alpha.copy(), np.ones((1, 1))
    return scipy.linalg.eigh_tridiagonal(alpha, beta)


def korn_constant(mesh: Mesh, tol: float = 1e-8, **kw) -> float:
    """``c_h = 1 / lam_min``: the best constant in ``|P|^2 <= c (|sym P|^2 + |Curl P|^2)`` on the mesh."""
    return korn_eigen(mesh, tol=tol, **kw).c_tilde


def korn_study(domain: DomainSpec, levels=(2, 4, 8), tol: float = 1e-8, probes: int = 20,
               seed: int = 0) -> dict:
    """Korn constants over nested meshes plus Rayleigh ratios of random and gradient probes."""
    from .fespace import H1VectorSpace, gradient_to_edges

    rng = np.random.default_rng(seed)
    rows = []
    for n in levels:
        mesh = build_mesh(domain, n)
        res = korn_eigen(mesh, tol=tol, seed=seed)
        space = HCurlTensorSpace(mesh)
        mats = korn_matrices(space)
        ratios = []
        for i in range(probes):
            if i % 2 == 0:
                c = rng.standard_normal(space.ndof)
            else:
                U = H1VectorSpace(mesh)
                uc = rng.standard_normal(U.ndof) * ~U.boundary_mask
                c = gradient_to_edges(space, FieldU(U, uc)).coeffs
            c = c * ~space.boundary_mask
            ratios.append(rayleigh_ratio(space, c, mats))
        ratios.append(rayleigh_ratio(space, res.vector, mats))
        rows.append({"level": int(n), "n_dofs": res.n_dofs, "c_tilde": res.c_tilde,
                     "lam_min": res.lam_min, "solves": res.iterations,
                     "max_probe_ratio": float(max(ratios))})
    c = [r["c_tilde"] for r in rows]
    # non-decrease up to the eigenvalue tolerance
    monotone = all(b >= a * (1 - 1e-8) for a, b in zip(c, c[1:]))
    increment = (c[-1] - c[-2]) / c[-2] if len(c) > 1 else 0.0
    rayleigh_ok = all(r["max_probe_ratio"] <= r["c_tilde"] + 1e-8 for r in rows)
    return {"rows": rows, "monotone": monotone, "final_increment": float(increment),
            "rayleigh_ok": rayleigh_ok,
            "verdicts": {"monotone": monotone, "increment_le_10pct": increment <= 0.10,
                         "rayleigh_bound": rayleigh_ok}}


# ------------------------------------------------------------ Besov probes


def sample_grid(domain: DomainSpec, grid: int, rng=None):
    """Points of a uniform grid of cells over the bounding box, one per cell, inside ``domain``.

    ``grid`` is the number of cells per unit length.  With ``rng`` each point
    is drawn uniformly in its cell (stratified); otherwise cell midpoints.
    Returns ``(points, cell_volume)``.
    """
    lo, hi = domain.bounds
    counts = np.maximum(1, np.ceil((hi - lo) * grid).astype(int))
    step = (hi - lo) / counts
    idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), -1).reshape(-1, 3)
    if rng is None:
        off = 0.5
    else:
        off = np.random.default_rng(rng).random(idx.shape)
    pts = lo + (idx + off) * step
    return pts[domain.contains(pts)], float(np.prod(step))


def _interior(domain, pts, eta):
    keep = domain.distance_to_boundary(pts) > eta
    if not keep.any():
        raise EmptyInteriorRegion(f"no sample point farther than {eta:g} from the boundary")
    return pts[keep]


def _check_shift(h, eta):
    nh = float(np.linalg.norm(h))
    if not 0 < nh < eta:
        raise ValueError(f"need 0 < |h| < eta, got |h| = {nh:g}, eta = {eta:g}")
    return nh


def _difference_integral(sampler, pts, vol, h, base=None):
    a = np.asarray(sampler(pts), dtype=float).reshape(len(pts), -1) if base is None else base
    b = np.asarray(sampler(pts + h), dtype=float).reshape(len(pts), -1)
    return float(vol * np.sum((b - a) ** 2))


def besov_quotient(sampler, m: int, sigma: float, h, eta: float, grid: int = 64,
                   domain: DomainSpec | None = None, rng=0) -> float:
    """``|h|^(-2 sigma) int_{Omega_eta} |f(x + h) - f(x)|^2 dx`` by a grid rule.

    ``sampler`` returns the derivative ``D^alpha`` of order ``m`` already, so
    ``m`` only labels the result.
    """
    if m not in (0, 1):
        raise ValueError("m must be 0 or 1")
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    domain = domain or DomainSpec.unit_cube()
    h = np.asarray(h, dtype=float)
    nh = _check_shift(h, eta)
    pts, vol = sample_grid(domain, grid, rng)
    pts = _interior(domain, pts, eta)
    return _difference_integral(sampler, pts, vol, h) / nh ** (2 * sigma)


@dataclass
class ProbeReport:
    name: str
    m: int
    sigma: float  # exponent used in the quotient column
    rows: list = field(default_factory=list)  # k, h, direction, integral, quotient
    beta: float | None = None
    s_raw: float | None = None
    s_est: float | None = None
    band: tuple | None = None  # 95% band of s (before capping)
    bounded: bool | None = None
    status: str = "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        d["band"] = list(self.band) if self.band is not None else None
        return d

    def write_csv(self, path) -> None:
        cols = ["k", "h", "direction", "integral", "quotient"]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.rows:
                wr.writerow([f"{r[c]:.12e}" if isinstance(r[c], float) else r[c] for c in cols])


def fit_slope(log_h, log_i):
    """Least-squares slope, its standard error and the t-based 95% half width."""
    x, y = np.asarray(log_h), np.asarray(log_i)
    res = stats.linregress(x, y)
    dof = len(x) - 2
    half = stats.t.ppf(0.975, dof) * res.stderr if dof > 0 else np.inf
    return float(res.slope), float(res.stderr), float(half)


def regularity_index(sampler, m: int, domain: DomainSpec | None = None, h_bar: float = 0.25,
                     ks=range(2, 7), grid: int = 64, rng=0, sigma: float = 0.5,
                     name: str = "field", directions=None, scale: float | None = None,
                     zero_tol: float = 1e-8) -> ProbeReport:
    """Regularity index ``s = m + beta/2`` from the decay of translated differences.

    ``beta`` is the slope of ``log int_{Omega_eta} |Delta_h D^alpha f|^2``
    (averaged over the shift directions) against ``log |h|`` with
    ``h = 2^-k h_bar``; ``eta = 2 max |h|``.  ``s`` is capped at ``m + 1``.
    The field counts as zero when its squared L2 norm on the sample is below
    ``zero_tol^2 * scale`` (``scale`` defaults to exact zero).
    """
    domain = domain or DomainSpec.unit_cube()
    ks = list(ks)
    dirs = np.eye(3) if directions is None else np.asarray(directions, dtype=float)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    hs = [2.0**-k * h_bar for k in ks]
    eta = 2 * max(hs)
    pts, vol = sample_grid(domain, grid, rng)
    pts = _interior(domain, pts, eta)
    base = np.asarray(sampler(pts), dtype=float).reshape(len(pts), -1)
    rep = ProbeReport(name, m, sigma)
    means = []
    for k, nh in zip(ks, hs):
        vals = []
        for d, u in enumerate(dirs):
            integral = _difference_integral(sampler, pts, vol, nh * u, base)
            vals.append(integral)
            rep.rows.append({"k": int(k), "h": float(nh), "direction": int(d), "integral": integral,
                             "quotient": integral / nh ** (2 * sigma)})
        means.append(float(np.mean(vals)))
    means = np.array(means)
    norm2 = float(np.sum(base**2) * vol)
    if norm2 == 0 or np.all(means == 0) or (scale is not None and norm2 <= zero_tol**2 * scale):
        rep.status = "undefined (zero field)"
        return rep
    if np.any(means <= 0):
        rep.status = "undefined (vanishing differences)"
        return rep
    beta, _, half = fit_slope(np.log(hs), np.log(means))
    rep.beta = beta
    rep.s_raw = m + beta / 2
    rep.s_est = min(rep.s_raw, m + 1.0)
    rep.band = (m + (beta - half) / 2, m + (beta + half) / 2)
    q = means / np.array(hs) ** (2 * sigma)
    rep.bounded = bool(q.max() / q.min() <= 10.0)
    return rep


# ------------------------------------------------------- regularity experiment


class _Located:
    """Memoized point location for several samplers on the same point sets."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self._key = None
        self._val = None

    def __call__(self, x):
        key = hashlib.sha1(np.ascontiguousarray(x).tobytes()).hexdigest()
        if key != self._key:
            self._key, self._val = key, self.mesh.locate(x)
        return self._val


def field_samplers(u: FieldU, P: FieldP) -> dict:
    """Samplers for ``D u``, ``P`` and ``Curl P`` sharing the point location."""
    loc = _Located(u.mesh)

    def du(x):
        c, _ = loc(x)
        return u.grad_in(c)

    def pv(x):
        c, b = loc(x)
        return P.value_in(c, b)

    def cp(x):
        c, _ = loc(x)
        return P.curl_in(c)

    return {"u": du, "P": pv, "CurlP": cp}


@dataclass
class RegularityReport:
    domain: str
    model: str
    level: int
    solve: dict
    probes: dict  # name -> ProbeReport
    sweep: list  # dyadic difference-quotient rows
    verdicts: dict

    def summary(self) -> dict:
        return {"domain": self.domain, "model": self.model, "level": self.level, "solve": self.solve,
                "probes": {k: v.to_dict() for k, v in self.probes.items()},
                "sweep": self.sweep, "verdicts": self.verdicts,
                "passed": all(v is not False for v in self.verdicts.values())}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _sweep_ratio(rows):
    q = np.array([r["quotient"] for r in rows])
    if np.all(q == 0):
        return None
    if np.any(q <= 0):
        return np.inf
    return float(q.max() / q.min())


def regularity_experiment(domain: DomainSpec, model, loads: LoadSpec, levels=8, h_bar: float = 0.25,
                          ks=range(2, 7), grid: int = 64, seed: int = 0, tol_s: float = 0.15,
                          solver_tol: float | None = None, n_side: int = 128) -> RegularityReport:
    """Solve on the finest level, estimate regularity indices and sweep the inner-variation quotient.

    ``grid`` sets the probe sampling (cells per unit length) and ``n_side``
    the stratified sample of the cutoff ball used by the sweep.
    """
    level = int(np.max(np.atleast_1d(levels)))
    mesh = build_mesh(domain, level)
    if isinstance(model, NonlinearParams):
        u, P, rep = solve_nonlinear(mesh, model, loads, **({"tol": solver_tol} if solver_tol else {}))
        label = f"nonlinear(q={model.q:g}, alpha={model.alpha:g})"
    else:
        u, P, rep = solve_linear(mesh, model, loads, **({"tol": solver_tol} if solver_tol else {}))
        label = "linear"
    samplers = field_samplers(u, P)
    # fields below round-off relative to the whole solution count as zero
    scale = rep.norm_u_h1**2 + rep.norm_p_hcurl**2
    probes = {name: regularity_index(samplers[name], m, domain, h_bar, ks, grid, seed, name=name,
                                     scale=scale)
              for name, m in (("u", 1), ("P", 0), ("CurlP", 0))}
    iv = InnerVariation.at(domain, domain.reentrant_point())
    sweep = dyadic_sweep(iv, u, P, ks=ks, n_side=n_side, rng=seed)
    targets = {"u": 1.5, "P": 0.5, "CurlP": 0.5}
    verdicts = {}
    for k, t in targets.items():
        s = probes[k].s_est
        verdicts[f"s_{k}"] = None if s is None else bool(s >= t - tol_s)
    ratio = _sweep_ratio(sweep)
    verdicts["sweep_bounded"] = None if ratio is None else bool(ratio <= 10.0)
    solve_info = rep.to_dict()
    solve_info["sweep_max_over_min"] = ratio
    return RegularityReport(domain.shape, label, level, solve_info, probes, sweep, verdicts)
