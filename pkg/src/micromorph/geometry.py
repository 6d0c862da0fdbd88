"""Polyhedral Lipschitz domains, structured tetrahedral meshes and exterior cones.

Every shipped domain is a finite union of axis-aligned boxes, so membership,
boundary distance and the exterior-cone construction are all exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import permutations

import numpy as np

from .errors import NotOnBoundary

# local edge k joins local vertices LOCAL_EDGES[k]; face i is opposite vertex i
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])

SHAPES = ("unit_cube", "l_prism", "box")


@dataclass(frozen=True)
class BoundaryFace:
    """Axis-aligned boundary rectangle ``{x[axis] == value}`` with outward normal."""

    axis: int
    value: float
    sign: int
    lo: tuple[float, float]
    hi: tuple[float, float]

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = self.sign
        return n

    @property
    def tangent_axes(self) -> tuple[int, int]:
        return tuple(k for k in range(3) if k != self.axis)

    @property
    def area(self) -> float:
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])

    def closest_point(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = x.copy()
        p[:, self.axis] = self.value
        for j, k in enumerate(self.tangent_axes):
            p[:, k] = np.clip(x[:, k], self.lo[j], self.hi[j])
        return p

    def distance(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.linalg.norm(x - self.closest_point(x), axis=1)


@dataclass(frozen=True)
class DomainSpec:
    shape: str = "unit_cube"
    dims: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.shape == "unit_cube":
            object.__setattr__(self, "dims", (1.0, 1.0, 1.0))
        elif self.shape == "l_prism":
            object.__setattr__(self, "dims", (2.0, 2.0, 1.0))
        elif min(self.dims) <= 0:
            raise ValueError("box lengths must be positive")
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))

    @classmethod
    def unit_cube(cls):
        return cls("unit_cube")

    @classmethod
    def l_prism(cls):
        return cls("l_prism")

    @classmethod
    def box(cls, a, b, c):
        return cls("box", (a, b, c))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(3), np.array(self.dims)

    @property
    def volume(self) -> float:
        a, b, c = self.dims
        return 3.0 if self.shape == "l_prism" else a * b * c

    @cached_property
    def faces(self) -> tuple[BoundaryFace, ...]:
        a, b, c = self.dims
        if self.shape != "l_prism":
            return (
                BoundaryFace(0, 0.0, -1, (0.0, 0.0), (b, c)),
                BoundaryFace(0, a, 1, (0.0, 0.0), (b, c)),
                BoundaryFace(1, 0.0, -1, (0.0, 0.0), (a, c)),
                BoundaryFace(1, b, 1, (0.0, 0.0), (a, c)),
                BoundaryFace(2, 0.0, -1, (0.0, 0.0), (a, b)),
                BoundaryFace(2, c, 1, (0.0, 0.0), (a, b)),
            )
        # cross-section (0,2)^2 minus the quadrant [1,2]x[1,2], extruded over z in (0,1)
        return (
            BoundaryFace(1, 0.0, -1, (0.0, 0.0), (2.0, 1.0)),
            BoundaryFace(0, 2.0, 1, (0.0, 0.0), (1.0, 1.0)),
            BoundaryFace(1, 1.0, 1, (1.0, 0.0), (2.0, 1.0)),
            BoundaryFace(0, 1.0, 1, (1.0, 0.0), (2.0, 1.0)),
            BoundaryFace(1, 2.0, 1, (0.0, 0.0), (1.0, 1.0)),
            BoundaryFace(0, 0.0, -1, (0.0, 0.0), (2.0, 1.0)),
            BoundaryFace(2, 0.0, -1, (0.0, 0.0), (2.0, 1.0)),
            BoundaryFace(2, 0.0, -1, (0.0, 1.0), (1.0, 2.0)),
            BoundaryFace(2, 1.0, 1, (0.0, 0.0), (2.0, 1.0)),
            BoundaryFace(2, 1.0, 1, (0.0, 1.0), (1.0, 2.0)),
        )

    @property
    def boundary_area(self) -> float:
        return float(sum(f.area for f in self.faces))

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Exact membership in the open domain, vectorized over the leading axis."""
        x = np.asarray(x, dtype=float)
        lo, hi = self.bounds
        inside = np.all((x > lo) & (x < hi), axis=-1)
        if self.shape == "l_prism":
            inside &= ~((x[..., 0] >= 1.0) & (x[..., 1] >= 1.0))
        return inside

    def distance_to_boundary(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.min([f.distance(x) for f in self.faces], axis=0)

    def center_of_removed_quadrant(self) -> np.ndarray:
        if self.shape != "l_prism":
            raise ValueError("only the L-prism has a removed quadrant")
        return np.array([1.5, 1.5, 0.5])

    def reentrant_point(self) -> np.ndarray:
        """Midpoint of the re-entrant edge (L-prism) or of the bottom face otherwise."""
        if self.shape == "l_prism":
            return np.array([1.0, 1.0, 0.5])
        a, b, _ = self.dims
        return np.array([a / 2, b / 2, 0.0])


def point_in_domain(domain: DomainSpec, x) -> bool | np.ndarray:
    res = domain.contains(x)
    return bool(res) if np.ndim(res) == 0 else res


# --------------------------------------------------------------------- meshes


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    faces: np.ndarray
    cell_edges: np.ndarray
    cell_edge_signs: np.ndarray
    cell_faces: np.ndarray
    boundary_faces: np.ndarray
    boundary_edges: np.ndarray
    boundary_vertices: np.ndarray
    domain: DomainSpec | None = field(default=None)

    @classmethod
    def from_tets(cls, vertices, tets, domain=None) -> "Mesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        tets = np.array(tets, dtype=np.int64)
        vol = _signed_volumes(vertices, tets)
        flip = vol < 0
        tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()

        nc = len(tets)
        pairs = tets[:, LOCAL_EDGES]  # (nc, 6, 2)
        lo = pairs.min(axis=2)
        hi = pairs.max(axis=2)
        edges, cell_edges = np.unique(
            np.stack([lo.ravel(), hi.ravel()], axis=1), axis=0, return_inverse=True
        )
        cell_edges = cell_edges.reshape(nc, 6)
        signs = np.where(pairs[:, :, 0] < pairs[:, :, 1], 1, -1).astype(np.int8)

        tri = np.sort(tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
        faces, cell_faces, counts = np.unique(
            tri, axis=0, return_inverse=True, return_counts=True
        )
        cell_faces = cell_faces.reshape(nc, 4)
        bface = counts == 1

        bvert = np.zeros(len(vertices), dtype=bool)
        bvert[faces[bface].ravel()] = True
        bf = faces[bface]
        bedge_pairs = np.concatenate([bf[:, [0, 1]], bf[:, [0, 2]], bf[:, [1, 2]]])
        nv = len(vertices)
        keys = edges[:, 0] * nv + edges[:, 1]
        bedge = np.zeros(len(edges), dtype=bool)
        bedge[np.searchsorted(keys, bedge_pairs[:, 0] * nv + bedge_pairs[:, 1])] = True
        return cls(
            vertices, tets, edges, faces, cell_edges, signs, cell_faces,
            bface, bedge, bvert, domain,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.tets)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def volumes(self) -> np.ndarray:
        return _signed_volumes(self.vertices, self.tets)

    @cached_property
    def barycentric_maps(self) -> np.ndarray:
        """(nc, 4, 4) matrices A with ``lambda = A @ [x, 1]``."""
        v = self.vertices[self.tets]
        jac = np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))
        jinv = np.linalg.inv(jac)  # rows: grad lambda_1..3
        A = np.empty((self.n_cells, 4, 4))
        A[:, 1:, :3] = jinv
        A[:, 1:, 3] = -np.einsum("cij,cj->ci", jinv, v[:, 0])
        A[:, 0, :3] = -jinv.sum(axis=1)
        A[:, 0, 3] = 1.0 - A[:, 1:, 3].sum(axis=1)
        return A

    @cached_property
    def grad_lambda(self) -> np.ndarray:
        """(nc, 4, 3) constant gradients of the barycentric coordinates."""
        return np.ascontiguousarray(self.barycentric_maps[:, :, :3])

    @cached_property
    def face_heights(self) -> np.ndarray:
        """(nc, 4) reciprocal gradient norms: distance = lambda_i * height_i."""
        return 1.0 / np.linalg.norm(self.grad_lambda, axis=2)

    @cached_property
    def h_max(self) -> float:
        e = self.vertices[self.edges]
        return float(np.linalg.norm(e[:, 1] - e[:, 0], axis=1).max())

    def boundary_area(self) -> float:
        tri = self.vertices[self.faces[self.boundary_faces]]
        cr = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return float(0.5 * np.linalg.norm(cr, axis=1).sum())

    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    # ----------------------------------------------------------- point location

    @cached_property
    def _buckets(self):
        v = self.vertices[self.tets]
        cmin, cmax = v.min(axis=1), v.max(axis=1)
        origin = self.vertices.min(axis=0)
        extent = self.vertices.max(axis=0) - origin
        size = max(float(np.median(np.max(cmax - cmin, axis=1))), 1e-12)
        shape = np.maximum(np.ceil(extent / size).astype(int), 1)
        lo = np.clip(np.floor((cmin - origin) / size).astype(int), 0, shape - 1)
        hi = np.clip(np.floor((cmax - origin) / size).astype(int), 0, shape - 1)
        span = (hi - lo).max(axis=0) + 1
        pairs_b, pairs_c = [], []
        cells = np.arange(self.n_cells)
        for di in range(span[0]):
            for dj in range(span[1]):
                for dk in range(span[2]):
                    idx = lo + np.array([di, dj, dk])
                    ok = np.all(idx <= hi, axis=1)
                    b = np.ravel_multi_index(idx[ok].T, shape)
                    pairs_b.append(b)
                    pairs_c.append(cells[ok])
        b = np.concatenate(pairs_b)
        c = np.concatenate(pairs_c)
        order = np.lexsort((c, b))
        b, c = b[order], c[order]
        nb = int(np.prod(shape))
        counts = np.bincount(b, minlength=nb)
        width = int(counts.max())
        table = -np.ones((nb, width), dtype=np.int64)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(b)) - start[b]
        table[b, slot] = c
        return origin, size, shape, table

    def barycentric(self, cells, points) -> np.ndarray:
        """Barycentric coordinates of ``points`` with respect to the given cells."""
        A = self.barycentric_maps[cells]
        return np.einsum("nij,nj->ni", A[:, :, :3], points) + A[:, :, 3]

    def locate(self, points, tol: float = 1e-12, chunk: int = 8192):
        """Containing cell and barycentric coordinates for each point.

        Points on shared faces go to the containing cell with the lowest id;
        points outside the mesh get cell ``-1``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(pts)
        cells = -np.ones(n, dtype=np.int64)
        bary = np.zeros((n, 4))
        origin, size, shape, table = self._buckets
        A = self.barycentric_maps
        for s in range(0, n, chunk):
            p = pts[s:s + chunk]
            ijk = np.clip(np.floor((p - origin) / size).astype(int), 0, shape - 1)
            slack = 1e-9 * size
            valid = np.all((p >= origin - slack) & (p <= origin + shape * size + slack), axis=1)
            cand = table[np.ravel_multi_index(ijk.T, shape)]
            cand[~valid] = -1
            ph = np.concatenate([p, np.ones((len(p), 1))], axis=1)
            lam = np.einsum("nkij,nj->nki", A[np.maximum(cand, 0)], ph)
            ok = np.all(lam >= -tol, axis=2) & (cand >= 0)
            first = np.argmax(ok, axis=1)
            found = ok[np.arange(len(p)), first]
            cells[s:s + chunk] = np.where(found, cand[np.arange(len(p)), first], -1)
            bary[s:s + chunk] = lam[np.arange(len(p)), first]
        bary[cells < 0] = 0.0
        return cells, bary


def _signed_volumes(vertices, tets):
    v = vertices[tets]
    return np.einsum(
        "ci,ci->c", np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), v[:, 3] - v[:, 0]
    ) / 6.0


def _kuhn_block(counts, spacing, keep=None):
    """Structured grid over [0, counts*spacing] with 6 Kuhn tets per cell."""
    nx, ny, nz = counts
    gx, gy, gz = (np.arange(c + 1) * spacing for c in counts)
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    vid = np.arange(len(verts)).reshape(nx + 1, ny + 1, nz + 1)
    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = np.stack([I.ravel(), J.ravel(), K.ravel()], axis=1)
    if keep is not None:
        base = base[keep((base + 0.5) * spacing)]
    tets = []
    for perm in permutations(range(3)):
        path = [base.copy()]
        cur = base.copy()
        for axis in perm:
            cur = cur.copy()
            cur[:, axis] += 1
            path.append(cur)
        tets.append(np.stack([vid[p[:, 0], p[:, 1], p[:, 2]] for p in path], axis=1))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    used = np.unique(tets)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[tets]


def build_mesh(domain: DomainSpec, n: int) -> Mesh:
    """Structured Kuhn mesh with ``n`` subdivisions per unit length."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h = 1.0 / n
    if domain.shape == "box":
        counts = [max(1, int(round(d * n))) for d in domain.dims]
        verts, tets = _kuhn_block(counts, 1.0)
        verts = verts * (np.array(domain.dims) / np.array(counts))
    else:
        counts = [int(round(d * n)) for d in domain.dims]
        keep = domain.contains if domain.shape == "l_prism" else None
        verts, tets = _kuhn_block(counts, h, keep)
    return Mesh.from_tets(verts, tets, domain)


_OPPOSITE = np.array([5, 4, 3, 2, 1, 0])  # midpoint of edge k is opposite midpoint 5-k


def refine(mesh: Mesh) -> Mesh:
    """Uniform 1:8 red refinement; old vertices keep their ids."""
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    verts = np.concatenate([mesh.vertices, mids])
    t = mesh.tets
    m = nv + mesh.cell_edges  # (nc, 6) midpoint ids in LOCAL_EDGES order
    m01, m02, m03, m12, m13, m23 = m.T
    children = [
        np.stack([t[:, 0], m01, m02, m03], axis=1),
        np.stack([m01, t[:, 1], m12, m13], axis=1),
        np.stack([m02, m12, t[:, 2], m23], axis=1),
        np.stack([m03, m13, m23, t[:, 3]], axis=1),
    ]
    # octahedron split along its shortest diagonal; diagonals join midpoint k and 5-k
    diag_len = np.stack(
        [np.linalg.norm(verts[m[:, k]] - verts[m[:, 5 - k]], axis=1) for k in range(3)],
        axis=1,
    )
    choice = np.argmin(np.round(diag_len, 12), axis=1)
    rows = np.arange(mesh.n_cells)
    a = m[rows, choice]
    b = m[rows, 5 - choice]
    # equator cycle p, q, opp(p), opp(q)
    p_idx = np.where(choice == 0, 1, 0)
    q_idx = np.where(choice == 2, 1, 2)
    p, q = m[rows, p_idx], m[rows, q_idx]
    op, oq = m[rows, _OPPOSITE[p_idx]], m[rows, _OPPOSITE[q_idx]]
    for c0, c1 in ((p, q), (q, op), (op, oq), (oq, p)):
        children.append(np.stack([a, b, c0, c1], axis=1))
    tets = np.stack(children, axis=1).reshape(-1, 4)
    return Mesh.from_tets(verts, tets, mesh.domain)


def refine_times(mesh: Mesh, k: int) -> Mesh:
    for _ in range(k):
        mesh = refine(mesh)
    return mesh


# --------------------------------------------------------------------- cones


@dataclass(frozen=True)
class ConeSpec:
    """Exterior cone ``x0 + {d : angle(d, axis) < half_angle, |d| < rho}``.

    ``radius`` is the size of the boundary neighbourhood B_radius(x0) in which
    every boundary point admits the same cone.
    """

    axis: np.ndarray
    half_angle: float
    rho: float
    x0: np.ndarray
    radius: float

    def contains_direction(self, h) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=float))
        nh = np.linalg.norm(h, axis=1)
        cosang = (h @ self.axis) / np.where(nh > 0, nh, 1.0)
        return (nh > 0) & (cosang > np.cos(self.half_angle))

    def sample(self, rng, n: int, max_length: float | None = None) -> np.ndarray:
        """Directions uniform on the spherical cap, lengths uniform in (0, max_length)."""
        e1, e2 = _frame(self.axis)
        cos_t = 1.0 - rng.random(n) * (1.0 - np.cos(self.half_angle))
        cos_t = np.minimum(cos_t, 1.0)
        sin_t = np.sqrt(1.0 - cos_t**2)
        psi = 2 * np.pi * rng.random(n)
        d = (cos_t[:, None] * self.axis
             + sin_t[:, None] * (np.cos(psi)[:, None] * e1 + np.sin(psi)[:, None] * e2))
        length = (self.rho if max_length is None else max_length) * (1.0 - rng.random(n))
        return d * length[:, None]


def _frame(axis):
    axis = np.asarray(axis, dtype=float)
    ref = np.eye(3)[int(np.argmin(np.abs(axis)))]
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


ACTIVE_DISTANCE = 0.25
CONE_RHO = 0.1


def exterior_cone(domain: DomainSpec, x0, tol: float = 1e-12) -> ConeSpec:
    """Exterior cone at a boundary point.

    Faces closer than ``ACTIVE_DISTANCE`` to ``x0`` are active; the axis is the
    normalized sum of their outward normals.  The neighbourhood radius is chosen
    so that every face reachable within ``radius + rho`` is active, hence every
    short shift inside the cone leaves the domain through an active face.
    """
    x0 = np.asarray(x0, dtype=float)
    dist = np.array([f.distance(x0)[0] for f in domain.faces])
    if dist.min() > tol:
        raise NotOnBoundary(f"point {x0.tolist()} is {dist.min():.3g} away from the boundary")
    scale = min(1.0, min(domain.dims))
    d_act = ACTIVE_DISTANCE * scale
    rho = CONE_RHO * scale
    active = dist <= d_act
    normals = np.unique(np.array([f.normal for f, a in zip(domain.faces, active) if a]), axis=0)
    axis = normals.sum(axis=0)
    axis /= np.linalg.norm(axis)
    half_angle = np.pi / 4 if len(normals) == 1 else np.pi / 8
    assert np.all(np.arcsin(normals @ axis) >= half_angle - 1e-14)
    gap = dist[~active].min() if np.any(~active) else np.inf
    radius = float(min(0.45 * scale, gap - rho))
    return ConeSpec(axis, half_angle, rho, x0, radius)


def sample_boundary_near(domain: DomainSpec, center, radius, rng, n: int) -> np.ndarray:
    """Uniform-ish samples of the boundary inside B_radius(center)."""
    center = np.asarray(center, dtype=float)
    faces = [f for f in domain.faces if f.distance(center)[0] < radius]
    out = []
    need = n
    while need > 0:
        k = rng.integers(len(faces), size=4 * need)
        pts = np.empty((4 * need, 3))
        for i, f in enumerate(faces):
            sel = k == i
            m = int(sel.sum())
            p = np.empty((m, 3))
            p[:, f.axis] = f.value
            for j, ax in enumerate(f.tangent_axes):
                lo = max(f.lo[j], center[ax] - radius)
                hi = min(f.hi[j], center[ax] + radius)
                p[:, ax] = lo + (hi - lo) * rng.random(m)
            pts[sel] = p
        pts = pts[np.linalg.norm(pts - center, axis=1) < radius]
        out.append(pts[:need])
        need -= len(out[-1])
    return np.concatenate(out)


def cone_test(domain: DomainSpec, cone: ConeSpec, rng, n: int = 1000) -> int:
    """Count violations of ``x + h not in domain`` over sampled boundary points and shifts."""
    x = sample_boundary_near(domain, cone.x0, cone.radius, rng, n)
    h = cone.sample(rng, n)
    return int(np.count_nonzero(domain.contains(x + h)))
