"""Geodesic distance fields on the mesh surface.

Distances are shortest paths on a weighted graph solved with Dijkstra
(scipy.sparse.csgraph), which keeps every field deterministic and exactly
checkable against brute-force oracles. Two graph constructions are offered:

``edge``
    Mesh edges with Euclidean lengths. Simple and fast, but on regular
    triangulations it overestimates surface distance by up to ~15% in
    lattice-misaligned directions.

``hinge`` (default)
    Mesh edges plus one shortcut per interior edge, connecting the two
    vertices opposite it with the length measured across the unfolded
    triangle pair. The shortcut length is an exact surface path on the
    polyhedron, which cuts the worst-case directional error to ~3.5% and
    makes sphere-test errors shrink under refinement instead of plateauing.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import MeshValidationError
from .mesh import TexturedMesh

BACKENDS = ("edge", "hinge")
DEFAULT_BACKEND = "hinge"


@dataclass(frozen=True)
class GeodesicField:
    """Distances (mm) from one source vertex to every vertex; unreachable = +inf."""

    source: int
    distances: np.ndarray
    backend: str = DEFAULT_BACKEND

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        object.__setattr__(self, "distances", d)
        d.flags.writeable = False


def _hinge_shortcuts(mesh: TexturedMesh):
    """Across-edge shortcuts: for each interior edge, the unfolded distance
    between the two opposite vertices, kept only when the straight unfolded
    segment actually crosses the shared edge."""
    t = mesh.triangles
    v = mesh.vertices
    corners = np.vstack([t[:, [0, 1, 2]], t[:, [1, 2, 0]], t[:, [2, 0, 1]]])
    e = np.sort(corners[:, :2], axis=1)
    opposite = corners[:, 2]
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, opposite = e[order], opposite[order]
    same = (e[1:] == e[:-1]).all(axis=1)
    first = np.nonzero(same)[0]
    # drop non-manifold fins: keep each edge's first adjacent pair only
    keep = np.ones(len(first), dtype=bool)
    keep[1:] = ~((e[first[1:]] == e[first[:-1]]).all(axis=1))
    first = first[keep]
    u, w = e[first, 0], e[first, 1]
    a, b = opposite[first], opposite[first + 1]

    c = np.linalg.norm(v[w] - v[u], axis=1)
    ua = np.linalg.norm(v[a] - v[u], axis=1)
    wa = np.linalg.norm(v[a] - v[w], axis=1)
    ub = np.linalg.norm(v[b] - v[u], axis=1)
    wb = np.linalg.norm(v[b] - v[w], axis=1)
    # unfold both triangles into the plane of the shared edge
    with np.errstate(invalid="ignore"):
        xa = (ua**2 + c**2 - wa**2) / (2.0 * c)
        ya = np.sqrt(np.maximum(ua**2 - xa**2, 0.0))
        xb = (ub**2 + c**2 - wb**2) / (2.0 * c)
        yb = np.sqrt(np.maximum(ub**2 - xb**2, 0.0))
    ok = (ya > 0) & (yb > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        xcross = xa + (xb - xa) * ya / (ya + yb)
    ok &= (xcross > 0.0) & (xcross < c)
    length = np.hypot(xa - xb, ya + yb)
    return a[ok], b[ok], length[ok]


def build_graph(mesh: TexturedMesh, backend: str = DEFAULT_BACKEND) -> csr_matrix:
    """Symmetric sparse adjacency with edge weights in millimeters."""
    if backend not in BACKENDS:
        raise ValueError(f"unknown geodesic backend {backend!r}")
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    rows, cols, wts = e[:, 0], e[:, 1], w
    if backend == "hinge" and mesh.n_triangles:
        hr, hc, hw = _hinge_shortcuts(mesh)
        rows = np.concatenate([rows, hr])
        cols = np.concatenate([cols, hc])
        wts = np.concatenate([wts, hw])
    n = mesh.n_vertices
    rr = np.concatenate([rows, cols])
    cc = np.concatenate([cols, rows])
    ww = np.concatenate([wts, wts])
    # csr_matrix sums duplicate entries; collapse them by minimum instead
    # (a hinge shortcut can coincide with a mesh edge on degenerate geometry)
    order = np.lexsort((cc, rr))
    rr, cc, ww = rr[order], cc[order], ww[order]
    firsts = np.ones(len(rr), dtype=bool)
    firsts[1:] = (rr[1:] != rr[:-1]) | (cc[1:] != cc[:-1])
    group = np.cumsum(firsts) - 1
    wmin = np.full(int(group[-1]) + 1 if len(group) else 0, np.inf)
    np.minimum.at(wmin, group, ww)
    return csr_matrix((wmin, (rr[firsts], cc[firsts])), shape=(n, n))


class GeodesicSolver:
    """Reusable Dijkstra front-end for one mesh and backend."""

    def __init__(self, mesh: TexturedMesh, backend: str = DEFAULT_BACKEND):
        self.mesh = mesh
        self.backend = backend
        self.graph = build_graph(mesh, backend)

    def _check(self, v):
        if not (0 <= v < self.mesh.n_vertices):
            raise MeshValidationError(f"vertex {v} out of range")

    def field(self, source: int) -> GeodesicField:
        self._check(source)
        d = dijkstra(self.graph, directed=False, indices=int(source))
        return GeodesicField(source=int(source), distances=d, backend=self.backend)

    def fields(self, sources) -> list:
        return [self.field(s) for s in sources]

    def distance(self, a: int, b: int) -> float:
        self._check(a)
        self._check(b)
        if a == b:
            return 0.0
        d = dijkstra(self.graph, directed=False, indices=int(a))
        return float(d[b])

    def ball(self, source: int, radius: float):
        """Vertices with distance <= radius, with their distances.

        Returns
        -------
        (indices, distances) : ascending vertex index order.
        """
        self._check(source)
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        # small pad so vertices exactly at the radius survive the truncation
        d = dijkstra(
            self.graph, directed=False, indices=int(source), limit=float(radius) + 1e-6
        )
        idx = np.nonzero(d <= radius)[0]
        return idx, d[idx]

    def balls(self, sources, radius: float, chunk: int = 128):
        """Truncated fields for many sources; yields (source, indices, distances)."""
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        sources = np.asarray(sources, dtype=np.int64)
        for start in range(0, len(sources), chunk):
            batch = sources[start : start + chunk]
            d = dijkstra(
                self.graph, directed=False, indices=batch, limit=float(radius) + 1e-6
            )
            for row, src in enumerate(batch):
                idx = np.nonzero(d[row] <= radius)[0]
                yield int(src), idx, d[row][idx]

    def distance_matrix(self, sources) -> np.ndarray:
        """(len(sources), n) distances; rows are independent single-source fields."""
        sources = np.asarray(sources, dtype=np.int64)
        for s in sources:
            self._check(int(s))
        if len(sources) == 0:
            return np.empty((0, self.mesh.n_vertices))
        return dijkstra(self.graph, directed=False, indices=sources)


def single_source_field(
    mesh: TexturedMesh, source: int, backend: str = DEFAULT_BACKEND
) -> GeodesicField:
    """Distance field from one vertex (fresh solver; reuse GeodesicSolver in loops)."""
    return GeodesicSolver(mesh, backend).field(source)


def landmark_fields(mesh: TexturedMesh, landmarks, backend: str = DEFAULT_BACKEND) -> list:
    """One independent field per landmark, in landmark order."""
    solver = GeodesicSolver(mesh, backend)
    return solver.fields(landmarks.vertices)


def distance_between(
    mesh: TexturedMesh, a: int, b: int, backend: str = DEFAULT_BACKEND
) -> float:
    """Geodesic distance between two vertices (symmetric)."""
    return GeodesicSolver(mesh, backend).distance(a, b)
