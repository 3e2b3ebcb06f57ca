"""Per-vertex feature descriptors: landmark-distance vectors and local texture.

The geometric descriptor of a vertex is the vector of reciprocal geodesic
distances to the landmarks, so nearby landmarks dominate. The texture
descriptor is a radial-shell x intensity histogram over a geodesic patch,
rotation-invariant by construction and computed at several radii to cover
lesions of different sizes. Both families are compared with normalized
cross-correlation (cosine similarity).
"""

from dataclasses import dataclass

import numpy as np

from .geodesics import GeodesicSolver
from .mesh import TexturedMesh

DEFAULT_D_FLOOR_MM = 0.1
DEFAULT_RADII_MM = (10.0, 20.0, 40.0)
DEFAULT_RADIAL_BINS = 4
DEFAULT_INTENSITY_BINS = 16

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class LandmarkFeature:
    """Reciprocal landmark distances (1/mm) for one vertex."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        v.flags.writeable = False


@dataclass(frozen=True)
class TextureDescriptor:
    """L1-normalized (shell x intensity) histogram for one vertex and radius."""

    radius_mm: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        v.flags.writeable = False


def landmark_feature(fields, v: int, d_floor: float = DEFAULT_D_FLOOR_MM) -> LandmarkFeature:
    """Feature vector of vertex v from precomputed landmark distance fields.

    Entry i is 1 / max(distance_i(v), d_floor); the floor caps the value when
    v sits on landmark i. Landmarks unreachable from v contribute 0.
    """
    if not len(fields):
        raise ValueError("need at least one landmark field")
    d = np.array([f.distances[v] for f in fields])
    return LandmarkFeature(values=_reciprocal(d, d_floor))


def _reciprocal(distances, d_floor):
    d = np.maximum(distances, d_floor)
    with np.errstate(divide="ignore"):
        out = 1.0 / d
    return np.where(np.isfinite(d), out, 0.0)


def feature_matrix(distance_rows: np.ndarray, d_floor: float = DEFAULT_D_FLOOR_MM) -> np.ndarray:
    """Dense (n, S) feature matrix from stacked (S, n) landmark distance rows."""
    return _reciprocal(np.asarray(distance_rows), d_floor).T


def unit_rows(m: np.ndarray) -> np.ndarray:
    """Rows scaled to unit Euclidean norm; zero rows stay zero."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = m / norms
    out[norms[:, 0] == 0.0] = 0.0
    return out


def cosine_similarity(a, b) -> float:
    """Normalized cross-correlation of two nonnegative vectors, in [0, 1].

    Identical vectors score exactly 1; a zero vector scores 0 against anything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0 if not a.any() else 1.0
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), 0.0, 1.0))


def luminance(colors: np.ndarray) -> np.ndarray:
    return np.asarray(colors) @ LUMA_WEIGHTS


def _histogram(dists, values, areas, radius, radial_bins, intensity_bins):
    shell = np.minimum((dists / radius * radial_bins).astype(int), radial_bins - 1)
    lum = np.minimum((values * intensity_bins).astype(int), intensity_bins - 1)
    hist = np.zeros((radial_bins, intensity_bins))
    np.add.at(hist, (shell, lum), areas)
    flat = hist.ravel()
    total = flat.sum()
    if total > 0:
        flat = flat / total
    return flat


def texture_descriptor(
    mesh: TexturedMesh,
    v: int,
    radius: float,
    bins=(DEFAULT_RADIAL_BINS, DEFAULT_INTENSITY_BINS),
    solver: GeodesicSolver = None,
    vertex_areas: np.ndarray = None,
    channels: str = "luminance",
) -> TextureDescriptor:
    """Local texture histogram of the geodesic patch around v.

    All vertices within `radius` of v are binned by (radial shell, intensity),
    weighted by their Voronoi area, flattened row-major and L1-normalized.
    With ``channels="rgb"`` the three per-channel histograms are concatenated.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if mesh.vertex_colors is None:
        raise ValueError("vertex colors must be resolved before descriptors")
    if solver is None:
        solver = GeodesicSolver(mesh)
    if vertex_areas is None:
        vertex_areas = mesh.vertex_areas()
    idx, dists = solver.ball(v, radius)
    return _descriptor_from_patch(
        mesh, idx, dists, radius, bins, vertex_areas, channels
    )


def _descriptor_from_patch(mesh, idx, dists, radius, bins, vertex_areas, channels):
    radial_bins, intensity_bins = bins
    areas = vertex_areas[idx]
    colors = mesh.vertex_colors[idx]
    if channels == "rgb":
        flat = np.concatenate(
            [
                _histogram(dists, colors[:, c], areas, radius, radial_bins, intensity_bins)
                for c in range(3)
            ]
        )
        total = flat.sum()
        if total > 0:
            flat = flat / total
    else:
        flat = _histogram(
            dists, luminance(colors), areas, radius, radial_bins, intensity_bins
        )
    return TextureDescriptor(radius_mm=float(radius), values=flat)


def descriptor_stack(
    mesh: TexturedMesh,
    vertices,
    radii=DEFAULT_RADII_MM,
    bins=(DEFAULT_RADIAL_BINS, DEFAULT_INTENSITY_BINS),
    solver: GeodesicSolver = None,
    vertex_areas: np.ndarray = None,
    channels: str = "luminance",
    cache: dict = None,
) -> dict:
    """Descriptors at every radius for many vertices, sharing one truncated
    Dijkstra per vertex (radii are nested).

    Returns
    -------
    dict : vertex -> tuple of TextureDescriptor, one per radius (sorted as given).
    """
    if solver is None:
        solver = GeodesicSolver(mesh)
    if vertex_areas is None:
        vertex_areas = mesh.vertex_areas()
    radii = tuple(float(r) for r in radii)
    rmax = max(radii)
    out = {}
    todo = []
    for v in dict.fromkeys(int(v) for v in vertices):
        if cache is not None and v in cache:
            out[v] = cache[v]
        else:
            todo.append(v)
    for src, idx, dists in solver.balls(todo, rmax):
        descs = []
        for r in radii:
            inside = dists <= r
            descs.append(
                _descriptor_from_patch(
                    mesh, idx[inside], dists[inside], r, bins, vertex_areas, channels
                )
            )
        triple = tuple(descs)
        out[src] = triple
        if cache is not None:
            cache[src] = triple
    return out


def texture_score(src_descriptors, tgt_descriptors, weights) -> float:
    """Weighted sum of per-radius descriptor cross-correlations, in [0, 1]."""
    if len(src_descriptors) != len(tgt_descriptors) or len(weights) != len(src_descriptors):
        raise ValueError("descriptor triples and weights must align")
    total = 0.0
    for s, t, w in zip(src_descriptors, tgt_descriptors, weights):
        if s.radius_mm != t.radius_mm:
            raise ValueError(
                f"radius mismatch: {s.radius_mm} vs {t.radius_mm}"
            )
        total += w * cosine_similarity(s.values, t.values)
    return float(total)
