"""Correspondence maps between source and target vertex sets.

Three stages: a coarse match from landmark-feature similarity over the whole
target, a texture refinement restricted to a search region around the coarse
match, and a combined geometric+texture score used as the fallback when
texture alone is not trusted. Every argmax breaks ties to the lowest vertex
index so results are reproducible across runs and thread schedules.
"""

from dataclasses import dataclass

import numpy as np

from .descriptors import texture_score
from .geodesics import GeodesicField, GeodesicSolver


@dataclass(frozen=True)
class SearchRegion:
    """Target vertices eligible to match one source vertex (Eq.-style
    disjunction: geodesically near the anchor, or feature-similar to it)."""

    anchor: int
    members: np.ndarray
    epsilon1: float
    epsilon2: float

    def __post_init__(self):
        m = np.asarray(self.members, dtype=np.int64)
        object.__setattr__(self, "members", m)
        m.flags.writeable = False

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class MatchCandidate:
    """One scored target vertex; scores absent for stages that skip them."""

    vertex: int
    texture_score: float | None = None
    geometric_score: float | None = None
    combined_score: float | None = None


def coarse_match(src_feature, tgt_unit_features: np.ndarray) -> int:
    """Target vertex whose landmark feature best correlates with the source's.

    Parameters
    ----------
    src_feature : (S,) array or LandmarkFeature
        Source-vertex feature.
    tgt_unit_features : (n, S) array
        Unit-normalized target feature rows (zero rows = unreachable, skipped).

    Returns
    -------
    int : argmax vertex; ties break to the lowest index.
    """
    values = getattr(src_feature, "values", src_feature)
    values = np.asarray(values, dtype=np.float64)
    if tgt_unit_features.size == 0:
        raise ValueError("empty target feature set")
    norm = np.linalg.norm(values)
    if norm == 0.0:
        raise ValueError("source feature is all zeros (unreachable vertex)")
    sims = tgt_unit_features @ (values / norm)
    live = np.einsum("ij,ij->i", tgt_unit_features, tgt_unit_features) > 0.0
    if not live.any():
        raise ValueError("no target vertex is reachable from the landmarks")
    sims[~live] = -1.0
    return int(np.argmax(sims))


def build_region(
    solver: GeodesicSolver,
    anchor: int,
    tgt_unit_features: np.ndarray,
    epsilon1: float,
    epsilon2: float,
) -> SearchRegion:
    """Search region around a coarse-match anchor.

    Members are target vertices strictly within `epsilon1` geodesic mm of the
    anchor, together with vertices whose landmark-feature similarity to the
    anchor strictly exceeds `epsilon2`.
    """
    if epsilon1 <= 0:
        raise ValueError("epsilon1 must be positive")
    idx, dists = solver.ball(anchor, epsilon1)
    near = idx[dists < epsilon1]
    if epsilon2 < 1.0:
        sims = tgt_unit_features @ tgt_unit_features[anchor]
        similar = np.nonzero(sims > epsilon2)[0]
        members = np.union1d(near, similar)
    else:
        members = np.unique(near)
    return SearchRegion(
        anchor=int(anchor), members=members, epsilon1=epsilon1, epsilon2=epsilon2
    )


def region_texture_scores(
    src_descriptors, region: SearchRegion, tgt_descriptor_map: dict, weights
) -> np.ndarray:
    """Texture score of every region member against the source descriptors."""
    return np.array(
        [
            texture_score(src_descriptors, tgt_descriptor_map[int(v)], weights)
            for v in region.members
        ]
    )


def refine_match(
    src_descriptors, region: SearchRegion, tgt_descriptor_map: dict, weights
) -> MatchCandidate:
    """Region member with the highest texture score (ties: lowest index)."""
    scores = region_texture_scores(src_descriptors, region, tgt_descriptor_map, weights)
    best = int(np.argmax(scores))
    return MatchCandidate(
        vertex=int(region.members[best]), texture_score=float(scores[best])
    )


def geometric_scores(
    field_from_anchor: GeodesicField, members: np.ndarray, sigma: float
) -> np.ndarray:
    """Gaussian falloff of geodesic distance to the final coarse match.

    `sigma` is the largest member distance to the anchor; if every member
    coincides with the anchor (sigma == 0) all scores are 1.
    """
    d = field_from_anchor.distances[members]
    if sigma <= 0.0:
        return np.ones(len(members))
    return np.exp(-(d**2) / (2.0 * sigma**2))


def geometric_score(field_from_anchor: GeodesicField, v: int, sigma: float) -> float:
    return float(geometric_scores(field_from_anchor, np.array([v]), sigma)[0])


def combined_match(
    region: SearchRegion,
    tex_scores: np.ndarray,
    geo_scores: np.ndarray,
    w_geometric: float,
    w_texture: float,
) -> MatchCandidate:
    """Region member maximizing the weighted geometric+texture score."""
    combined = w_geometric * geo_scores + w_texture * tex_scores
    best = int(np.argmax(combined))
    return MatchCandidate(
        vertex=int(region.members[best]),
        texture_score=float(tex_scores[best]),
        geometric_score=float(geo_scores[best]),
        combined_score=float(combined[best]),
    )
