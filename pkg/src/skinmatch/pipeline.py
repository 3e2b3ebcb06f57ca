"""Iterative anchoring pipeline.

Each iteration matches every unresolved lesion (coarse landmark match, then
texture refinement inside a search region), gates the matches with a
three-clause confidence test, and promotes all confident pairs into the
landmark sets at the iteration boundary so later iterations see them as
anchors. Thresholds relax geometrically per iteration. Lesions still
unresolved after the last iteration fall back to a combined
geometric+texture score computed against the final landmark set.
"""

import concurrent.futures
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import correspondence as corr
from .descriptors import (
    DEFAULT_D_FLOOR_MM,
    DEFAULT_INTENSITY_BINS,
    DEFAULT_RADIAL_BINS,
    DEFAULT_RADII_MM,
    descriptor_stack,
    feature_matrix,
    unit_rows,
)
from .errors import ConfigError
from .geodesics import BACKENDS, DEFAULT_BACKEND, GeodesicSolver
from .mesh import LandmarkSet, LesionSet, TexturedMesh, check_landmark_alignment


@dataclass(frozen=True)
class PipelineConfig:
    """Thresholds and knobs for the matching pipeline.

    The epsilon defaults follow the strongest single-pass settings reported
    for this family of methods (50 mm search radius); the remaining values
    are exposed because no canonical published set exists.
    """

    eps1: float = 50.0          # search-region geodesic radius (mm)
    eps2: float = 0.95          # search-region feature-similarity threshold
    eps3: float = 0.90          # confidence: texture-score floor
    eps4: float = 10.0          # confidence: coarse/refined agreement (mm)
    eps5: float = 20.0          # confidence: uniqueness diameter cap (mm)
    delta: float = 0.85         # similar-texture cutoff for uniqueness
    radii: tuple = DEFAULT_RADII_MM
    descriptor_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    combine_weights: tuple = (0.5, 0.5)   # (geometric, texture)
    max_iterations: int = 10
    relax_eps3: float = 0.95    # per-iteration multipliers
    relax_eps4: float = 1.15
    relax_eps5: float = 1.15
    confidence_mode: str = "any"
    d_floor: float = DEFAULT_D_FLOOR_MM
    radial_bins: int = DEFAULT_RADIAL_BINS
    intensity_bins: int = DEFAULT_INTENSITY_BINS
    channels: str = "luminance"
    diameter_metric: str = "euclidean"
    backend: str = DEFAULT_BACKEND
    tie_break: str = "lowest-index"

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(
            self, "descriptor_weights", tuple(float(w) for w in self.descriptor_weights)
        )
        object.__setattr__(
            self, "combine_weights", tuple(float(w) for w in self.combine_weights)
        )
        self.validate()

    def validate(self):
        if not (self.eps1 > 0):
            raise ConfigError("eps1 must be positive")
        if not (0.0 < self.eps2 <= 1.0):
            raise ConfigError("eps2 must be in (0, 1]")
        # eps3 above 1 and eps4/eps5 at 0 are legal sentinels that make a
        # clause unsatisfiable (used to force pure single-pass behavior)
        if not (self.eps3 > 0):
            raise ConfigError("eps3 must be positive")
        if self.eps4 < 0 or self.eps5 < 0:
            raise ConfigError("eps4/eps5 must be nonnegative")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must be in (0, 1)")
        if len(self.radii) != 3 or any(r <= 0 for r in self.radii):
            raise ConfigError("radii must be three positive values")
        for name in ("descriptor_weights", "combine_weights"):
            w = getattr(self, name)
            if any(x < 0 for x in w):
                raise ConfigError(f"{name} must be nonnegative")
            if abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must sum to 1")
        if len(self.descriptor_weights) != 3 or len(self.combine_weights) != 2:
            raise ConfigError("wrong weight count")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if min(self.relax_eps3, self.relax_eps4, self.relax_eps5) <= 0:
            raise ConfigError("relaxation multipliers must be positive")
        if self.confidence_mode not in ("any", "all"):
            raise ConfigError("confidence_mode must be 'any' or 'all'")
        if self.d_floor <= 0:
            raise ConfigError("d_floor must be positive")
        if self.radial_bins < 1 or self.intensity_bins < 1:
            raise ConfigError("histogram bins must be >= 1")
        if self.channels not in ("luminance", "rgb"):
            raise ConfigError("channels must be 'luminance' or 'rgb'")
        if self.diameter_metric not in ("euclidean", "geodesic"):
            raise ConfigError("diameter_metric must be 'euclidean' or 'geodesic'")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.tie_break != "lowest-index":
            raise ConfigError("only lowest-index tie-breaking is supported")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_TUPLE_KEYS = {"radii", "descriptor_weights", "combine_weights"}
_INT_KEYS = {"max_iterations", "radial_bins", "intensity_bins"}
_STR_KEYS = {"confidence_mode", "channels", "diameter_metric", "backend", "tie_break"}


def parse_config_text(text: str, base: PipelineConfig = None) -> PipelineConfig:
    """Parse the flat ``key = value`` config format ('#' starts a comment)."""
    valid = {f.name for f in fields(PipelineConfig)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in valid:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_KEYS:
                overrides[key] = tuple(float(x) for x in value.replace(",", " ").split())
            elif key in _INT_KEYS:
                overrides[key] = int(value)
            elif key in _STR_KEYS:
                overrides[key] = value
            else:
                overrides[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return replace(base or PipelineConfig(), **overrides)


def load_config(path, base: PipelineConfig = None) -> PipelineConfig:
    try:
        with open(path, "r") as fh:
            return parse_config_text(fh.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot open config {path}: {exc}") from exc


@dataclass(frozen=True)
class CorrespondenceRecord:
    """Final localization result for one lesion of interest."""

    loi_label: str
    source_vertex: int
    target_vertex: int
    texture_score: float | None
    geometric_score: float | None = None
    combined_score: float | None = None
    confident: bool = False
    anchored_at_iteration: int | None = None
    uniqueness_diameter: float | None = None

    def to_dict(self) -> dict:
        return {
            "loi_label": self.loi_label,
            "source_vertex": self.source_vertex,
            "target_vertex": self.target_vertex,
            "texture_score": self.texture_score,
            "geometric_score": self.geometric_score,
            "combined_score": self.combined_score,
            "confident": self.confident,
            "anchored_at_iteration": self.anchored_at_iteration,
            "uniqueness_diameter": self.uniqueness_diameter,
        }


def relax(config: PipelineConfig, iteration: int) -> tuple:
    """Effective (eps3, eps4, eps5) for a 1-based iteration."""
    if iteration < 1:
        raise ValueError("iteration counts from 1")
    k = iteration - 1
    return (
        config.eps3 * config.relax_eps3**k,
        config.eps4 * config.relax_eps4**k,
        config.eps5 * config.relax_eps5**k,
    )


def uniqueness_diameter(
    region: corr.SearchRegion,
    tex_scores: np.ndarray,
    delta: float,
    tgt: TexturedMesh,
    metric: str = "euclidean",
    solver: GeodesicSolver = None,
) -> float:
    """Spread of the region members whose texture score exceeds `delta`.

    Zero when at most one member qualifies; otherwise the mean distance of
    the qualifying members from their centroid (Euclidean by default, or
    geodesic distances to the member nearest the centroid).
    """
    similar = region.members[np.asarray(tex_scores) > delta]
    if len(similar) <= 1:
        return 0.0
    pos = tgt.vertices[similar]
    centroid = pos.mean(axis=0)
    if metric == "geodesic":
        if solver is None:
            solver = GeodesicSolver(tgt)
        center = int(similar[np.argmin(np.sum((pos - centroid) ** 2, axis=1))])
        d = solver.field(center).distances[similar]
        d = d[np.isfinite(d)]
        return float(d.mean()) if d.size else 0.0
    return float(np.linalg.norm(pos - centroid, axis=1).mean())


def confidence(
    tex_score: float,
    anchor_refined_mm: float,
    diameter_mm: float,
    config: PipelineConfig,
    iteration: int,
) -> bool:
    """Three-clause confidence gate at one iteration's relaxed thresholds.

    Clauses: texture score above eps3, coarse/refined matches within eps4 of
    each other, uniqueness diameter below eps5. Mode ``any`` (default) takes
    their disjunction, ``all`` their conjunction.
    """
    eff3, eff4, eff5 = relax(config, iteration)
    clauses = (
        tex_score > eff3,
        anchor_refined_mm < eff4,
        diameter_mm < eff5,
    )
    return any(clauses) if config.confidence_mode == "any" else all(clauses)


class _MatchContext:
    """Shared per-run state: solvers, areas, landmark distance rows, caches."""

    def __init__(self, src_mesh, tgt_mesh, config):
        if src_mesh.vertex_colors is None or tgt_mesh.vertex_colors is None:
            raise ValueError("vertex colors must be resolved on both meshes")
        self.config = config
        self.src_mesh = src_mesh
        self.tgt_mesh = tgt_mesh
        self.src_solver = GeodesicSolver(src_mesh, config.backend)
        self.tgt_solver = GeodesicSolver(tgt_mesh, config.backend)
        self.src_areas = src_mesh.vertex_areas()
        self.tgt_areas = tgt_mesh.vertex_areas()
        self.src_desc_cache = {}
        self.tgt_desc_cache = {}
        self.src_rows = []          # per-landmark distance rows on the source
        self.tgt_rows = []
        self.src_sources = []
        self.tgt_sources = []
        self.tgt_unit = None

    def extend_landmarks(self, src_new, tgt_new):
        """Append promoted pairs; only the new sources cost a Dijkstra run."""
        for v in src_new:
            self.src_rows.append(self.src_solver.field(v).distances)
            self.src_sources.append(int(v))
        for v in tgt_new:
            self.tgt_rows.append(self.tgt_solver.field(v).distances)
            self.tgt_sources.append(int(v))
        tgt_feats = feature_matrix(np.vstack(self.tgt_rows), self.config.d_floor)
        self.tgt_unit = unit_rows(tgt_feats)

    def source_feature(self, v):
        d = np.array([row[v] for row in self.src_rows])
        return feature_matrix(d[:, None], self.config.d_floor)[0]

    def descriptors_for(self, side, vertices):
        mesh, solver, areas, cache = (
            (self.src_mesh, self.src_solver, self.src_areas, self.src_desc_cache)
            if side == "src"
            else (self.tgt_mesh, self.tgt_solver, self.tgt_areas, self.tgt_desc_cache)
        )
        cfg = self.config
        return descriptor_stack(
            mesh,
            vertices,
            radii=cfg.radii,
            bins=(cfg.radial_bins, cfg.intensity_bins),
            solver=solver,
            vertex_areas=areas,
            channels=cfg.channels,
            cache=cache,
        )

    def match_once(self, x):
        """Coarse + texture-refined match of source vertex x against the
        current landmark set. Returns everything the gates need."""
        cfg = self.config
        feat = self.source_feature(x)
        anchor = corr.coarse_match(feat, self.tgt_unit)
        region = corr.build_region(
            self.tgt_solver, anchor, self.tgt_unit, cfg.eps1, cfg.eps2
        )
        tgt_desc = self.descriptors_for("tgt", region.members)
        src_desc = self.descriptors_for("src", [x])[int(x)]
        tex = corr.region_texture_scores(src_desc, region, tgt_desc, cfg.descriptor_weights)
        best = int(np.argmax(tex))
        refined = int(region.members[best])
        diam = uniqueness_diameter(
            region, tex, cfg.delta, self.tgt_mesh, cfg.diameter_metric, self.tgt_solver
        )
        return anchor, region, tex, refined, float(tex[best]), diam


def _map_ordered(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def run(
    src_mesh: TexturedMesh,
    src_landmarks: LandmarkSet,
    lesions: LesionSet,
    tgt_mesh: TexturedMesh,
    tgt_landmarks: LandmarkSet,
    config: PipelineConfig = None,
    threads: int = 1,
) -> list:
    """Full iterative localization of every lesion of interest.

    Returns one CorrespondenceRecord per lesion, in input order. Confident
    lesions are anchored (promoted into the landmark sets) at the end of the
    iteration that matched them; the rest are resolved by the combined
    geometric+texture fallback against the final landmark sets.
    """
    config = config or PipelineConfig()
    src_landmarks.validate(src_mesh)
    tgt_landmarks.validate(tgt_mesh)
    check_landmark_alignment(src_landmarks, tgt_landmarks)
    lesions.validate(src_mesh)
    if not len(lesions):
        raise ValueError("no lesions of interest")

    ctx = _MatchContext(src_mesh, tgt_mesh, config)
    ctx.extend_landmarks(src_landmarks.vertices, tgt_landmarks.vertices)

    pending = list(zip(lesions.labels, lesions.vertices))
    results = {}

    for iteration in range(1, config.max_iterations + 1):
        eff3, eff4, _ = relax(config, iteration)

        def attempt(item):
            label, x = item
            anchor, region, tex, refined, score, diam = ctx.match_once(x)
            # coarse/refined agreement needs the distance only when it is
            # below the (small) eps4 threshold, so a truncated run suffices
            if eff4 > 0:
                ball_idx, ball_d = ctx.tgt_solver.ball(anchor, eff4)
                pos = np.searchsorted(ball_idx, refined)
                in_ball = pos < len(ball_idx) and ball_idx[pos] == refined
                d_agree = float(ball_d[pos]) if in_ball else np.inf
            else:
                d_agree = np.inf
            ok = confidence(score, d_agree, diam, config, iteration)
            return label, x, refined, score, diam, ok

        outcomes = _map_ordered(attempt, pending, threads)
        promoted_src, promoted_tgt = [], []
        still = []
        for label, x, refined, score, diam, ok in outcomes:
            if ok:
                results[label] = CorrespondenceRecord(
                    loi_label=label,
                    source_vertex=int(x),
                    target_vertex=refined,
                    texture_score=score,
                    confident=True,
                    anchored_at_iteration=iteration,
                    uniqueness_diameter=diam,
                )
                promoted_src.append(x)
                promoted_tgt.append(refined)
            else:
                still.append((label, x))
        if promoted_src:
            ctx.extend_landmarks(promoted_src, promoted_tgt)
        pending = still
        if not pending:
            break

    if pending:
        def fallback(item):
            label, x = item
            return label, x, _combined_fallback(ctx, x)

        for label, x, record_args in _map_ordered(fallback, pending, threads):
            results[label] = CorrespondenceRecord(
                loi_label=label, source_vertex=int(x), **record_args
            )

    return [results[label] for label in lesions.labels]


def _combined_fallback(ctx, x):
    """Combined geometric+texture resolution against the final landmark set."""
    cfg = ctx.config
    anchor, region, tex, _refined, _score, diam = ctx.match_once(x)
    anchor_field = ctx.tgt_solver.field(anchor)
    dm = anchor_field.distances[region.members]
    finite = np.isfinite(dm)
    sigma = float(dm[finite].max()) if finite.any() else 0.0
    geo = corr.geometric_scores(anchor_field, region.members, sigma)
    w_geo, w_tex = cfg.combine_weights
    cand = corr.combined_match(region, tex, geo, w_geo, w_tex)
    return {
        "target_vertex": cand.vertex,
        "texture_score": cand.texture_score,
        "geometric_score": cand.geometric_score,
        "combined_score": cand.combined_score,
        "confident": False,
        "anchored_at_iteration": None,
        "uniqueness_diameter": diam,
    }


def run_single_pass(
    src_mesh: TexturedMesh,
    src_landmarks: LandmarkSet,
    lesions: LesionSet,
    tgt_mesh: TexturedMesh,
    tgt_landmarks: LandmarkSet,
    config: PipelineConfig = None,
    threads: int = 1,
    variant: str = "combined",
) -> list:
    """One non-iterative pass in one of three flavors.

    ``shape``    coarse landmark match only.
    ``texture``  texture refinement of the coarse match within its region.
    ``combined`` weighted geometric+texture score over the region.
    """
    if variant not in ("shape", "texture", "combined"):
        raise ValueError(f"unknown variant {variant!r}")
    config = config or PipelineConfig()
    src_landmarks.validate(src_mesh)
    tgt_landmarks.validate(tgt_mesh)
    check_landmark_alignment(src_landmarks, tgt_landmarks)
    lesions.validate(src_mesh)
    if not len(lesions):
        raise ValueError("no lesions of interest")

    ctx = _MatchContext(src_mesh, tgt_mesh, config)
    ctx.extend_landmarks(src_landmarks.vertices, tgt_landmarks.vertices)

    def solve(item):
        label, x = item
        if variant == "shape":
            anchor = corr.coarse_match(ctx.source_feature(x), ctx.tgt_unit)
            return CorrespondenceRecord(
                loi_label=label,
                source_vertex=int(x),
                target_vertex=int(anchor),
                texture_score=None,
            )
        if variant == "texture":
            _anchor, region, tex, refined, score, diam = ctx.match_once(x)
            return CorrespondenceRecord(
                loi_label=label,
                source_vertex=int(x),
                target_vertex=refined,
                texture_score=score,
                uniqueness_diameter=diam,
            )
        return CorrespondenceRecord(
            loi_label=label, source_vertex=int(x), **_combined_fallback(ctx, x)
        )

    return _map_ordered(solve, list(zip(lesions.labels, lesions.vertices)), threads)
