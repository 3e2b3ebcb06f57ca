"""Textured triangle meshes and their annotations.

Meshes are loaded from Wavefront OBJ (with optional MTL + texture image, or
per-vertex colors inline), validated, and frozen. All positions are in
millimeters. Landmarks and lesions come from a shared JSON schema and may be
given either as vertex indices or as 3D points snapped to the nearest vertex.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationError, MeshLoadError, MeshValidationError

logger = logging.getLogger(__name__)

DEFAULT_SNAP_LIMIT_MM = 5.0


@dataclass(frozen=True)
class TexturedMesh:
    """Immutable triangle mesh with per-vertex color.

    Parameters
    ----------
    vertices : (n, 3) float array
        Vertex positions in millimeters.
    triangles : (m, 3) int array
        Vertex indices, three distinct in-range indices per face.
    uv : (m, 3, 2) float array or None
        Per-corner texture coordinates in [0, 1].
    texture : (H, W, 3) float array or None
        RGB texture image, channels in [0, 1].
    vertex_colors : (n, 3) float array or None
        Per-vertex RGB in [0, 1]. Populated by :func:`resolve_vertex_colors`
        when the mesh carries UVs and a texture.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray | None = None
    texture: np.ndarray | None = None
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must be (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshValidationError(f"triangles must be (m, 3), got {t.shape}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        for name in ("uv", "texture", "vertex_colors"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
                object.__setattr__(self, name, arr)
        self._check_structure()
        for name in ("vertices", "triangles", "uv", "texture", "vertex_colors"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False

    def _check_structure(self):
        n = len(self.vertices)
        t = self.triangles
        if t.size:
            if t.min() < 0 or t.max() >= n:
                raise MeshValidationError("triangle index out of range")
            degenerate = (
                (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            )
            if degenerate.any():
                bad = int(np.nonzero(degenerate)[0][0])
                raise MeshValidationError(
                    f"triangle {bad} references a repeated vertex"
                )
        e = self.edges()
        if e.size:
            lengths = np.linalg.norm(
                self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1
            )
            if (lengths <= 0.0).any():
                bad = e[int(np.argmin(lengths))]
                raise MeshValidationError(
                    f"edge ({bad[0]}, {bad[1]}) has zero length"
                )
        if self.vertex_colors is not None:
            c = self.vertex_colors
            if c.shape != (n, 3):
                raise MeshValidationError(
                    f"vertex_colors must be ({n}, 3), got {c.shape}"
                )
            if c.size and (c.min() < 0.0 or c.max() > 1.0):
                raise MeshValidationError("vertex_colors outside [0, 1]")
        if self.uv is not None and self.uv.shape != (len(t), 3, 2):
            raise MeshValidationError(
                f"uv must be ({len(t)}, 3, 2), got {self.uv.shape}"
            )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (k, 2) index array."""
        t = self.triangles
        if not t.size:
            return np.empty((0, 2), dtype=np.int64)
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        a = v[t[:, 1]] - v[t[:, 0]]
        b = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)

    def vertex_areas(self) -> np.ndarray:
        """Mixed Voronoi vertex areas (obtuse triangles fall back to 1/4, 1/2 splits)."""
        v = self.vertices
        t = self.triangles
        areas = np.zeros(len(v))
        fa = self.face_areas()
        # squared edge lengths opposite each corner
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        l0 = np.sum((p1 - p2) ** 2, axis=1)
        l1 = np.sum((p2 - p0) ** 2, axis=1)
        l2 = np.sum((p0 - p1) ** 2, axis=1)
        # cotangent at each corner, derived from the cross/dot products
        with np.errstate(divide="ignore", invalid="ignore"):
            cot0 = (l1 + l2 - l0) / (4.0 * fa)
            cot1 = (l2 + l0 - l1) / (4.0 * fa)
            cot2 = (l0 + l1 - l2) / (4.0 * fa)
        cots = np.stack([cot0, cot1, cot2], axis=1)
        cots[~np.isfinite(cots)] = 0.0
        lsq = np.stack([l0, l1, l2], axis=1)
        obtuse = cots < 0.0
        any_obtuse = obtuse.any(axis=1)
        # Voronoi area of corner i uses cotangents at the two other corners
        vor = np.empty_like(cots)
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            vor[:, i] = (lsq[:, j] * cots[:, j] + lsq[:, k] * cots[:, k]) / 8.0
        share = np.where(obtuse, 0.5, 0.25) * fa[:, None]
        contrib = np.where(any_obtuse[:, None], share, vor)
        for i in range(3):
            np.add.at(areas, t[:, i], contrib[:, i])
        return areas

    def connected_components(self) -> np.ndarray:
        """Per-vertex component label under edge connectivity."""
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        e = self.edges()
        n = self.n_vertices
        adj = coo_matrix(
            (np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)
        )
        _, labels = connected_components(adj, directed=False)
        return labels


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered landmark vertices; position i corresponds across scans."""

    vertices: tuple
    labels: tuple | None = None

    def __post_init__(self):
        verts = tuple(int(v) for v in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != len(verts):
                raise AnnotationError("landmark labels and vertices differ in length")

    def __len__(self):
        return len(self.vertices)

    def validate(self, mesh: TexturedMesh):
        s = len(self.vertices)
        if s < 4:
            raise AnnotationError(f"need at least 4 landmarks, got {s}")
        if s < 10:
            logger.warning("only %d landmarks; correspondence may be coarse", s)
        if len(set(self.vertices)) != s:
            raise AnnotationError("landmark vertices must be unique")
        for v in self.vertices:
            if not (0 <= v < mesh.n_vertices):
                raise AnnotationError(f"landmark vertex {v} out of range")


@dataclass(frozen=True)
class LesionSet:
    """Ordered lesions of interest: (label, vertex) with provenance."""

    labels: tuple
    vertices: tuple
    provenance: tuple = field(default=())

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        verts = tuple(int(v) for v in self.vertices)
        prov = tuple(self.provenance) if self.provenance else ("vertex",) * len(verts)
        if len(labels) != len(verts) or len(prov) != len(verts):
            raise AnnotationError("lesion fields differ in length")
        if len(set(labels)) != len(labels):
            dup = sorted({x for x in labels if labels.count(x) > 1})
            raise AnnotationError(f"duplicate lesion labels: {dup}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "provenance", prov)

    def __len__(self):
        return len(self.labels)

    def validate(self, mesh: TexturedMesh):
        for v in self.vertices:
            if not (0 <= v < mesh.n_vertices):
                raise AnnotationError(f"lesion vertex {v} out of range")

    def vertex_of(self, label: str) -> int:
        try:
            return self.vertices[self.labels.index(label)]
        except ValueError:
            raise AnnotationError(f"no lesion labeled {label!r}") from None


def check_landmark_alignment(source: LandmarkSet, target: LandmarkSet):
    """Source/target landmark sets must pair up index by index."""
    if len(source) != len(target):
        raise AnnotationError(
            f"landmark sets differ in size: {len(source)} vs {len(target)}"
        )
    if source.labels is not None and target.labels is not None:
        for i, (a, b) in enumerate(zip(source.labels, target.labels)):
            if a != b:
                raise AnnotationError(
                    f"landmark {i} labeled {a!r} on source but {b!r} on target"
                )


def validate_mesh(mesh: TexturedMesh) -> list:
    """Report (not raise) soft issues: disconnected components, non-manifold edges."""
    issues = []
    labels = mesh.connected_components()
    n_comp = int(labels.max()) + 1 if labels.size else 0
    if n_comp > 1:
        counts = np.bincount(labels)
        issues.append(
            f"{n_comp} connected components (sizes {sorted(counts.tolist(), reverse=True)[:5]}...)"
        )
    t = mesh.triangles
    if t.size:
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        n_nonmanifold = int((counts > 2).sum())
        if n_nonmanifold:
            issues.append(f"{n_nonmanifold} non-manifold edges (tolerated)")
    for msg in issues:
        logger.warning("mesh: %s", msg)
    return issues


# ---------------------------------------------------------------------------
# OBJ / MTL / texture I/O


def _parse_mtl(path):
    """Return {material_name: texture_path} for map_Kd entries."""
    textures = {}
    current = None
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "newmtl" and len(parts) > 1:
                current = parts[1]
            elif parts[0] == "map_Kd" and current is not None:
                textures[current] = parts[-1]
    return textures


def _load_texture_image(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise MeshLoadError(f"cannot read texture image {path}: {exc}") from exc
    return arr


def load_textured_mesh(path, scale: float = 1.0) -> TexturedMesh:
    """Load a Wavefront OBJ mesh, with MTL texture or inline vertex colors.

    Parameters
    ----------
    path : str
        OBJ file; any MTL/texture files it references must be co-located.
    scale : float
        Multiplier applied to vertex positions (e.g. 1000 for meter-unit scans).

    Returns
    -------
    TexturedMesh
        Positions in millimeters (after scaling), triangles, and whichever of
        UV+texture or vertex colors the file provides.
    """
    verts, colors, uvs_pool = [], [], []
    tri_v, tri_uv = [], []
    mtl_textures = {}
    active_texture = None
    face_no = 0
    try:
        fh = open(path, "r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise MeshLoadError(f"cannot open {path}: {exc}") from exc
    with fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) not in (4, 7):
                    raise MeshLoadError(
                        f"{path}: vertex line with {len(parts) - 1} values"
                    )
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) == 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif tag == "vt":
                uvs_pool.append([float(parts[1]), float(parts[2])])
            elif tag == "f":
                face_no += 1
                if len(parts) != 4:
                    raise MeshLoadError(
                        f"{path}: face {face_no} has {len(parts) - 1} corners, "
                        "only triangles are supported"
                    )
                vi, ti = [], []
                for corner in parts[1:]:
                    fields = corner.split("/")
                    vi.append(int(fields[0]))
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]))
                tri_v.append(vi)
                tri_uv.append(ti if len(ti) == 3 else None)
            elif tag == "mtllib" and len(parts) > 1:
                mtl_path = os.path.join(os.path.dirname(path), parts[1])
                if os.path.exists(mtl_path):
                    mtl_textures.update(_parse_mtl(mtl_path))
                else:
                    logger.warning("material library %s not found", mtl_path)
            elif tag == "usemtl" and len(parts) > 1:
                active_texture = mtl_textures.get(parts[1], active_texture)

    if not verts:
        raise MeshLoadError(f"{path}: no vertices")
    n = len(verts)
    vertices = np.asarray(verts, dtype=np.float64) * float(scale)

    def resolve(idx, pool_len):
        # OBJ indices are 1-based; negatives count from the end
        return idx - 1 if idx > 0 else pool_len + idx

    triangles = np.asarray(
        [[resolve(i, n) for i in tri] for tri in tri_v], dtype=np.int64
    )

    uv = None
    if uvs_pool and all(t is not None for t in tri_uv) and tri_uv:
        pool = np.asarray(uvs_pool, dtype=np.float64)
        uv = np.asarray(
            [[pool[resolve(i, len(pool))] for i in tri] for tri in tri_uv]
        )

    texture = None
    if active_texture is not None:
        tex_path = os.path.join(os.path.dirname(path), active_texture)
        if not os.path.exists(tex_path):
            raise MeshLoadError(f"texture {tex_path} referenced but missing")
        texture = _load_texture_image(tex_path)

    vertex_colors = None
    if colors:
        if len(colors) != n:
            raise MeshLoadError(f"{path}: only {len(colors)} of {n} vertices have colors")
        vertex_colors = np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0)

    mesh = TexturedMesh(
        vertices=vertices,
        triangles=triangles,
        uv=uv,
        texture=texture,
        vertex_colors=vertex_colors,
    )
    validate_mesh(mesh)
    return mesh


def save_obj(mesh: TexturedMesh, path, texture_name=None):
    """Write OBJ (+MTL+PNG when the mesh has a texture; inline colors otherwise)."""
    base, _ = os.path.splitext(path)
    mtl_lines = []
    if mesh.texture is not None:
        from PIL import Image

        tex_file = texture_name or os.path.basename(base) + ".png"
        img = np.clip(mesh.texture * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(img).save(os.path.join(os.path.dirname(path), tex_file))
        mtl_file = os.path.basename(base) + ".mtl"
        mtl_lines = [
            "newmtl textured",
            "Kd 1.0 1.0 1.0",
            f"map_Kd {tex_file}",
        ]
        with open(os.path.join(os.path.dirname(path), mtl_file), "w") as fh:
            fh.write("\n".join(mtl_lines) + "\n")

    with open(path, "w") as fh:
        if mtl_lines:
            fh.write(f"mtllib {os.path.basename(base)}.mtl\n")
        vc = mesh.vertex_colors
        for i, p in enumerate(mesh.vertices):
            if vc is not None and mesh.texture is None:
                c = vc[i]
                fh.write(
                    f"v {p[0]!r} {p[1]!r} {p[2]!r} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n"
                )
            else:
                fh.write(f"v {p[0]!r} {p[1]!r} {p[2]!r}\n")
        if mesh.uv is not None:
            # one vt per corner; simple but lossless
            for tri_uv in mesh.uv:
                for u, w in tri_uv:
                    fh.write(f"vt {u!r} {w!r}\n")
            if mtl_lines:
                fh.write("usemtl textured\n")
            for fi, tri in enumerate(mesh.triangles):
                c0, c1, c2 = 3 * fi + 1, 3 * fi + 2, 3 * fi + 3
                fh.write(
                    f"f {tri[0] + 1}/{c0} {tri[1] + 1}/{c1} {tri[2] + 1}/{c2}\n"
                )
        else:
            for tri in mesh.triangles:
                fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def resolve_vertex_colors(mesh: TexturedMesh) -> TexturedMesh:
    """Populate per-vertex colors from the UV-mapped texture.

    A vertex's color is the corner-area-weighted average of bilinear texture
    samples over all its incident corners, so vertices on texture seams (one
    vertex, several UVs) blend their corners instead of picking a side.
    Meshes that already carry vertex colors pass through unchanged.
    """
    if mesh.vertex_colors is not None:
        return mesh
    if mesh.uv is None or mesh.texture is None:
        raise MeshLoadError(
            "mesh has neither vertex colors nor UV coordinates with a texture"
        )
    samples = sample_texture(mesh.texture, mesh.uv.reshape(-1, 2))
    samples = samples.reshape(mesh.n_triangles, 3, 3)
    corner_w = np.repeat(mesh.face_areas()[:, None] / 3.0, 3, axis=1)
    colors = np.zeros((mesh.n_vertices, 3))
    weights = np.zeros(mesh.n_vertices)
    for corner in range(3):
        idx = mesh.triangles[:, corner]
        np.add.at(colors, idx, samples[:, corner] * corner_w[:, corner, None])
        np.add.at(weights, idx, corner_w[:, corner])
    ok = weights > 0
    colors[ok] /= weights[ok, None]
    return TexturedMesh(
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        uv=mesh.uv,
        texture=mesh.texture,
        vertex_colors=np.clip(colors, 0.0, 1.0),
    )


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear texture samples at UV points; v=0 is the image bottom."""
    h, w = texture.shape[:2]
    u = np.clip(uv[:, 0], 0.0, 1.0) * (w - 1)
    v = (1.0 - np.clip(uv[:, 1], 0.0, 1.0)) * (h - 1)
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bot = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def snap_point_to_vertex(mesh: TexturedMesh, point) -> tuple:
    """Nearest vertex to a 3D point; ties break to the lowest index.

    Returns
    -------
    (index, distance_mm)
    """
    if mesh.n_vertices == 0:
        raise MeshValidationError("cannot snap to an empty mesh")
    p = np.asarray(point, dtype=np.float64)
    d2 = np.sum((mesh.vertices - p) ** 2, axis=1)
    idx = int(np.argmin(d2))
    return idx, float(np.sqrt(d2[idx]))


# ---------------------------------------------------------------------------
# Landmark / lesion JSON


def load_annotations(
    path,
    mesh: TexturedMesh,
    snap_limit_mm: float = DEFAULT_SNAP_LIMIT_MM,
) -> tuple:
    """Read the shared landmarks/lesions JSON for one mesh.

    Entries carry either ``"vertex": i`` or ``"point": [x, y, z]``; points are
    snapped to the nearest vertex and rejected beyond `snap_limit_mm`.

    Returns
    -------
    (LandmarkSet, LesionSet)
    """
    try:
        with open(path, "r") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise AnnotationError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path} is not valid JSON: {exc}") from exc

    def resolve(entry, kind, i):
        label = entry.get("label", f"{kind}{i}")
        if "vertex" in entry:
            v = int(entry["vertex"])
            if not (0 <= v < mesh.n_vertices):
                raise AnnotationError(f"{kind} {label!r}: vertex {v} out of range")
            return label, v, "vertex"
        if "point" in entry:
            v, dist = snap_point_to_vertex(mesh, entry["point"])
            if dist > snap_limit_mm:
                raise AnnotationError(
                    f"{kind} {label!r}: nearest vertex is {dist:.2f} mm away "
                    f"(limit {snap_limit_mm} mm)"
                )
            return label, v, "point"
        raise AnnotationError(f"{kind} {label!r}: needs 'vertex' or 'point'")

    lm_labels, lm_verts = [], []
    for i, entry in enumerate(data.get("landmarks", [])):
        label, v, _ = resolve(entry, "landmark", i)
        lm_labels.append(label)
        lm_verts.append(v)
    ls_labels, ls_verts, ls_prov = [], [], []
    for i, entry in enumerate(data.get("lesions", [])):
        label, v, prov = resolve(entry, "lesion", i)
        ls_labels.append(label)
        ls_verts.append(v)
        ls_prov.append(prov)

    landmarks = LandmarkSet(vertices=tuple(lm_verts), labels=tuple(lm_labels))
    if lm_verts:
        landmarks.validate(mesh)
    lesions = LesionSet(
        labels=tuple(ls_labels), vertices=tuple(ls_verts), provenance=tuple(ls_prov)
    )
    lesions.validate(mesh)
    return landmarks, lesions


def save_annotations(path, landmarks: LandmarkSet = None, lesions: LesionSet = None):
    data = {}
    if landmarks is not None:
        labels = landmarks.labels or [f"landmark{i}" for i in range(len(landmarks))]
        data["landmarks"] = [
            {"label": lab, "vertex": v} for lab, v in zip(labels, landmarks.vertices)
        ]
    if lesions is not None:
        data["lesions"] = [
            {"label": lab, "vertex": v}
            for lab, v in zip(lesions.labels, lesions.vertices)
        ]
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")
