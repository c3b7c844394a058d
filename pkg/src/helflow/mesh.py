"""Closed oriented triangle meshes: representation, validation, generators, file IO.

Conventions used throughout the package:

* A mesh is a closed oriented 2-manifold embedded (or immersed) in R^3,
  stored as an indexed face set.  All lengths share one global unit.
* The signed volume is ``-(1/3) * integral <f, nu> dmu``; the preferred
  orientation (see :func:`orient_for_positive_volume`) makes it non-negative,
  i.e. the winding normal points *inward* for embedded surfaces.  With that
  convention the mean curvature of a round sphere is ``+2/r``.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Faces thinner than this fraction of the squared bounding-box diagonal are
# rejected at validation time: their cotangent weights blow up downstream.
DEGENERATE_AREA_FRACTION = 1e-14

MAX_ICOSPHERE_SUBDIVISIONS = 7


class MeshError(Exception):
    """Base class for mesh construction and IO failures."""


class MeshFormatError(MeshError):
    """Input file could not be parsed as indexed triangle geometry."""


class NonManifoldMeshError(MeshError):
    """An edge is shared by more than two faces."""


class OpenBoundaryError(MeshError):
    """An edge belongs to only one face (surface is not closed)."""


class OrientationError(MeshError):
    """Face windings are inconsistent and cannot be repaired by flips."""


class DegenerateFaceError(MeshError):
    """A face has (numerically) zero area."""


def _as_vertex_array(vertices) -> np.ndarray:
    v = np.array(vertices, dtype=np.float64)  # always copy: meshes own their data
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise MeshError("vertices contain non-finite coordinates")
    return v


def _as_face_array(faces) -> np.ndarray:
    f = np.array(faces, dtype=np.int64)
    if f.ndim != 2 or f.shape[1] != 3:
        raise MeshError(f"faces must have shape (m, 3), got {f.shape}")
    return f


class TriangleMesh:
    """Immutable closed oriented triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex positions.
    faces : (m, 3) array_like
        Oriented vertex-index triples with globally consistent winding.
    vertex_tags : (n,) array_like of int, optional
        Stable labels used to track vertices across remeshing.
    validate : bool
        Check the closed-manifold invariants (default).  Geometry-preserving
        constructors (``with_vertices`` etc.) skip re-validating topology.
    """

    def __init__(self, vertices, faces, vertex_tags=None, validate=True):
        self.vertices = _as_vertex_array(vertices)
        self.faces = _as_face_array(faces)
        if vertex_tags is not None:
            vertex_tags = np.asarray(vertex_tags, dtype=np.int64)
            if vertex_tags.shape != (len(self.vertices),):
                raise MeshError("vertex_tags length must match vertex count")
        self.vertex_tags = vertex_tags
        self._cache = {}
        if validate:
            self._validate()
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

    # -- basic counts -------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array of sorted index pairs."""
        if "edges" not in self._cache:
            e = np.sort(self._directed_edges(), axis=1)
            self._cache["edges"] = np.unique(e, axis=0)
        return self._cache["edges"]

    def _directed_edges(self) -> np.ndarray:
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    @property
    def genus(self) -> int:
        """Total genus; for a multi-component mesh, the sum over components."""
        return self.n_components - self.euler_characteristic // 2

    @property
    def n_components(self) -> int:
        return int(self.face_components.max()) + 1 if self.n_faces else 0

    @property
    def face_components(self) -> np.ndarray:
        """Connected-component label per face (edge connectivity)."""
        if "face_components" not in self._cache:
            from scipy.sparse import coo_matrix
            from scipy.sparse.csgraph import connected_components

            pairs = self._edge_face_pairs()
            m = self.n_faces
            adj = coo_matrix(
                (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, m)
            )
            _, labels = connected_components(adj, directed=False)
            self._cache["face_components"] = labels
        return self._cache["face_components"]

    def _edge_face_pairs(self) -> np.ndarray:
        """(k, 2) array of face-index pairs sharing an edge."""
        e = np.sort(self._directed_edges(), axis=1)
        fidx = np.tile(np.arange(self.n_faces), 3)
        order = np.lexsort((e[:, 1], e[:, 0]))
        e, fidx = e[order], fidx[order]
        same = np.all(e[1:] == e[:-1], axis=1)
        return np.column_stack([fidx[:-1][same], fidx[1:][same]])

    # -- geometry helpers ----------------------------------------------------

    def face_corners(self):
        """The three vertex-position arrays (v0, v1, v2) of every face."""
        v, f = self.vertices, self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_cross(self) -> np.ndarray:
        """Cross product (v1-v0) x (v2-v0) per face (twice the area vector)."""
        v0, v1, v2 = self.face_corners()
        return np.cross(v1 - v0, v2 - v0)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_angles(self) -> np.ndarray:
        """(m, 3) interior angles, column k is the angle at faces[:, k]."""
        v0, v1, v2 = self.face_corners()
        out = np.empty((self.n_faces, 3))
        for k, (p, q, r) in enumerate(((v0, v1, v2), (v1, v2, v0), (v2, v0, v1))):
            a, b = q - p, r - p
            cross = np.linalg.norm(np.cross(a, b), axis=1)
            dot = np.einsum("ij,ij->i", a, b)
            out[:, k] = np.arctan2(cross, dot)
        return out

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def mean_edge_length(self) -> float:
        return float(self.edge_lengths().mean())

    def bbox_diagonal(self) -> float:
        v = self.vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    # -- derived meshes ------------------------------------------------------

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology with new positions; skips topological re-validation."""
        return TriangleMesh(vertices, self.faces, self.vertex_tags, validate=False)

    def translated(self, offset) -> "TriangleMesh":
        return self.with_vertices(self.vertices + np.asarray(offset, dtype=np.float64))

    def scaled(self, factor: float) -> "TriangleMesh":
        if factor <= 0:
            raise MeshError("scale factor must be positive")
        return self.with_vertices(self.vertices * float(factor))

    def flipped(self) -> "TriangleMesh":
        """Reverse the winding of every face."""
        return TriangleMesh(
            self.vertices, self.faces[:, [0, 2, 1]], self.vertex_tags, validate=False
        )

    # -- validation ----------------------------------------------------------

    def _validate(self):
        if self.n_faces == 0:
            raise MeshError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise MeshError("face indices out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise DegenerateFaceError("face with repeated vertex index")

        floor = DEGENERATE_AREA_FRACTION * self.bbox_diagonal() ** 2
        areas = self.face_areas()
        bad = np.nonzero(areas < floor)[0]
        if len(bad):
            raise DegenerateFaceError(
                f"{len(bad)} degenerate face(s) below area floor {floor:.3e}, "
                f"first at index {bad[0]}"
            )

        directed = self._directed_edges()
        und = np.sort(directed, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise NonManifoldMeshError(
                f"{int((counts > 2).sum())} edge(s) shared by more than two faces"
            )
        if np.any(counts < 2):
            raise OpenBoundaryError(
                f"{int((counts < 2).sum())} boundary edge(s); mesh is not closed"
            )
        # Consistent winding: each undirected edge must appear once per direction.
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dcounts > 1):
            raise OrientationError(
                "inconsistent face windings (a directed edge occurs twice)"
            )
        if self.euler_characteristic % 2 != 0:
            raise MeshError(
                f"odd Euler characteristic {self.euler_characteristic}"
            )


# ---------------------------------------------------------------------------
# signed volume and orientation
# ---------------------------------------------------------------------------


def signed_volume(mesh: TriangleMesh) -> float:
    """Signed volume ``-(1/3) * integral <f, nu> dmu`` of the discrete mesh.

    Equals ``-sum_F det(v0, v1, v2) / 6``; positive when the winding normal
    points inward (the preferred orientation).  Translation invariant for
    closed meshes.
    """
    return float(np.sum(_face_det_sixths(mesh)) * -1.0)


def _face_det_sixths(mesh: TriangleMesh) -> np.ndarray:
    v0, v1, v2 = mesh.face_corners()
    return np.einsum("ij,ij->i", v0, np.cross(v1, v2)) / 6.0


def component_signed_volumes(mesh: TriangleMesh) -> np.ndarray:
    """Signed volume per connected component (same convention as above)."""
    det = -_face_det_sixths(mesh)
    labels = mesh.face_components
    return np.bincount(labels, weights=det, minlength=mesh.n_components)


def orient_for_positive_volume(mesh: TriangleMesh) -> TriangleMesh:
    """Flip windings (per component) so every component's signed volume is >= 0.

    Components whose enclosed volume is numerically zero are reported and left
    unchanged.  Idempotent; a no-op input is returned as-is.
    """
    vols = component_signed_volumes(mesh)
    tol = 1e-12 * mesh.bbox_diagonal() ** 3
    ambiguous = np.abs(vols) <= tol
    if np.any(ambiguous):
        logger.warning(
            "orient_for_positive_volume: %d component(s) with ~zero enclosed "
            "volume; orientation left unchanged there",
            int(ambiguous.sum()),
        )
    to_flip = (vols < 0) & ~ambiguous
    if not np.any(to_flip):
        return mesh
    faces = mesh.faces.copy()
    mask = to_flip[mesh.face_components]
    faces[mask] = faces[mask][:, [0, 2, 1]]
    return TriangleMesh(mesh.vertices, faces, mesh.vertex_tags, validate=False)


def repair_winding(faces: np.ndarray) -> np.ndarray:
    """Make face windings globally consistent by propagating flips.

    Walks the face adjacency graph from one seed per component and flips faces
    so adjacent faces traverse their shared edge in opposite directions.
    Raises :class:`OrientationError` for non-orientable input.
    """
    faces = np.array(faces, dtype=np.int64)
    m = len(faces)
    # undirected edge -> list of (face, directed pair) incidences
    edge_map: dict[tuple[int, int], list[tuple[int, tuple[int, int]]]] = {}
    for fi in range(m):
        a, b, c = faces[fi]
        for u, v in ((a, b), (b, c), (c, a)):
            edge_map.setdefault((min(u, v), max(u, v)), []).append((fi, (u, v)))
    for key, inc in edge_map.items():
        if len(inc) == 1:
            raise OpenBoundaryError(
                f"edge {key} belongs to a single face; mesh is not closed"
            )
        if len(inc) > 2:
            raise NonManifoldMeshError(
                f"edge {key} belongs to {len(inc)} faces; cannot orient"
            )

    oriented = np.zeros(m, dtype=bool)
    flip = np.zeros(m, dtype=bool)
    for seed in range(m):
        if oriented[seed]:
            continue
        oriented[seed] = True
        stack = [seed]
        while stack:
            fi = stack.pop()
            a, b, c = faces[fi]
            corners = (a, c, b) if flip[fi] else (a, b, c)
            for k in range(3):
                u, v = corners[k], corners[(k + 1) % 3]
                inc = edge_map[(min(u, v), max(u, v))]
                (f0, d0), (f1, d1) = inc
                gi, gdir = (f1, d1) if f0 == fi else (f0, d0)
                if gi == fi:
                    continue
                # neighbor must traverse the edge as (v, u)
                needs_flip = gdir == (u, v)
                if not oriented[gi]:
                    oriented[gi] = True
                    flip[gi] = needs_flip
                    stack.append(gi)
                elif flip[gi] != needs_flip:
                    raise OrientationError("mesh is not orientable")
    out = faces.copy()
    out[flip] = out[flip][:, [0, 2, 1]]
    return out


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def make_tetrahedron() -> TriangleMesh:
    """The reference tetrahedron (0,0,0), (1,0,0), (0,1,0), (0,0,1)."""
    vertices = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    faces = [(0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3)]
    return orient_for_positive_volume(TriangleMesh(vertices, faces))


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return verts, faces


def make_icosphere(subdivisions: int, radius: float = 1.0, center=(0.0, 0.0, 0.0),
                   max_subdivisions: int = MAX_ICOSPHERE_SUBDIVISIONS) -> TriangleMesh:
    """Icosahedron-based sphere mesh with ``20 * 4**subdivisions`` faces.

    All vertices lie at exactly ``radius`` from ``center`` (up to floating
    point); the returned orientation has non-negative signed volume.
    """
    if subdivisions < 0 or subdivisions > max_subdivisions:
        raise MeshError(
            f"subdivisions must be in [0, {max_subdivisions}], got {subdivisions}"
        )
    if radius <= 0:
        raise MeshError("radius must be positive")
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        verts, faces = _subdivide_midpoint(verts, faces)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    mesh = TriangleMesh(verts, faces)
    return orient_for_positive_volume(mesh)


def _subdivide_midpoint(verts: np.ndarray, faces: np.ndarray):
    """Split each triangle into four; midpoints are projected by the caller."""
    edge_mid: dict[tuple[int, int], int] = {}
    new_verts = [verts]
    next_idx = len(verts)

    def midpoint(a: int, b: int) -> int:
        nonlocal next_idx
        key = (min(a, b), max(a, b))
        if key not in edge_mid:
            edge_mid[key] = next_idx
            new_verts.append(0.5 * (verts[a] + verts[b])[None, :])
            next_idx += 1
        return edge_mid[key]

    new_faces = np.empty((4 * len(faces), 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(faces):
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces[4 * i: 4 * i + 4] = [
            (a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)
        ]
    return np.concatenate(new_verts, axis=0), new_faces


def make_torus(major_radius: float = 1.0, minor_radius: float = 0.4,
               n_major: int = 48, n_minor: int = 24) -> TriangleMesh:
    """Structured grid torus (genus 1), oriented for non-negative signed volume."""
    if not (0 < minor_radius < major_radius):
        raise MeshError("need 0 < minor_radius < major_radius")
    theta = 2 * np.pi * np.arange(n_major) / n_major
    phi = 2 * np.pi * np.arange(n_minor) / n_minor
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = major_radius + minor_radius * np.cos(ph)
    verts = np.column_stack(
        [
            (ring * np.cos(th)).ravel(),
            (ring * np.sin(th)).ravel(),
            (minor_radius * np.sin(ph)).ravel(),
        ]
    )
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces.append((a, b, c))
            faces.append((a, c, d))
    return orient_for_positive_volume(TriangleMesh(verts, np.array(faces)))


# ---------------------------------------------------------------------------
# quality report
# ---------------------------------------------------------------------------


@dataclass
class MeshQualityReport:
    """Element-quality extremes plus an aspect-ratio histogram.

    Aspect ratio is longest edge / (2 * inradius); 1 for equilateral
    triangles, large for slivers.  Angles are in radians.
    """

    min_edge_length: float
    max_edge_length: float
    min_angle: float
    min_face_area: float
    aspect_ratio_counts: np.ndarray
    aspect_ratio_bin_edges: np.ndarray


def quality_report(mesh: TriangleMesh, aspect_bins=(1.0, 1.5, 2.0, 3.0, 5.0, 10.0, np.inf)) -> MeshQualityReport:
    lengths = mesh.edge_lengths()
    angles = mesh.face_angles()
    areas = mesh.face_areas()
    v0, v1, v2 = mesh.face_corners()
    e0 = np.linalg.norm(v1 - v0, axis=1)
    e1 = np.linalg.norm(v2 - v1, axis=1)
    e2 = np.linalg.norm(v0 - v2, axis=1)
    s = 0.5 * (e0 + e1 + e2)
    inradius = areas / s
    aspect = np.max(np.stack([e0, e1, e2]), axis=0) / (2.0 * inradius)
    counts, edges = np.histogram(aspect, bins=np.asarray(aspect_bins))
    return MeshQualityReport(
        min_edge_length=float(lengths.min()),
        max_edge_length=float(lengths.max()),
        min_angle=float(angles.min()),
        min_face_area=float(areas.min()),
        aspect_ratio_counts=counts,
        aspect_ratio_bin_edges=edges,
    )


# ---------------------------------------------------------------------------
# file IO (ASCII OFF / OBJ)
# ---------------------------------------------------------------------------


def load_mesh(path, fmt: str | None = None) -> TriangleMesh:
    """Load a closed triangle mesh from an OFF or OBJ file.

    Non-triangle polygons are fan-triangulated; windings are made globally
    consistent and the result is oriented for non-negative signed volume.
    """
    path = str(path)
    if fmt is None:
        fmt = "OBJ" if path.lower().endswith(".obj") else "OFF"
    fmt = fmt.upper()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise MeshFormatError(f"cannot read {path}: {exc}") from exc
    if fmt == "OFF":
        verts, polys = _parse_off(text, path)
    elif fmt == "OBJ":
        verts, polys = _parse_obj(text, path)
    else:
        raise MeshFormatError(f"unsupported format {fmt!r} (expected OFF or OBJ)")
    faces = _fan_triangulate(polys)
    faces = repair_winding(faces)
    mesh = TriangleMesh(verts, faces)
    return orient_for_positive_volume(mesh)


def save_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    """Write an ASCII OFF or OBJ file; positions use 17 significant digits."""
    path = str(path)
    if fmt is None:
        fmt = "OBJ" if path.lower().endswith(".obj") else "OFF"
    fmt = fmt.upper()
    lines = []
    if fmt == "OFF":
        lines.append("OFF")
        lines.append(f"{mesh.n_vertices} {mesh.n_faces} {mesh.n_edges}")
        for x, y, z in mesh.vertices:
            lines.append(f"{x:.17g} {y:.17g} {z:.17g}")
        for a, b, c in mesh.faces:
            lines.append(f"3 {a} {b} {c}")
    elif fmt == "OBJ":
        for x, y, z in mesh.vertices:
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
        for a, b, c in mesh.faces:
            lines.append(f"f {a + 1} {b + 1} {c + 1}")
    else:
        raise MeshFormatError(f"unsupported format {fmt!r} (expected OFF or OBJ)")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _strip_comments(text: str, comment_chars: str) -> list[str]:
    out = []
    for line in text.splitlines():
        for ch in comment_chars:
            cut = line.find(ch)
            if cut >= 0:
                line = line[:cut]
        line = line.strip()
        if line:
            out.append(line)
    return out


def _parse_off(text: str, path: str):
    lines = _strip_comments(text, "#")
    if not lines:
        raise MeshFormatError(f"{path}: empty OFF file")
    header = lines[0]
    idx = 1
    if header.upper().startswith("OFF"):
        rest = header[3:].strip()
        if rest:  # counts on the header line
            lines.insert(1, rest)
    else:
        idx = 0  # headerless variant: first line is the counts
    try:
        nv, nf = (int(tok) for tok in lines[idx].split()[:2])
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"{path}: bad OFF counts line") from exc
    idx += 1
    if len(lines) < idx + nv + nf:
        raise MeshFormatError(f"{path}: truncated OFF file")
    try:
        verts = np.array(
            [[float(t) for t in lines[idx + i].split()[:3]] for i in range(nv)]
        )
    except ValueError as exc:
        raise MeshFormatError(f"{path}: bad vertex line") from exc
    idx += nv
    polys = []
    for i in range(nf):
        toks = lines[idx + i].split()
        try:
            k = int(toks[0])
            poly = [int(t) for t in toks[1: 1 + k]]
        except (ValueError, IndexError) as exc:
            raise MeshFormatError(f"{path}: bad face line {i}") from exc
        if len(poly) != k or k < 3:
            raise MeshFormatError(f"{path}: face {i} declares {k} vertices")
        polys.append(poly)
    return verts, polys


def _parse_obj(text: str, path: str):
    verts, polys = [], []
    for line in _strip_comments(text, "#"):
        toks = line.split()
        if toks[0] == "v":
            try:
                verts.append([float(t) for t in toks[1:4]])
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(f"{path}: bad vertex line") from exc
        elif toks[0] == "f":
            try:
                poly = [int(t.split("/")[0]) - 1 for t in toks[1:]]
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(f"{path}: bad face line") from exc
            if len(poly) < 3:
                raise MeshFormatError(f"{path}: face with fewer than 3 vertices")
            polys.append(poly)
    if not verts or not polys:
        raise MeshFormatError(f"{path}: no geometry found")
    return np.array(verts, dtype=np.float64), polys


def _fan_triangulate(polys) -> np.ndarray:
    tris = []
    for poly in polys:
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    return np.array(tris, dtype=np.int64)
