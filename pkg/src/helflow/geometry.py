"""Discrete curvature operators, energies, and first variations.

Discretization (fixed across the package):

* cotangent Laplace-Beltrami operator ``L`` with mixed-Voronoi vertex areas
  ``a_i``; the pointwise operator is ``(Delta u)_i = (L u)_i / a_i``;
* mean curvature ``H_i = <(Delta f)_i, nu_i>`` with ``nu_i`` the area-weighted
  vertex normal of the winding orientation (inward for the preferred
  positive-volume orientation, so round spheres have ``H = +2/r``);
* Gauss curvature from angle defects, which makes the discrete Gauss-Bonnet
  identity ``sum K_i a_i = 2 pi chi`` exact;
* ``|A0|^2 = max(H^2/2 - 2K, 0)`` (clamped; the clamp mass is reported) and
  ``|A|^2 = |A0|^2 + H^2/2``.

All operations are pure functions of immutable inputs.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .mesh import TriangleMesh, signed_volume

__all__ = [
    "FlowParams", "VertexField", "GeometryCache", "GeometryError",
    "build_cache", "area", "signed_volume", "willmore_energy",
    "helfrich_energy", "penalized_energy", "mean_curvature_integral",
    "gauss_bonnet_residual", "willmore_bound_residual", "flow_velocity",
    "first_variation_check", "discrete_gradient_fd", "cotan_laplacian",
    "mixed_voronoi_areas", "vertex_normals",
]

COT_OVERFLOW = 1e12


class GeometryError(Exception):
    """Operator assembly failed (typically a degenerate triangle)."""


@dataclass(frozen=True)
class FlowParams:
    """Parameters of the penalized bending energy and its gradient flow.

    c0 : spontaneous curvature, unit 1/length.
    lam : local area penalty, unit 1/length^2; non-negative unless
        ``allow_negative_lam`` is set explicitly.
    """

    c0: float
    lam: float = 0.0
    allow_negative_lam: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.c0) and np.isfinite(self.lam)):
            raise ValueError("flow parameters must be finite")
        if self.lam < 0 and not self.allow_negative_lam:
            raise ValueError(
                "lam < 0 requires allow_negative_lam=True (all standard "
                "scenarios use lam >= 0)"
            )

    def rescaled(self, r: float) -> "FlowParams":
        """Parameters after parabolic rescaling by ``r``: (r*c0, r^2*lam)."""
        if r <= 0:
            raise ValueError("rescaling factor must be positive")
        return FlowParams(r * self.c0, r * r * self.lam, self.allow_negative_lam)


@dataclass(frozen=True)
class VertexField:
    """A per-vertex scalar or 3-vector field with its unit recorded."""

    values: np.ndarray
    unit: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("vertex field contains non-finite entries")
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return len(self.values)


@dataclass
class GeometryCache:
    """Per-vertex geometric quantities plus global invariants of one mesh.

    Vertex arrays: ``vertex_areas`` (length^2), ``normals``, ``H`` (1/length),
    ``K`` (1/length^2), ``A0sq``, ``Asq`` (1/length^2 each).  ``laplacian`` is
    the integrated cotangent operator (row sums zero; apply and divide by
    ``vertex_areas`` for the pointwise Laplacian).  Energies that need flow
    parameters (``helfrich``, ``penalized``) are populated when ``build_cache``
    receives them.
    """

    vertex_areas: np.ndarray
    normals: np.ndarray
    H: np.ndarray
    K: np.ndarray
    A0sq: np.ndarray
    Asq: np.ndarray
    laplacian: sparse.csr_matrix
    area: float
    signed_volume: float
    willmore: float
    w0: float
    clamp_mass: float
    sup_Asq: float
    helfrich: float | None = None
    penalized: float | None = None
    params: FlowParams | None = field(default=None, repr=False)


class _FaceData:
    """Shared per-face quantities computed in one pass over the mesh."""

    __slots__ = ("cross", "cross_norm", "dots", "cots", "angles", "edge_sq")

    def __init__(self, mesh: TriangleMesh):
        v, f = mesh.vertices, mesh.faces
        v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        e0 = v2 - v1  # edge opposite corner 0
        e1 = v0 - v2
        e2 = v1 - v0
        self.cross = np.cross(e2, -e1)  # (v1-v0) x (v2-v0); |.| = 2 * area
        self.cross_norm = np.linalg.norm(self.cross, axis=1)
        # interior-angle dot products; all three corners share |a x b|
        self.dots = np.stack(
            [
                -np.einsum("ij,ij->i", e2, e1),
                -np.einsum("ij,ij->i", e0, e2),
                -np.einsum("ij,ij->i", e1, e0),
            ],
            axis=1,
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            self.cots = self.dots / self.cross_norm[:, None]
        bad = ~np.isfinite(self.cots) | (np.abs(self.cots) > COT_OVERFLOW)
        if np.any(bad):
            face = int(np.nonzero(np.any(bad, axis=1))[0][0])
            raise GeometryError(
                f"cotangent weight overflow from degenerate triangle at face {face}"
            )
        self.angles = np.arctan2(self.cross_norm[:, None], self.dots)
        self.edge_sq = np.stack(
            [
                np.einsum("ij,ij->i", e0, e0),
                np.einsum("ij,ij->i", e1, e1),
                np.einsum("ij,ij->i", e2, e2),
            ],
            axis=1,
        )


def _laplacian_from(fd: _FaceData, faces: np.ndarray, n: int) -> sparse.csr_matrix:
    # corners 0,1,2 are opposite edges (1,2), (2,0), (0,1) respectively
    i = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    j = np.concatenate([faces[:, 2], faces[:, 0], faces[:, 1]])
    w = 0.5 * np.concatenate([fd.cots[:, 0], fd.cots[:, 1], fd.cots[:, 2]])
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([w, w, -w, -w])
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _mixed_areas_from(fd: _FaceData, faces: np.ndarray, n: int) -> np.ndarray:
    cots, e_sq = fd.cots, fd.edge_sq
    face_area = 0.5 * fd.cross_norm
    # Voronoi part (valid for non-obtuse faces): corner k gets
    # (|e_{k+1}|^2 cot_{k+1} + |e_{k+2}|^2 cot_{k+2}) / 8.
    contrib = np.empty_like(cots)
    for k in range(3):
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        contrib[:, k] = (e_sq[:, k1] * cots[:, k1] + e_sq[:, k2] * cots[:, k2]) / 8.0
    # obtuse faces: half the area at the obtuse corner, a quarter elsewhere
    obtuse = cots < 0
    any_obtuse = np.any(obtuse, axis=1)
    if np.any(any_obtuse):
        rows = np.nonzero(any_obtuse)[0]
        contrib[rows] = 0.25 * face_area[rows, None]
        obtuse_corner = np.argmax(obtuse[rows], axis=1)
        contrib[rows, obtuse_corner] = 0.5 * face_area[rows]
    areas = np.zeros(n)
    for k in range(3):
        areas += np.bincount(faces[:, k], weights=contrib[:, k], minlength=n)
    if np.any(areas <= 0):
        raise GeometryError("non-positive mixed Voronoi vertex area")
    return areas


def _normals_from(fd: _FaceData, faces: np.ndarray, n: int) -> np.ndarray:
    normals = np.zeros((n, 3))
    for k in range(3):
        idx = faces[:, k]
        for c in range(3):
            normals[:, c] += np.bincount(idx, weights=fd.cross[:, c], minlength=n)
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise GeometryError("zero area-weighted normal at a vertex")
    return normals / norms[:, None]


def _defects_from(fd: _FaceData, faces: np.ndarray, n: int) -> np.ndarray:
    total = np.zeros(n)
    for k in range(3):
        total += np.bincount(faces[:, k], weights=fd.angles[:, k], minlength=n)
    return 2.0 * np.pi - total


def cotan_laplacian(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Integrated cotangent operator: ``(L u)_i = sum_j w_ij (u_j - u_i)``.

    ``w_ij = (cot alpha_ij + cot beta_ij) / 2`` over the two angles opposite
    edge ``(i, j)``.  Symmetric with zero row sums.
    """
    return _laplacian_from(_FaceData(mesh), mesh.faces, mesh.n_vertices)


def mixed_voronoi_areas(mesh: TriangleMesh) -> np.ndarray:
    """Mixed Voronoi vertex areas; they tile each face exactly."""
    return _mixed_areas_from(_FaceData(mesh), mesh.faces, mesh.n_vertices)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals of the winding orientation (unit length)."""
    return _normals_from(_FaceData(mesh), mesh.faces, mesh.n_vertices)


def angle_defects(mesh: TriangleMesh) -> np.ndarray:
    return _defects_from(_FaceData(mesh), mesh.faces, mesh.n_vertices)


def build_cache(mesh: TriangleMesh, params: FlowParams | None = None) -> GeometryCache:
    """Assemble all per-vertex curvature data and global energies for a mesh."""
    n, faces = mesh.n_vertices, mesh.faces
    fd = _FaceData(mesh)
    L = _laplacian_from(fd, faces, n)
    a = _mixed_areas_from(fd, faces, n)
    nu = _normals_from(fd, faces, n)
    H = np.einsum("ij,ij->i", L @ mesh.vertices, nu) / a
    K = _defects_from(fd, faces, n) / a
    raw = 0.5 * H * H - 2.0 * K
    A0sq = np.maximum(raw, 0.0)
    clamp_mass = float(np.sum(np.minimum(raw, 0.0) * -a))
    Asq = A0sq + 0.5 * H * H
    total_area = float(0.5 * np.sum(fd.cross_norm))
    cache = GeometryCache(
        vertex_areas=a,
        normals=nu,
        H=H,
        K=K,
        A0sq=A0sq,
        Asq=Asq,
        laplacian=L,
        area=total_area,
        signed_volume=signed_volume(mesh),
        willmore=0.25 * float(np.sum(H * H * a)),
        w0=float(np.sum(A0sq * a)),
        clamp_mass=clamp_mass,
        sup_Asq=float(Asq.max()),
    )
    if params is not None:
        cache.params = params
        cache.helfrich = helfrich_energy(cache, params)
        cache.penalized = penalized_energy(cache, params)
    return cache


# ---------------------------------------------------------------------------
# energies and monitors
# ---------------------------------------------------------------------------


def area(cache: GeometryCache) -> float:
    return cache.area


def willmore_energy(cache: GeometryCache) -> float:
    """W = (1/4) integral H^2 dmu."""
    return cache.willmore


def helfrich_energy(cache: GeometryCache, params: FlowParams) -> float:
    """(1/4) integral (H - c0)^2 dmu."""
    d = cache.H - params.c0
    return 0.25 * float(np.sum(d * d * cache.vertex_areas))


def penalized_energy(cache: GeometryCache, params: FlowParams) -> float:
    """Helfrich energy plus the local area penalty lam/2 * A."""
    return helfrich_energy(cache, params) + 0.5 * params.lam * cache.area


def mean_curvature_integral(cache: GeometryCache) -> float:
    """integral H dmu; its sign is the positivity monitor for shrinkers."""
    return float(np.sum(cache.H * cache.vertex_areas))


def gauss_bonnet_residual(cache: GeometryCache, genus: int) -> float:
    """Consistency residual of the two Gauss-Bonnet-derived energy identities.

    Returns ``max(|W0 - (2W - 8 pi (1-g))|, |int |A|^2 - (4(W - 2 pi) + 8 pi g)|)``.
    Zero up to the umbilic clamp mass for the exact discretization.
    """
    w, w0 = cache.willmore, cache.w0
    int_asq = float(np.sum(cache.Asq * cache.vertex_areas))
    r1 = abs(w0 - (2.0 * w - 8.0 * np.pi * (1 - genus)))
    r2 = abs(int_asq - (4.0 * (w - 2.0 * np.pi) + 8.0 * np.pi * genus))
    return max(r1, r2)


def willmore_bound_residual(cache: GeometryCache, params: FlowParams) -> float:
    """Slack in the bound W <= (2 lam + c0^2) / (2 lam) * (penalized energy).

    Non-negative (up to roundoff) for every valid mesh; requires lam > 0.
    """
    if params.lam <= 0:
        raise ValueError("willmore_bound_residual requires lam > 0")
    factor = (2.0 * params.lam + params.c0 ** 2) / (2.0 * params.lam)
    return factor * penalized_energy(cache, params) - cache.willmore


# ---------------------------------------------------------------------------
# flow velocity and first variations
# ---------------------------------------------------------------------------


def flow_velocity(cache: GeometryCache, params: FlowParams) -> VertexField:
    """Normal speed of the gradient flow, per vertex.

    xi = -(Delta H + |A0|^2 H - c0 (|A0|^2 - H^2/2) - (lam + c0^2/2) H);
    the velocity vector is ``xi_i nu_i``.  ``Delta H`` reuses the cotangent
    operator of the cache applied to the scalar field H.
    """
    c0, lam = params.c0, params.lam
    H, A0sq = cache.H, cache.A0sq
    lap_H = (cache.laplacian @ H) / cache.vertex_areas
    xi = -(
        lap_H
        + A0sq * H
        - c0 * (A0sq - 0.5 * H * H)
        - (lam + 0.5 * c0 * c0) * H
    )
    return VertexField(xi, unit="1/length^3")


_FUNCTIONALS = ("area", "volume", "helfrich", "penalized")


def _functional_value(mesh: TriangleMesh, params: FlowParams, which: str) -> float:
    if which == "area":
        return float(np.sum(mesh.face_areas()))
    if which == "volume":
        return signed_volume(mesh)
    cache = build_cache(mesh)
    if which == "helfrich":
        return helfrich_energy(cache, params)
    if which == "penalized":
        return penalized_energy(cache, params)
    raise ValueError(f"unknown functional {which!r}; expected one of {_FUNCTIONALS}")


def _analytic_variation(cache: GeometryCache, params: FlowParams, phi: np.ndarray,
                        which: str) -> float:
    a, H = cache.vertex_areas, cache.H
    if which == "area":
        return -float(np.sum(H * phi * a))
    if which == "volume":
        return -float(np.sum(phi * a))
    c0 = params.c0
    lap_H = (cache.laplacian @ H) / a
    grad = 0.5 * (lap_H + cache.A0sq * (H - c0) + 0.5 * c0 * H * (H - c0))
    helf = float(np.sum(grad * phi * a))
    if which == "helfrich":
        return helf
    if which == "penalized":
        return helf - 0.5 * params.lam * float(np.sum(H * phi * a))
    raise ValueError(f"unknown functional {which!r}; expected one of {_FUNCTIONALS}")


def first_variation_check(mesh: TriangleMesh, params: FlowParams, phi,
                          functional: str, fd_step: float | None = None):
    """Compare the analytic first variation against central differences.

    The mesh is perturbed by ``+- h * phi_i nu_i`` with frozen normals; the
    analytic value evaluates the smooth first-variation identities on the
    discrete quantities.  Returns ``(analytic, finite_difference)``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mesh.n_vertices,):
        raise ValueError("phi must be a scalar field over the vertices")
    if not np.all(np.isfinite(phi)):
        raise ValueError("phi contains non-finite entries")
    h = 1e-5 * mesh.bbox_diagonal() if fd_step is None else float(fd_step)
    if h <= 0 or h < 1e-300:
        raise ValueError("finite-difference step underflow")
    cache = build_cache(mesh)
    analytic = _analytic_variation(cache, params, phi, functional)
    direction = phi[:, None] * cache.normals
    f_plus = _functional_value(mesh.with_vertices(mesh.vertices + h * direction),
                               params, functional)
    f_minus = _functional_value(mesh.with_vertices(mesh.vertices - h * direction),
                                params, functional)
    return analytic, (f_plus - f_minus) / (2.0 * h)


def discrete_gradient_fd(mesh: TriangleMesh, params: FlowParams, functional: str,
                         fd_step: float | None = None) -> np.ndarray:
    """Exact (to FD accuracy) Euclidean gradient of a discrete functional.

    Central differences coordinate by coordinate; O(n) functional evaluations,
    intended for validation on coarse meshes.  Divide by the vertex areas for
    the L2(dmu) gradient comparable with the strong-form velocity.
    """
    h = 1e-6 * mesh.bbox_diagonal() if fd_step is None else float(fd_step)
    base = np.array(mesh.vertices)
    grad = np.empty_like(base)
    for i in range(mesh.n_vertices):
        for k in range(3):
            bump = base.copy()
            bump[i, k] += h
            fp = _functional_value(mesh.with_vertices(bump), params, functional)
            bump[i, k] -= 2 * h
            fm = _functional_value(mesh.with_vertices(bump), params, functional)
            grad[i, k] = (fp - fm) / (2.0 * h)
    return grad
