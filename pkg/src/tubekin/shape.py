"""Shape analyses on the parameterized surfaces: mean curvature (cotangent
Laplacian), radial curvature of cross-section contours, per-pixel temporal
normalization, membrane strain energy against a reference frame, and PCA
shape modes of cross-section contours."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix

from .mesh_core import TriMeshFrame, _boundary_cycles
from .parameterize import GridMesh
from .sections import Contour

logger = logging.getLogger(__name__)


@dataclass
class CurvatureImage:
    """Curvature sampled on the (station, circumferential) grid, 1/mm.

    kind is "mean" (cotangent Laplacian, positive for a sphere with
    outward normals) or "radial" (in-plane contour curvature, ignoring
    the longitudinal bend).
    """

    values: np.ndarray  # (m, n)
    kind: str
    frame_index: int = 0
    boundary_flags: Optional[np.ndarray] = None


def mean_curvature_vertices(mesh: TriMeshFrame) -> Tuple[np.ndarray, np.ndarray]:
    """Per-vertex mean curvature H = |Lx| / 2 with the sign taken from the
    agreement of the Laplacian with the outward vertex normal.

    Returns (H, boundary_mask); boundary vertices carry one-sided
    estimates and are flagged.
    """
    verts = mesh.vertices
    tris = mesh.triangles
    n = len(verts)
    p = verts[tris]
    cots = np.empty((len(tris), 3))
    for c in range(3):
        u = p[:, (c + 1) % 3] - p[:, c]
        w = p[:, (c + 2) % 3] - p[:, c]
        cr = np.linalg.norm(np.cross(u, w), axis=1)
        cr[cr < 1e-300] = 1e-300
        cots[:, c] = np.einsum("ij,ij->i", u, w) / cr

    rows, cols, vals = [], [], []
    # weight cot(angle opposite the edge), symmetric
    for (a, b), opp in (((0, 1), 2), ((1, 2), 0), ((2, 0), 1)):
        for i, j in ((a, b), (b, a)):
            rows.append(tris[:, i])
            cols.append(tris[:, j])
            vals.append(0.5 * cots[:, opp])
    W = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    lap = W @ verts - np.asarray(W.sum(axis=1)).ravel()[:, None] * verts

    # mixed Voronoi vertex areas (obtuse triangles fall back to area/2, /4)
    fa = mesh.triangle_areas()
    area = np.zeros(n)
    obtuse_any = (cots < 0).any(axis=1)
    for c in range(3):
        e1 = p[:, (c + 1) % 3] - p[:, c]
        e2 = p[:, (c + 2) % 3] - p[:, c]
        voronoi = 0.125 * (
            np.einsum("ij,ij->i", e1, e1) * cots[:, (c + 2) % 3]
            + np.einsum("ij,ij->i", e2, e2) * cots[:, (c + 1) % 3]
        )
        contrib = np.where(obtuse_any,
                           np.where(cots[:, c] < 0, fa / 2.0, fa / 4.0),
                           voronoi)
        np.add.at(area, tris[:, c], contrib)
    lap = lap / np.maximum(area, 1e-300)[:, None]

    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals = np.zeros((n, 3))
    np.add.at(normals, tris[:, 0], fn)
    np.add.at(normals, tris[:, 1], fn)
    np.add.at(normals, tris[:, 2], fn)
    nn = np.linalg.norm(normals, axis=1)
    normals = normals / np.maximum(nn, 1e-300)[:, None]

    H = 0.5 * np.linalg.norm(lap, axis=1)
    sign = -np.sign(np.einsum("ij,ij->i", lap, normals))
    sign[sign == 0] = 1.0
    H = H * sign

    boundary = np.zeros(n, dtype=bool)
    for cyc in _boundary_cycles(mesh):
        boundary[cyc] = True
    return H, boundary


def mean_curvature(surface) -> CurvatureImage:
    """Mean curvature image of a GridMesh (or per-vertex for a raw mesh)."""
    if isinstance(surface, GridMesh):
        mesh = surface.to_trimesh()
        H, boundary = mean_curvature_vertices(mesh)
        m, n = surface.points.shape[:2]
        return CurvatureImage(values=H.reshape(m, n), kind="mean",
                              frame_index=surface.frame_index,
                              boundary_flags=boundary.reshape(m, n))
    H, boundary = mean_curvature_vertices(surface)
    return CurvatureImage(values=H[None, :], kind="mean",
                          frame_index=surface.frame_index,
                          boundary_flags=boundary[None, :])


def contour_curvature(points2d: np.ndarray) -> np.ndarray:
    """Signed curvature per sample of a closed planar polyline via the
    circumscribed circle of each consecutive point triple (positive for
    counterclockwise convex contours)."""
    p = np.asarray(points2d, dtype=float)
    a = np.roll(p, 1, axis=0)
    c = np.roll(p, -1, axis=0)
    ab = p - a
    bc = c - p
    ca = a - c
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    la = np.linalg.norm(ab, axis=1)
    lb = np.linalg.norm(bc, axis=1)
    lc = np.linalg.norm(ca, axis=1)
    denom = la * lb * lc
    return 2.0 * cross / np.maximum(denom, 1e-300)


def radial_curvature_image(grid: GridMesh, contours: Sequence[Contour]) -> CurvatureImage:
    """Circumferential (in-plane) curvature image from station contours.

    Contours are sampled by arc length from the seam anchor; curvature is
    mapped to grid columns by the arc fraction (the grid's u spacing is
    approximately arc-length-even). Collapsed contours flag their row.
    """
    m, n = grid.points.shape[:2]
    values = np.full((m, n), np.nan)
    flags = np.zeros((m, n), dtype=bool)
    for c in contours:
        kappa = contour_curvature(c.points2d)
        K = len(kappa)
        x = np.arange(n) / n * K
        i0 = np.floor(x).astype(int) % K
        i1 = (i0 + 1) % K
        w = x - np.floor(x)
        values[c.station] = (1.0 - w) * kappa[i0] + w * kappa[i1]
        if c.self_touching:
            flags[c.station] = True
    return CurvatureImage(values=values, kind="radial",
                          frame_index=grid.frame_index, boundary_flags=flags)


@dataclass
class NormalizedStack:
    """Per-pixel min/max temporal normalization of a curvature stack."""

    values: np.ndarray        # (T, m, n) in [0, 1]
    peak_frame: np.ndarray    # (m, n) frame of the per-pixel maximum
    constant_pixels: np.ndarray  # (m, n) bool, set to 0.5


def normalize_per_pixel(stack, eps: float = 1e-12) -> NormalizedStack:
    """Rescale each pixel's time series to [0, 1]; constant pixels become
    0.5 and are flagged."""
    arr = np.stack([s.values if isinstance(s, CurvatureImage) else np.asarray(s)
                    for s in stack])
    lo = arr.min(axis=0)
    hi = arr.max(axis=0)
    rng = hi - lo
    constant = rng < eps
    safe = np.where(constant, 1.0, rng)
    out = (arr - lo) / safe
    out[:, constant] = 0.5
    return NormalizedStack(values=out, peak_frame=np.argmax(arr, axis=0),
                           constant_pixels=constant)


# ---------------------------------------------------------------------------
# Strain energy
# ---------------------------------------------------------------------------

@dataclass
class StrainField:
    """Principal stretches and strain energy per grid cell vs a reference."""

    lambda1: np.ndarray  # (m-1, n)
    lambda2: np.ndarray
    energy: np.ndarray
    degenerate: np.ndarray


def _cell_edges(points: np.ndarray) -> np.ndarray:
    """Per-cell 2D edge vectors in a local tangent frame.

    Cells are the (m-1) x n quads (periodic in u); each contributes the
    four edge vectors of its two triangles, expressed in an orthonormal
    in-plane basis. Returns (m-1, n, 4, 2).
    """
    p = np.concatenate([points, points[:, :1]], axis=1)
    p00 = p[:-1, :-1]
    p01 = p[:-1, 1:]
    p10 = p[1:, :-1]
    p11 = p[1:, 1:]
    e1 = p01 - p00
    e2 = p11 - p00
    e3 = p10 - p00
    ex = e1 / np.maximum(np.linalg.norm(e1, axis=-1, keepdims=True), 1e-300)
    nrm = np.cross(e1, e3)
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=-1, keepdims=True), 1e-300)
    ey = np.cross(nrm, ex)
    edges = np.stack([e1, e2, e2, e3], axis=2)  # tri1: e1,e2; tri2: e2,e3
    return np.stack([
        np.einsum("mnkj,mnj->mnk", edges, ex),
        np.einsum("mnkj,mnj->mnk", edges, ey),
    ], axis=-1)


def strain_energy(grid: GridMesh, reference: GridMesh) -> StrainField:
    """Membrane strain energy of each grid cell relative to the reference.

    The 2D deformation gradient of the tangent map is the least-squares
    fit over the cell's two triangles; lambda are its singular values and
    E = (lambda1 - 1)^2 + (lambda2 - 1)^2.
    """
    if grid.points.shape != reference.points.shape:
        raise ValueError("grids must share (n, m) to compare strain")
    E_ref = _cell_edges(reference.points)
    E_cur = _cell_edges(grid.points)
    A = np.einsum("mnki,mnkj->mnij", E_cur, E_ref)   # sum e E^T
    B = np.einsum("mnki,mnkj->mnij", E_ref, E_ref)   # sum E E^T
    det = B[..., 0, 0] * B[..., 1, 1] - B[..., 0, 1] * B[..., 1, 0]
    degenerate = np.abs(det) < 1e-300
    det_safe = np.where(degenerate, 1.0, det)
    Binv = np.empty_like(B)
    Binv[..., 0, 0] = B[..., 1, 1] / det_safe
    Binv[..., 1, 1] = B[..., 0, 0] / det_safe
    Binv[..., 0, 1] = -B[..., 0, 1] / det_safe
    Binv[..., 1, 0] = -B[..., 1, 0] / det_safe
    F = np.einsum("mnij,mnjk->mnik", A, Binv)
    sv = np.linalg.svd(F, compute_uv=False)
    lam1 = sv[..., 0]
    lam2 = sv[..., 1]
    energy = (lam1 - 1.0) ** 2 + (lam2 - 1.0) ** 2
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} degenerate reference cells flagged")
        energy[degenerate] = np.nan
    return StrainField(lambda1=lam1, lambda2=lam2, energy=energy,
                       degenerate=degenerate)


# ---------------------------------------------------------------------------
# Contour shape modes
# ---------------------------------------------------------------------------

@dataclass
class ContourSet:
    """Cross-section contours grouped by (station, phase) for shape PCA."""

    groups: Dict[tuple, list]

    def add(self, station: int, phase: str, contour: Contour):
        self.groups.setdefault((station, phase), []).append(contour)


@dataclass
class ShapeModes:
    """Mean contour and orthogonal displacement modes for one group."""

    station: int
    phase: str
    mean_contour: np.ndarray     # (K, 2)
    modes: np.ndarray            # (n_modes, K, 2) unit displacement fields
    variances: np.ndarray        # (n_modes,)
    n_contours: int

    def variance_fractions(self) -> np.ndarray:
        total = self.variances.sum()
        return self.variances / total if total > 0 else self.variances

    def displacement(self, mode: int, scale: float = 1.0) -> np.ndarray:
        return self.mean_contour + scale * self.modes[mode]


def _pca_group(contours: Sequence[Contour], n_modes: int) -> tuple:
    K = contours[0].n_samples
    data = np.empty((len(contours), 2 * K))
    for i, c in enumerate(contours):
        pts = c.points2d - c.points2d.mean(axis=0)
        data[i] = pts.reshape(-1)
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s ** 2 / max(len(contours) - 1, 1)
    keep = min(n_modes, len(variances))
    nonzero = variances > 1e-30
    keep = min(keep, int(nonzero.sum()))
    modes = vt[:keep].reshape(keep, K, 2)
    return mean.reshape(K, 2), modes, variances[:keep]


def contour_pca(contour_set: ContourSet, n_modes: int = 3) -> Dict[tuple, ShapeModes]:
    """PCA shape modes per (station, phase) group.

    Contours must be seam-aligned and arc-length resampled to a common
    sample count; each is centered by its centroid (the plane frames are
    already rotationally consistent). Modes are reported as per-sample
    displacement fields from the mean contour.
    """
    out = {}
    for (station, phase), contours in sorted(contour_set.groups.items()):
        if len(contours) < 3:
            warnings.warn(f"group (station={station}, {phase}) has "
                          f"{len(contours)} contours; skipping PCA")
            continue
        counts = {c.n_samples for c in contours}
        if len(counts) != 1:
            raise ValueError("contours in a PCA group must share sample counts")
        requested = n_modes
        mean, modes, variances = _pca_group(contours, n_modes)
        if len(variances) < requested:
            warnings.warn(
                f"group (station={station}, {phase}): only {len(variances)} "
                f"of {requested} modes available"
            )
        out[(station, phase)] = ShapeModes(
            station=station,
            phase=phase,
            mean_contour=mean,
            modes=modes,
            variances=variances,
            n_contours=len(contours),
        )
    return out
