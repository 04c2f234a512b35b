"""Cross-section planes, planar contours and their areas.

Section planes are built from three equally spaced points on each grid
row, so they follow the tube even where it bends; a validation pass
checks that adjacent sections never intersect inside the tube (the
failure mode of centerline-perpendicular planes on bent tubes).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mesh_core import TriMeshFrame
from .parameterize import GridMesh

logger = logging.getLogger(__name__)


class SectionError(RuntimeError):
    """Cross-section extraction failed."""


@dataclass
class SectionPlane:
    """Plane through three equally spaced points of one grid row."""

    station: int
    point: np.ndarray
    normal: np.ndarray
    anchor: np.ndarray  # u=0 defining point, fixes the in-plane x axis

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.point) @ self.normal

    def frame_axes(self):
        x = self.anchor - self.point
        x = x - (x @ self.normal) * self.normal
        nx = np.linalg.norm(x)
        if nx < 1e-12:
            raise SectionError(f"station {self.station}: anchor coincides with plane origin")
        x = x / nx
        y = np.cross(self.normal, x)
        return x, y

    def to_plane_2d(self, pts: np.ndarray) -> np.ndarray:
        x, y = self.frame_axes()
        d = np.asarray(pts) - self.point
        return np.column_stack([d @ x, d @ y])


@dataclass
class Contour:
    """Closed planar cross-section polyline (mm, in-plane coordinates).

    Sample 0 is the seam anchor (intersection nearest grid column u=0);
    orientation is counterclockwise about the plane normal.
    """

    points2d: np.ndarray
    station: int
    frame_index: int
    label: str = "outer"
    self_touching: bool = False
    plane: Optional[SectionPlane] = None
    anchor_index: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.points2d)

    def perimeter(self) -> float:
        d = np.diff(np.vstack([self.points2d, self.points2d[:1]]), axis=0)
        return float(np.linalg.norm(d, axis=1).sum())


def _row_point(points: np.ndarray, u: float) -> np.ndarray:
    """Point at circumferential parameter u on a grid row (periodic lerp)."""
    n = points.shape[0]
    x = (u % 1.0) * n
    i = int(np.floor(x)) % n
    w = x - np.floor(x)
    return (1.0 - w) * points[i] + w * points[(i + 1) % n]


def section_planes(grid: GridMesh) -> list:
    """One plane per grid station, through the row's u = 0, 1/3, 2/3 points.

    Normals are oriented toward increasing v. Collinear defining points
    raise SectionError with the offending station.
    """
    m = grid.m
    planes = []
    for j in range(m):
        row = grid.points[j]
        p0 = _row_point(row, 0.0)
        p1 = _row_point(row, 1.0 / 3.0)
        p2 = _row_point(row, 2.0 / 3.0)
        nrm = np.cross(p1 - p0, p2 - p0)
        scale = max(np.linalg.norm(p1 - p0), np.linalg.norm(p2 - p0), 1e-300)
        if np.linalg.norm(nrm) < 1e-9 * scale * scale:
            raise SectionError(f"station {j}: collinear plane-defining points")
        nrm = nrm / np.linalg.norm(nrm)
        jn = min(j + 1, m - 1)
        jp = max(j - 1, 0)
        vdir = grid.points[jn].mean(axis=0) - grid.points[jp].mean(axis=0)
        if nrm @ vdir < 0:
            nrm = -nrm
        planes.append(SectionPlane(station=j, point=(p0 + p1 + p2) / 3.0,
                                   normal=nrm, anchor=p0))
    return planes


def centerline_section_planes(grid: GridMesh, jitter: float = 0.0) -> list:
    """Control-experiment planes: perpendicular to an estimated medial axis.

    The axis is the polyline of per-station row centroids (optionally
    jittered to mimic segmentation noise in axis estimation); tangents are
    central differences. On bent tubes these planes can intersect inside
    the tube, which is what section_planes avoids.
    """
    axis = grid.points.mean(axis=1)
    if jitter > 0:
        m = len(axis)
        offs = np.zeros((m, 3))
        offs[:, 0] = jitter * np.cos(np.arange(m) * 2.1)
        offs[:, 2] = jitter * np.sin(np.arange(m) * 1.7)
        axis = axis + offs
    planes = []
    m = grid.m
    for j in range(m):
        jn = min(j + 1, m - 1)
        jp = max(j - 1, 0)
        tangent = axis[jn] - axis[jp]
        nt = np.linalg.norm(tangent)
        if nt < 1e-12:
            raise SectionError(f"station {j}: degenerate centerline tangent")
        nrm = tangent / nt
        planes.append(SectionPlane(station=j, point=axis[j], normal=nrm,
                                   anchor=grid.points[j, 0]))
    return planes


def _resample_closed(points2d: np.ndarray, n_samples: int, start_index: int = 0) -> np.ndarray:
    pts = np.roll(points2d, -start_index, axis=0)
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return np.repeat(pts[:1], n_samples, axis=0)
    want = np.arange(n_samples) / n_samples * total
    idx = np.searchsorted(s, want, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    w = (want - s[idx]) / np.maximum(seg[idx], 1e-300)
    return (1.0 - w)[:, None] * closed[idx] + w[:, None] * closed[idx + 1]


def _orient_ccw(points2d: np.ndarray) -> np.ndarray:
    x = points2d[:, 0]
    y = points2d[:, 1]
    area2 = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    if area2 < 0:
        return np.vstack([points2d[:1], points2d[:0:-1]])
    return points2d


def _finalize_contour(pts2d, plane, frame_index, label, n_samples,
                      self_touch_area=1e-4):
    pts2d = _orient_ccw(pts2d)
    anchor2d = plane.to_plane_2d(plane.anchor[None, :])[0]
    start = int(np.argmin(np.linalg.norm(pts2d - anchor2d, axis=1)))
    res = _resample_closed(pts2d, n_samples, start)
    area = _shoelace(res)
    return Contour(
        points2d=res,
        station=plane.station,
        frame_index=frame_index,
        label=label,
        self_touching=bool(area < self_touch_area),
        plane=plane,
    )


def _shoelace(pts: np.ndarray) -> float:
    x = pts[:, 0]
    y = pts[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def contour_area(contour) -> float:
    """Enclosed area of a closed planar polyline (shoelace, absolute)."""
    pts = contour.points2d if isinstance(contour, Contour) else np.asarray(contour)
    if len(pts) < 3:
        return 0.0
    return _shoelace(pts)


def extract_contour(mesh: TriMeshFrame, plane: SectionPlane,
                    n_samples: int = 100, frame_index: Optional[int] = None,
                    label: str = "outer") -> Contour:
    """Intersect a mesh with a section plane and chain the crossing
    segments into one closed contour.

    When several loops exist, the one nearest the plane's defining points
    is kept. An open chain aborts with SectionError.
    """
    verts = mesh.vertices
    tris = mesh.triangles
    d = plane.signed_distance(verts)
    side = d > 0
    tri_side = side[tris]
    crossed = np.nonzero(tri_side.any(axis=1) & ~tri_side.all(axis=1))[0]
    if not len(crossed):
        raise SectionError(f"station {plane.station}: plane misses the mesh")

    segments = []
    for fi in crossed:
        tri = tris[fi]
        pts = []
        keys = []
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            da, db = d[a], d[b]
            if (da > 0) != (db > 0):
                t = da / (da - db)
                pts.append(verts[a] + t * (verts[b] - verts[a]))
                keys.append((a, b) if a < b else (b, a))
        if len(pts) == 2:
            segments.append((keys[0], keys[1], pts[0], pts[1]))

    nxt = {}
    pos = {}
    for k1, k2, p1, p2 in segments:
        nxt.setdefault(k1, []).append(k2)
        nxt.setdefault(k2, []).append(k1)
        pos[k1] = p1
        pos[k2] = p2
    loops = []
    visited = set()
    for start in nxt:
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        prev = None
        cur = start
        closed = False
        while True:
            nbrs = [k for k in nxt[cur] if k != prev]
            if not nbrs:
                break
            nx = nbrs[0]
            if nx == start:
                closed = True
                break
            if nx in visited:
                break
            loop.append(nx)
            visited.add(nx)
            prev, cur = cur, nx
        if closed and len(loop) >= 3:
            loops.append(loop)
    if not loops:
        raise SectionError(f"station {plane.station}: open intersection chain")

    defining = np.vstack([plane.anchor, plane.point])
    best, best_d = None, np.inf
    for loop in loops:
        pts3 = np.asarray([pos[k] for k in loop])
        dd = min(np.linalg.norm(pts3 - q, axis=1).min() for q in defining)
        if dd < best_d:
            best, best_d = pts3, dd
    pts2d = plane.to_plane_2d(best)
    fi = mesh.frame_index if frame_index is None else frame_index
    return _finalize_contour(pts2d, plane, fi, label, n_samples)


def grid_contours(grid: GridMesh, planes: Sequence[SectionPlane],
                  n_samples: int = 100) -> list:
    """Contours of a grid surface for all station planes (fast path).

    Interior stations use the crossing of each grid column with the
    plane (one sample per column, so sample u-positions follow the grid);
    the end stations use the boundary rows themselves, which lie in the
    end planes for tubes segmented between fixed end planes.
    """
    pts = grid.points
    m, n, _ = pts.shape
    out = []
    for plane in planes:
        j = plane.station
        if j == 0 or j == m - 1:
            row = pts[0] if j == 0 else pts[-1]
            pts2d = plane.to_plane_2d(row)
        else:
            dist = (pts.reshape(-1, 3) - plane.point) @ plane.normal
            dist = dist.reshape(m, n)
            cross = dist[:-1] * dist[1:] <= 0
            rows = np.arange(m - 1)[:, None]
            cost = np.where(cross, np.abs(rows - (j - 0.5)), np.inf)
            pick = np.argmin(cost, axis=0)
            if np.isinf(cost[pick, np.arange(n)]).any():
                missing = int(np.nonzero(np.isinf(cost[pick, np.arange(n)]))[0][0])
                raise SectionError(
                    f"station {j}: column {missing} does not cross the plane"
                )
            d0 = dist[pick, np.arange(n)]
            d1 = dist[pick + 1, np.arange(n)]
            t = d0 / np.where(np.abs(d0 - d1) < 1e-300, 1e-300, d0 - d1)
            t = np.clip(t, 0.0, 1.0)
            p0 = pts[pick, np.arange(n)]
            p1 = pts[pick + 1, np.arange(n)]
            pts3 = (1.0 - t)[:, None] * p0 + t[:, None] * p1
            pts2d = plane.to_plane_2d(pts3)
        out.append(_finalize_contour(pts2d, plane, grid.frame_index,
                                     grid.label, n_samples))
    return out


@dataclass
class NonIntersectionReport:
    violations: list  # (station_low, station_high, worst_penetration)
    checked_pairs: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_nonintersection(planes: Sequence[SectionPlane],
                             contours: Sequence[Contour],
                             tolerance: Optional[float] = None) -> NonIntersectionReport:
    """Check that adjacent cross sections do not interleave.

    For each adjacent station pair, every point of the lower contour must
    be on the non-positive side of the upper plane and vice versa.
    Report-only: callers decide whether violations are fatal.
    """
    if len(planes) != len(contours):
        raise ValueError("need one contour per plane")
    scale = max(float(np.abs(c.points2d).max()) for c in contours if len(c.points2d))
    tol = 1e-9 * max(scale, 1.0) if tolerance is None else tolerance
    violations = []
    pairs = 0

    def points3d(contour):
        x, y = contour.plane.frame_axes()
        return (contour.plane.point
                + contour.points2d[:, :1] * x
                + contour.points2d[:, 1:] * y)

    p3 = [points3d(c) for c in contours]
    for j in range(len(planes) - 1):
        pairs += 1
        d_lo = planes[j + 1].signed_distance(p3[j])
        d_hi = planes[j].signed_distance(p3[j + 1])
        worst = max(float(d_lo.max(initial=-np.inf)), float(-d_hi.min(initial=np.inf)))
        if (d_lo > tol).any() or (d_hi < -tol).any():
            violations.append((j, j + 1, worst))
    return NonIntersectionReport(violations=violations, checked_pairs=pairs,
                                 tolerance=tol)
