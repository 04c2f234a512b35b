"""Cut, flatten and resample tube meshes onto a consistent (u, v) grid.

Each frame is cut open along its shortest inlet-to-outlet geodesic,
mapped to the unit square with the area-weighted (authalic) linear
system, and resampled on a uniform n x m lattice. The circumferential
coordinate u is periodic across the seam; v runs from the inlet (v=0)
to the outlet (v=1).
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from matplotlib.tri import Triangulation, TrapezoidMapTriFinder
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .mesh_core import (
    GeodesicGraph,
    GeodesicPath,
    SurfacePoint,
    TopologyError,
    TriMeshFrame,
    _boundary_cycles,
    boundary_loops,
    closest_point_on_loop,
    connectivity,
    point_to_point_geodesic,
    validate_topology,
)

logger = logging.getLogger(__name__)


class FlatteningError(RuntimeError):
    """Flattening or resampling could not produce a valid parameterization."""


# ---------------------------------------------------------------------------
# Cutting along the seam
# ---------------------------------------------------------------------------

@dataclass
class CutMesh:
    """Tube mesh cut open along the seam into a topological disk.

    Seam vertices are duplicated: ``seam_left`` keeps the original ids
    (pinned to u=0), ``seam_right`` holds the copies (u=1). ``start_chain``
    and ``end_chain`` are the opened boundary loops at the seam start
    (v=0) and seam end (v=1), both ordered from the left copy to the
    right copy.
    """

    vertices: np.ndarray
    faces: np.ndarray
    seam_left: np.ndarray
    seam_right: np.ndarray
    start_chain: np.ndarray
    end_chain: np.ndarray
    source: TriMeshFrame


class _MutableMesh:
    """Face list with edge splits; incidence is the cached numpy
    connectivity plus a small override map for edges touched by splits."""

    def __init__(self, mesh: TriMeshFrame):
        self.conn = connectivity(mesh)
        self.n0 = mesh.n_vertices
        self.extra_verts = []
        self.faces = mesh.triangles.tolist()
        self.override = {}

    @staticmethod
    def _key(e):
        a, b = e
        return (a, b) if a < b else (b, a)

    def _incidence(self, key):
        if key in self.override:
            return self.override[key]
        if key[1] < self.n0:
            e = self.conn.edge_id(*key)
            if e >= 0:
                return [int(f) for f in self.conn.edge_faces[e] if f >= 0]
        return None

    def _set(self, key, faces):
        self.override[key] = faces

    def split_edge(self, a: int, b: int, pos) -> int:
        vid = self.n0 + len(self.extra_verts)
        self.extra_verts.append(np.asarray(pos, dtype=float))
        key = self._key((a, b))
        incident = self._incidence(key)
        if incident is None:
            raise FlatteningError(f"cannot split missing edge ({a},{b})")
        self._set(key, None)
        for fi in incident:
            f = self.faces[fi]
            for k in range(3):
                x, y = f[k], f[(k + 1) % 3]
                if (x == a and y == b) or (x == b and y == a):
                    o = f[(k + 2) % 3]
                    break
            else:
                continue
            nfi = len(self.faces)
            self.faces[fi] = [x, vid, o]
            self.faces.append([vid, y, o])
            kxv = self._key((x, vid))
            self._set(kxv, (self._incidence(kxv) or []) + [fi])
            kvy = self._key((vid, y))
            self._set(kvy, (self._incidence(kvy) or []) + [nfi])
            kvo = self._key((vid, o))
            self._set(kvo, (self._incidence(kvo) or []) + [fi, nfi])
            kyo = self._key((y, o))
            yo = list(self._incidence(kyo) or [])
            if fi in yo:
                yo[yo.index(fi)] = nfi
            self._set(kyo, yo)
        return vid


def _point_faces(conn, sp: SurfacePoint):
    if sp.vertex is not None:
        return set(conn.vertex_faces(int(sp.vertex)))
    return set(int(f) for f in conn.faces_of_edge(*sp.edge))


def _simplify_seam(mesh: TriMeshFrame, points, tol: float):
    """Drop interior seam points that sit on the straight segment between
    face-sharing neighbors (micro-wiggles left by path straightening)."""
    conn = connectivity(mesh)
    pts = list(points)
    changed = True
    while changed and len(pts) > 2:
        changed = False
        i = 1
        while i < len(pts) - 1:
            a = np.asarray(pts[i - 1].position)
            b = np.asarray(pts[i + 1].position)
            p = np.asarray(pts[i].position)
            ab = b - a
            lab = np.linalg.norm(ab)
            if lab < 1e-300:
                dev = np.linalg.norm(p - a)
            else:
                t = float(np.dot(p - a, ab) / (lab * lab))
                dev = np.linalg.norm(p - (a + np.clip(t, 0, 1) * ab))
            if dev < tol and (_point_faces(conn, pts[i - 1]) & _point_faces(conn, pts[i + 1])):
                del pts[i]
                changed = True
            else:
                i += 1
    return pts


def cut_along_geodesic(mesh: TriMeshFrame, seam: GeodesicPath,
                       snap: float = 0.01) -> CutMesh:
    """Cut a tube mesh open along a boundary-to-boundary seam path.

    Seam points interior to edges become new vertices (edge splits), the
    seam vertex chain is then duplicated and incident faces reattached on
    one side, turning the annulus into a disk. Triangle count is
    preserved up to the splits. Points within ``snap`` (edge fraction) of
    an edge endpoint snap to the vertex, which keeps the refinement free
    of sliver triangles that the flattening could not keep injective.
    """
    report = validate_topology(mesh)
    if report.boundary_loop_count != 2:
        raise TopologyError(
            f"cut requires tube topology, found {report.boundary_loop_count} boundary loops"
        )

    mm = _MutableMesh(mesh)
    seam_points = _simplify_seam(mesh, seam.points,
                                 tol=0.01 * mesh.mean_edge_length())

    # group seam points by carrier edge, keep path order for id lookup
    by_edge = defaultdict(list)
    for idx, sp in enumerate(seam_points):
        if sp.vertex is None:
            t = sp.t
            a, b = sp.edge
            if t <= snap or t >= 1 - snap:
                continue
            by_edge[mm._key((a, b))].append((idx, sp))
    point_id = {}
    for key, entries in by_edge.items():
        a, b = key
        oriented = []
        for idx, sp in entries:
            t = sp.t if sp.edge[0] == a else 1.0 - sp.t
            oriented.append((t, idx, sp))
        oriented.sort()
        seg_start = a
        prev_t = None
        for t, idx, sp in oriented:
            if prev_t is not None and t - prev_t < 1e-9:
                point_id[idx] = seg_start  # coincident with the previous split
                continue
            vid = mm.split_edge(seg_start, b, sp.position)
            point_id[idx] = vid
            seg_start = vid
            prev_t = t

    seam_ids = []
    for idx, sp in enumerate(seam_points):
        if sp.vertex is not None:
            vid = sp.vertex
        elif idx in point_id:
            vid = point_id[idx]
        else:  # snapped to an endpoint of its edge
            vid = sp.edge[0] if sp.t <= snap else sp.edge[1]
        if not seam_ids or seam_ids[-1] != vid:
            seam_ids.append(int(vid))
    if len(seam_ids) < 2:
        raise FlatteningError("seam collapsed to fewer than two vertices")
    if len(set(seam_ids)) != len(seam_ids):
        raise FlatteningError("seam self-intersection")

    # shortcut seam corners that wrap two edges of a single refined face:
    # the chord is an existing edge and never longer (triangle inequality)
    face_triples = {frozenset(f) for f in mm.faces}
    changed = True
    while changed and len(seam_ids) > 2:
        changed = False
        i = 1
        while i < len(seam_ids) - 1:
            trio = frozenset((seam_ids[i - 1], seam_ids[i], seam_ids[i + 1]))
            if len(trio) == 3 and trio in face_triples:
                del seam_ids[i]
                changed = True
            else:
                i += 1

    if mm.extra_verts:
        verts = np.vstack([mesh.vertices, np.asarray(mm.extra_verts)])
    else:
        verts = mesh.vertices.copy()
    faces = mm.faces
    faces_arr = np.asarray(faces, dtype=np.int64)
    nv = len(verts)

    # directed edge -> face lookup (sorted key arrays, queried at the seam only)
    dkeys = np.concatenate([
        faces_arr[:, 0] * nv + faces_arr[:, 1],
        faces_arr[:, 1] * nv + faces_arr[:, 2],
        faces_arr[:, 2] * nv + faces_arr[:, 0],
    ])
    dorder = np.argsort(dkeys, kind="stable")
    dsorted = dkeys[dorder]
    nf = len(faces_arr)

    def directed_face(a, b):
        key = a * nv + b
        pos = np.searchsorted(dsorted, key)
        if pos >= len(dsorted) or dsorted[pos] != key:
            return None
        return int(dorder[pos]) % nf

    # face incidence, restricted to seam vertices
    seam_arr = np.asarray(seam_ids, dtype=np.int64)
    touch = np.isin(faces_arr, seam_arr)
    vertex_faces = defaultdict(list)
    for fi in np.nonzero(touch.any(axis=1))[0]:
        for v in faces_arr[fi]:
            vertex_faces[int(v)].append(int(fi))

    seam_edge_keys = set()
    for a, b in zip(seam_ids[:-1], seam_ids[1:]):
        seam_edge_keys.add(mm._key((a, b)))
        if directed_face(a, b) is None or directed_face(b, a) is None:
            raise FlatteningError("seam touches the mesh boundary between its endpoints")

    k_last = len(seam_ids) - 1
    right_faces = defaultdict(set)
    for i, s in enumerate(seam_ids):
        nxt = seam_ids[i + 1] if i < k_last else None
        prv = seam_ids[i - 1] if i > 0 else None
        anchor = directed_face(s, nxt) if nxt is not None else directed_face(prv, s)
        if anchor is None:
            raise FlatteningError("seam chain is not edge-connected")
        incident = vertex_faces[s]
        # faces adjacent through non-seam edges at s form the side components
        adj = defaultdict(list)
        for fi in incident:
            f = faces[fi]
            for v in f:
                if v == s:
                    continue
                key = mm._key((s, v))
                if key not in seam_edge_keys:
                    adj[key].append(fi)
        left = {anchor}
        stack = [anchor]
        links = defaultdict(list)
        for key, fs in adj.items():
            if len(fs) == 2:
                links[fs[0]].append(fs[1])
                links[fs[1]].append(fs[0])
        while stack:
            f = stack.pop()
            for g in links[f]:
                if g not in left:
                    left.add(g)
                    stack.append(g)
        right = [fi for fi in incident if fi not in left]
        if not right:
            raise FlatteningError(f"seam vertex {s} has no off-side faces; cannot cut")
        right_faces[i].update(right)

    dup = {}
    new_rows = []
    for i, s in enumerate(seam_ids):
        dup[i] = len(verts) + len(new_rows)
        new_rows.append(verts[s])
    verts = np.vstack([verts, np.asarray(new_rows)])
    for i, s in enumerate(seam_ids):
        for fi in right_faces[i]:
            f = faces[fi]
            faces[fi] = [dup[i] if v == s else v for v in f]

    cut = TriMeshFrame(verts, np.asarray(faces, dtype=np.int64),
                       mesh.frame_index, mesh.time)
    cycles = _boundary_cycles(cut)
    if len(cycles) != 1:
        raise FlatteningError(f"cut did not produce a disk ({len(cycles)} boundary loops)")
    used = np.unique(cut.triangles)
    chi = len(used) - len(connectivity(cut).edges) + cut.n_triangles
    if chi != 1:
        raise FlatteningError(f"cut mesh has Euler characteristic {chi}, expected 1")

    seam_left = np.asarray(seam_ids, dtype=np.int64)
    seam_right = np.asarray([dup[i] for i in range(len(seam_ids))], dtype=np.int64)
    start_chain, end_chain = _split_boundary(cycles[0], seam_left, seam_right)
    return CutMesh(
        vertices=cut.vertices,
        faces=cut.triangles,
        seam_left=seam_left,
        seam_right=seam_right,
        start_chain=start_chain,
        end_chain=end_chain,
        source=mesh,
    )


def _split_boundary(cycle: np.ndarray, seam_left: np.ndarray, seam_right: np.ndarray):
    """Carve the disk boundary cycle into the two opened end chains."""
    cyc = list(cycle)
    n = len(cyc)
    s0, sk = int(seam_left[0]), int(seam_left[-1])
    d0, dk = int(seam_right[0]), int(seam_right[-1])
    idx = cyc.index(s0)
    cyc = cyc[idx:] + cyc[:idx]
    if len(seam_left) > 1 and cyc[1] != int(seam_left[1]):
        cyc = [cyc[0]] + cyc[:0:-1]
    expect = [int(v) for v in seam_left]
    if cyc[: len(expect)] != expect:
        raise FlatteningError("cut boundary does not contain the seam chain")
    pos = len(expect) - 1  # at sk
    end_chain = [sk]
    p = pos
    while cyc[p] != dk:
        p += 1
        if p >= n:
            raise FlatteningError("cut boundary misses the right seam end")
        end_chain.append(cyc[p])
    expect_r = [int(v) for v in seam_right[::-1]]
    if cyc[p: p + len(expect_r)] != expect_r:
        raise FlatteningError("cut boundary does not contain the duplicated seam chain")
    p = p + len(expect_r) - 1  # at d0
    start_rev = [d0]
    while cyc[p] != s0:
        p = (p + 1) % n
        start_rev.append(cyc[p])
        if len(start_rev) > n:
            raise FlatteningError("cut boundary walk failed")
    start_chain = start_rev[::-1]
    return np.asarray(start_chain, dtype=np.int64), np.asarray(end_chain, dtype=np.int64)


# ---------------------------------------------------------------------------
# Flattening
# ---------------------------------------------------------------------------

@dataclass
class FlattenedFrame:
    """Unit-square parameterization of a cut frame."""

    uv: np.ndarray
    cut: CutMesh
    residual: float
    clamped_weights: int = 0

    @property
    def parameter_areas(self) -> np.ndarray:
        uv = self.uv[self.cut.faces]
        d1 = uv[:, 1] - uv[:, 0]
        d2 = uv[:, 2] - uv[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _arclength_fractions(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total <= 0:
        raise FlatteningError("zero-length boundary chain")
    return np.concatenate([[0.0], np.cumsum(seg)]) / total


def _authalic_weights(verts: np.ndarray, faces: np.ndarray, clamp_factor: float = 10.0):
    """Directed edge weights cot(angle at far vertex) / squared edge length."""
    p = verts[faces]
    cots = np.empty((len(faces), 3))
    for c in range(3):
        u = p[:, (c + 1) % 3] - p[:, c]
        w = p[:, (c + 2) % 3] - p[:, c]
        cr = np.linalg.norm(np.cross(u, w), axis=1)
        cr[cr < 1e-300] = 1e-300
        cots[:, c] = np.einsum("ij,ij->i", u, w) / cr
    r2 = {}
    for a, b in ((0, 1), (1, 2), (2, 0)):
        d = p[:, a] - p[:, b]
        r2[(a, b)] = np.einsum("ij,ij->i", d, d)
        r2[(b, a)] = r2[(a, b)]
    rows, cols, vals = [], [], []
    for ci, cj in ((0, 1), (1, 0), (1, 2), (2, 1), (2, 0), (0, 2)):
        rows.append(faces[:, ci])
        cols.append(faces[:, cj])
        vals.append(cots[:, cj] / np.maximum(r2[(ci, cj)], 1e-300))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    n = len(verts)
    W = coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    W.sum_duplicates()
    abs_sum = np.abs(W).sum(axis=1).A1
    deg = np.diff(W.indptr)
    mean_abs = abs_sum / np.maximum(deg, 1)
    floor = -clamp_factor * mean_abs[np.repeat(np.arange(n), deg)]
    clamped = int((W.data < floor).sum())
    if clamped:
        warnings.warn(f"clamped {clamped} strongly negative authalic weights")
        W.data = np.maximum(W.data, floor)
    return W, clamped


def _solve_parameterization(cut: CutMesh, uv_boundary, boundary, clamp_factor,
                            residual_tol):
    uv = uv_boundary.copy()
    interior = ~boundary
    W, clamped = _authalic_weights(cut.vertices, cut.faces, clamp_factor)
    rowsum = np.asarray(W.sum(axis=1)).ravel()
    if interior.any():
        bad = np.nonzero(interior & (np.abs(rowsum) < 1e-300))[0]
        if len(bad):
            raise FlatteningError(f"singular flattening system at vertex {bad[0]}")
        ii = np.nonzero(interior)[0]
        A = (csr_matrix((rowsum[ii], (np.arange(len(ii)), np.arange(len(ii)))),
                        shape=(len(ii), len(ii)))
             - W[ii][:, ii])
        rhs = W[ii][:, boundary] @ uv[boundary]
        sol = spsolve(A.tocsc(), rhs)
        if sol.ndim == 1:
            sol = sol[:, None]
        resid = np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if resid > residual_tol:
            raise FlatteningError(f"flattening residual {resid:.2e} exceeds {residual_tol:.0e}")
        uv[ii] = sol
    else:
        resid = 0.0
    return uv, float(resid), clamped


def flatten_to_unit_square(cut: CutMesh, residual_tol: float = 1e-10) -> FlattenedFrame:
    """Map a cut tube frame to the unit square.

    Boundary conditions: the seam copies are pinned to u=0 and u=1 with v
    assigned by arc length along the seam; the opened end chains are
    pinned to v=0 and v=1 with u assigned by arc length. Interior
    vertices solve the area-weighted (authalic) linear system.
    """
    verts = cut.vertices
    n = len(verts)
    uv = np.full((n, 2), np.nan)

    seam_v = _arclength_fractions(verts[cut.seam_left])
    uv[cut.seam_left, 0] = 0.0
    uv[cut.seam_left, 1] = seam_v
    uv[cut.seam_right, 0] = 1.0
    uv[cut.seam_right, 1] = seam_v
    u_start = _arclength_fractions(verts[cut.start_chain])
    uv[cut.start_chain, 0] = u_start
    uv[cut.start_chain, 1] = 0.0
    u_end = _arclength_fractions(verts[cut.end_chain])
    uv[cut.end_chain, 0] = u_end
    uv[cut.end_chain, 1] = 1.0

    boundary = ~np.isnan(uv[:, 0])

    flat = None
    flips = -1
    for clamp_factor in (10.0, 0.0):
        solved, resid, clamped = _solve_parameterization(
            cut, uv, boundary, clamp_factor, residual_tol)
        flat = FlattenedFrame(uv=solved, cut=cut, residual=resid,
                              clamped_weights=clamped)
        areas = flat.parameter_areas
        if (areas < 0).sum() > (areas > 0).sum():
            flat.uv[:, 0] = 1.0 - flat.uv[:, 0]
            areas = -areas
        flips = int((areas <= 0).sum())
        if flips == 0:
            break
        if clamp_factor > 0:
            warnings.warn(
                f"{flips} flipped parameter triangles; retrying with "
                "nonnegative authalic weights"
            )
    if flips:
        raise FlatteningError(f"{flips} flipped parameter triangles after solve")
    return flat


# ---------------------------------------------------------------------------
# Grid resampling
# ---------------------------------------------------------------------------

@dataclass
class GridMesh:
    """An n x m lattice of surface points with (u, v) semantics.

    ``points[j, i]`` is the sample at u = i/n (circumferential, periodic)
    and v = j/(m-1) (longitudinal); row 0 lies on the inlet contour and
    column 0 on the seam geodesic.
    """

    points: np.ndarray  # (m, n, 3)
    frame_index: int = 0
    label: str = "outer"
    time: float = 0.0

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def wrapped_points(self) -> np.ndarray:
        return np.concatenate([self.points, self.points[:, :1]], axis=1)

    def to_trimesh(self) -> TriMeshFrame:
        m, n, _ = self.points.shape
        verts = self.points.reshape(-1, 3)
        rows = np.arange(m - 1)[:, None]
        cols = np.arange(n)[None, :]
        i00 = rows * n + cols
        i01 = rows * n + (cols + 1) % n
        i10 = (rows + 1) * n + cols
        i11 = (rows + 1) * n + (cols + 1) % n
        t1 = np.stack([i00, i01, i11], axis=-1).reshape(-1, 3)
        t2 = np.stack([i00, i11, i10], axis=-1).reshape(-1, 3)
        return TriMeshFrame(verts, np.concatenate([t1, t2]),
                            self.frame_index, self.time)

    def enclosed_volume(self) -> float:
        return grid_enclosed_volume(self.points)

    def station_depths(self) -> np.ndarray:
        """Cumulative longitudinal arc length per station, averaged over columns."""
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=2)  # (m-1, n)
        return np.concatenate([[0.0], np.cumsum(seg.mean(axis=1))])

    def mean_edge_length(self) -> float:
        du = np.linalg.norm(np.roll(self.points, -1, axis=1) - self.points, axis=2)
        dv = np.linalg.norm(np.diff(self.points, axis=0), axis=2)
        return float((du.mean() + dv.mean()) / 2.0)


def grid_enclosed_volume(points: np.ndarray) -> float:
    """Signed-volume magnitude of a grid tube closed with end-centroid fans."""
    p = np.concatenate([points, points[:, :1]], axis=1)
    a = p[:-1, :-1].reshape(-1, 3)
    b = p[:-1, 1:].reshape(-1, 3)
    c = p[1:, 1:].reshape(-1, 3)
    d = p[1:, :-1].reshape(-1, 3)
    total = np.einsum("ij,ij->i", a, np.cross(b, c)).sum()
    total += np.einsum("ij,ij->i", a, np.cross(c, d)).sum()
    for row, flip in ((points[0], True), (points[-1], False)):
        cen = row.mean(axis=0)
        nxt = np.roll(row, -1, axis=0)
        contrib = np.einsum("ij,ij->i", np.broadcast_to(cen, row.shape),
                            np.cross(row, nxt)).sum()
        total += -contrib if flip else contrib
    return abs(float(total / 6.0))


def grid_layer_volume(outer_points: np.ndarray, inner_points: np.ndarray) -> float:
    return grid_enclosed_volume(outer_points) - grid_enclosed_volume(inner_points)


def resample_grid(flat: FlattenedFrame, n: int = 80, m: int = 50,
                  frame_index: Optional[int] = None, label: str = "outer") -> GridMesh:
    """Sample the flattened frame on the uniform (u, v) lattice.

    Lattice nodes sit at u = i/n for i in [0, n) (periodic) and
    v = j/(m-1); each maps through its containing parameter triangle back
    to the surface by barycentric interpolation.
    """
    uv = flat.uv
    faces = flat.cut.faces
    tri = Triangulation(uv[:, 0], uv[:, 1], faces)
    finder = TrapezoidMapTriFinder(tri)
    eps = 1e-12
    us = np.clip(np.arange(n) / n, eps, 1 - eps)
    vs = np.clip(np.arange(m) / max(m - 1, 1), eps, 1 - eps)
    uu, vv = np.meshgrid(us, vs)
    qu = uu.ravel()
    qv = vv.ravel()
    hits = finder(qu, qv)
    if (hits < 0).any():
        for du, dv in ((1e-9, 0), (-1e-9, 0), (0, 1e-9), (0, -1e-9), (1e-9, 1e-9)):
            miss = hits < 0
            if not miss.any():
                break
            hits[miss] = finder(np.clip(qu[miss] + du, eps, 1 - eps),
                                np.clip(qv[miss] + dv, eps, 1 - eps))
        if (hits < 0).any():
            bad = int(np.nonzero(hits < 0)[0][0])
            raise FlatteningError(
                f"lattice point (u={qu[bad]:.6f}, v={qv[bad]:.6f}) outside parameterization"
            )
    corner = faces[hits]
    A = uv[corner[:, 0]]
    B = uv[corner[:, 1]]
    C = uv[corner[:, 2]]
    d1 = B - A
    d2 = C - A
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    det[np.abs(det) < 1e-300] = 1e-300
    px = qu - A[:, 0]
    py = qv - A[:, 1]
    w1 = (px * d2[:, 1] - py * d2[:, 0]) / det
    w2 = (py * d1[:, 0] - px * d1[:, 1]) / det
    w0 = 1.0 - w1 - w2
    pts = (
        w0[:, None] * flat.cut.vertices[corner[:, 0]]
        + w1[:, None] * flat.cut.vertices[corner[:, 1]]
        + w2[:, None] * flat.cut.vertices[corner[:, 2]]
    )
    fi = flat.cut.source.frame_index if frame_index is None else frame_index
    return GridMesh(pts.reshape(m, n, 3), frame_index=fi, label=label,
                    time=flat.cut.source.time)


# ---------------------------------------------------------------------------
# Projection to the inner surface and the lumen seam
# ---------------------------------------------------------------------------

def _closest_on_triangles(queries: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Closest points on candidate triangles (region-based, vectorized).

    queries : (N, 3); tris : (N, K, 3, 3). Returns (N, K, 3).
    """
    N, K = tris.shape[:2]
    a = tris[..., 0, :].reshape(-1, 3)
    b = tris[..., 1, :].reshape(-1, 3)
    c = tris[..., 2, :].reshape(-1, 3)
    p = np.repeat(queries, K, axis=0)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(a)
    denom = np.where(np.abs(va + vb + vc) < 1e-300, 1e-300, va + vb + vc)
    v = vb / denom
    w = vc / denom
    out[:] = a + v[:, None] * ab + w[:, None] * ac  # interior default

    r_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    t = np.clip((d4 - d3) / np.where(np.abs((d4 - d3) + (d5 - d6)) < 1e-300,
                                     1e-300, (d4 - d3) + (d5 - d6)), 0.0, 1.0)
    out = np.where(r_bc[:, None], b + t[:, None] * (c - b), out)
    r_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = np.clip(d2 / np.where(np.abs(d2 - d6) < 1e-300, 1e-300, d2 - d6), 0.0, 1.0)
    out = np.where(r_ac[:, None], a + t[:, None] * ac, out)
    r_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = np.clip(d1 / np.where(np.abs(d1 - d3) < 1e-300, 1e-300, d1 - d3), 0.0, 1.0)
    out = np.where(r_ab[:, None], a + t[:, None] * ab, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out.reshape(N, K, 3)


def closest_points_on_mesh(queries: np.ndarray, mesh: TriMeshFrame,
                           n_vertex_candidates: int = 3):
    """Closest surface points for a batch of queries.

    Candidate triangles are the stars of the few nearest mesh vertices;
    exact point-triangle distances pick the winner.
    """
    verts = mesh.vertices
    tris = mesh.triangles
    tree = cKDTree(verts)
    k = min(n_vertex_candidates, len(verts))
    _, vidx = tree.query(queries, k=k)
    if k == 1:
        vidx = vidx[:, None]

    # vertex -> incident faces as a padded array
    order = np.argsort(tris.reshape(-1), kind="stable")
    owner = order // 3
    counts = np.bincount(tris.reshape(-1), minlength=len(verts))
    max_val = int(counts.max())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    star = np.zeros((len(verts), max_val), dtype=np.int64)
    rank = np.arange(len(owner)) - np.repeat(starts, counts)
    star[tris.reshape(-1)[order], rank] = owner
    pad = rank == 0  # reuse first face for padding slots
    first = np.zeros(len(verts), dtype=np.int64)
    first[tris.reshape(-1)[order][pad]] = owner[pad]
    mask = np.arange(max_val)[None, :] < counts[:, None]
    star = np.where(mask, star, first[:, None])

    cand_faces = star[vidx].reshape(len(queries), -1)
    tri_pts = verts[tris]
    cand = _closest_on_triangles(queries, tri_pts[cand_faces])
    diff = cand - queries[:, None, :]
    d2 = np.einsum("nkj,nkj->nk", diff, diff)
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(queries))
    return cand[rows, best], np.sqrt(d2[rows, best])


def project_to_inner(outer_grid: GridMesh, inner_mesh: TriMeshFrame,
                     max_distance: float = 0.2) -> GridMesh:
    """Project the outer grid onto the inner surface (closest points).

    The projected grid inherits the (u, v) semantics of the outer grid.
    Nodes farther than ``max_distance`` (mm) from the inner surface are
    flagged with a warning and kept.
    """
    q = outer_grid.points.reshape(-1, 3)
    proj, dist = closest_points_on_mesh(q, inner_mesh)
    n_far = int((dist > max_distance).sum())
    if n_far:
        warnings.warn(
            f"{n_far} projected nodes exceed the layer-thickness bound {max_distance} mm"
        )
    grid = GridMesh(proj.reshape(outer_grid.points.shape),
                    frame_index=outer_grid.frame_index, label="inner",
                    time=outer_grid.time)
    grid.projection_distances = dist.reshape(outer_grid.points.shape[:2])
    return grid


def align_lumen_seam(lumen_mesh: TriMeshFrame, outer_seam: GeodesicPath,
                     graph: Optional[GeodesicGraph] = None,
                     steiner_per_edge: int = 3) -> GeodesicPath:
    """Seam for the folded lumen surface, anchored to the outer seam.

    Only the outer seam's end points are projected (onto the two lumen
    boundary loops); the lumen seam is the shortest geodesic between the
    projections.
    """
    cycles = _boundary_cycles(lumen_mesh)
    if len(cycles) != 2:
        raise TopologyError(f"lumen has {len(cycles)} boundary loops, expected 2")
    ends = [np.asarray(outer_seam.start.position), np.asarray(outer_seam.end.position)]
    centroids = [lumen_mesh.vertices[c].mean(axis=0) for c in cycles]
    d00 = np.linalg.norm(ends[0] - centroids[0])
    d01 = np.linalg.norm(ends[0] - centroids[1])
    order = (0, 1) if d00 <= d01 else (1, 0)
    start = closest_point_on_loop(lumen_mesh, cycles[order[0]], ends[0])
    end = closest_point_on_loop(lumen_mesh, cycles[order[1]], ends[1])
    return point_to_point_geodesic(lumen_mesh, start, end, graph=graph,
                                   steiner_per_edge=steiner_per_edge)
