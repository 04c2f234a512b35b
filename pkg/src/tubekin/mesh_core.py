"""Triangle-mesh substrate for open tubular surfaces.

Provides topology validation, boundary-loop extraction with inlet/outlet
labeling, enclosed and layer volumes (divergence theorem with fan caps),
and discrete geodesics computed on a Steiner-point-densified edge graph
followed by iterative unfold-and-shorten straightening.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12  # mm^2


class TopologyError(ValueError):
    """Mesh does not satisfy the required tube (annulus) topology."""


class AmbiguousLabelError(TopologyError):
    """Inlet/outlet labeling cannot be decided automatically."""


class GeodesicError(RuntimeError):
    """No usable geodesic path exists between the requested points."""


@dataclass
class TriMeshFrame:
    """One time sample of a surface as an indexed triangle mesh.

    Parameters
    ----------
    vertices : (V, 3) float array
        Vertex positions in mm.
    triangles : (F, 3) int array
        Vertex index triples, consistently oriented (outward normals).
    frame_index : int
        Position of this sample in its sequence.
    time : float
        Time within the cardiac cycle, seconds.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    frame_index: int = 0
    time: float = 0.0

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        self.triangles = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must have shape (F, 3)")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def mean_edge_length(self) -> float:
        conn = connectivity(self)
        d = self.vertices[conn.edges[:, 0]] - self.vertices[conn.edges[:, 1]]
        return float(np.linalg.norm(d, axis=1).mean())


@dataclass
class MeshConnectivity:
    """Edge/face incidence tables shared by the geodesic and cut machinery."""

    edges: np.ndarray          # (E, 2) vertex ids, sorted per row
    face_edges: np.ndarray     # (F, 3) edge ids; column k is edge (v_k, v_{k+1})
    edge_face_count: np.ndarray
    edge_faces: np.ndarray     # (E, 2) face ids, -1 when absent
    boundary_edge: np.ndarray  # (E,) bool
    forward_count: np.ndarray  # directed occurrences with a < b per edge
    _edge_keys: np.ndarray = field(repr=False, default=None)
    _vertex_faces: Optional[list] = field(repr=False, default=None)
    _mesh: "TriMeshFrame" = field(repr=False, default=None)

    def edge_id(self, a: int, b: int) -> int:
        lo, hi = (a, b) if a < b else (b, a)
        key = np.int64(lo) * self._nkey + hi
        pos = np.searchsorted(self._edge_keys, key)
        if pos >= len(self._edge_keys) or self._edge_keys[pos] != key:
            return -1
        return int(pos)

    def faces_of_edge(self, a: int, b: int) -> np.ndarray:
        e = self.edge_id(a, b)
        if e < 0:
            return np.empty(0, dtype=np.int64)
        f = self.edge_faces[e]
        return f[f >= 0]

    def vertex_faces(self, v: int) -> list:
        if self._vertex_faces is None:
            vf = [[] for _ in range(self._mesh.n_vertices)]
            for fi, tri in enumerate(self._mesh.triangles):
                vf[tri[0]].append(fi)
                vf[tri[1]].append(fi)
                vf[tri[2]].append(fi)
            self._vertex_faces = vf
        return self._vertex_faces[v]


def connectivity(mesh: TriMeshFrame) -> MeshConnectivity:
    """Build (or fetch cached) incidence tables for a mesh."""
    cached = getattr(mesh, "_conn_cache", None)
    if cached is not None:
        return cached
    tri = mesh.triangles
    nf = len(tri)
    raw = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1).reshape(-1, 2)
    und = np.sort(raw, axis=1)
    nkey = np.int64(max(mesh.n_vertices, 1))
    keys = und[:, 0].astype(np.int64) * nkey + und[:, 1]
    edge_keys, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    ne = len(edge_keys)
    edges = np.column_stack([edge_keys // nkey, edge_keys % nkey])
    face_edges = inv.reshape(nf, 3)

    order = np.argsort(inv, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(3 * nf) - np.repeat(starts, counts)
    edge_faces = np.full((ne, 2), -1, dtype=np.int64)
    sel = rank < 2
    edge_faces[inv[order][sel], rank[sel]] = order[sel] // 3

    forward = np.bincount(inv, weights=(raw[:, 0] < raw[:, 1]).astype(float), minlength=ne)
    conn = MeshConnectivity(
        edges=edges,
        face_edges=face_edges,
        edge_face_count=counts,
        edge_faces=edge_faces,
        boundary_edge=counts == 1,
        forward_count=forward.astype(np.int64),
        _edge_keys=edge_keys,
        _mesh=mesh,
    )
    conn._nkey = nkey
    mesh._conn_cache = conn
    return conn


# ---------------------------------------------------------------------------
# Topology validation
# ---------------------------------------------------------------------------

@dataclass
class TopologyReport:
    vertex_count: int
    triangle_count: int
    edge_count: int
    euler_characteristic: int
    boundary_loop_count: int
    nonmanifold_edges: np.ndarray
    degenerate_triangles: np.ndarray
    consistently_oriented: bool
    passes: bool
    messages: list

    def __str__(self):
        status = "PASS" if self.passes else "FAIL"
        return (
            f"topology {status}: V={self.vertex_count} F={self.triangle_count} "
            f"E={self.edge_count} chi={self.euler_characteristic} "
            f"loops={self.boundary_loop_count} "
            f"nonmanifold={len(self.nonmanifold_edges)} "
            f"degenerate={len(self.degenerate_triangles)}"
        )


def _boundary_cycles(mesh: TriMeshFrame) -> list:
    """Ordered boundary vertex cycles, directed as induced by face orientation."""
    tri = mesh.triangles
    conn = connectivity(mesh)
    raw = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1).reshape(-1, 2)
    on_boundary = conn.boundary_edge[conn.face_edges.reshape(-1)]
    bdir = raw[on_boundary]
    nxt = {int(a): int(b) for a, b in bdir}
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        cyc = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            if cur in seen:  # malformed boundary; bail out of this walk
                break
            cyc.append(cur)
            seen.add(cur)
            cur = nxt.get(cur)
            if cur is None:
                break
        if cur == start:
            loops.append(np.asarray(cyc, dtype=np.int64))
    return loops


def validate_topology(mesh: TriMeshFrame) -> TopologyReport:
    """Check that the mesh is a consistently oriented open tube (annulus).

    Reports boundary-loop count, Euler characteristic, non-manifold edges
    and degenerate (area <= 1e-12 mm^2) triangles. ``passes`` is true only
    for a manifold, consistently oriented mesh with exactly two boundary
    loops and no degenerate triangles.
    """
    if mesh.n_triangles == 0:
        raise ValueError("empty mesh")
    conn = connectivity(mesh)
    nonmanifold = np.nonzero(conn.edge_face_count > 2)[0]
    degenerate = np.nonzero(mesh.triangle_areas() <= DEGENERATE_AREA)[0]
    interior = conn.edge_face_count == 2
    consistent = bool(np.all(conn.forward_count[interior] == 1))
    loops = _boundary_cycles(mesh) if (len(nonmanifold) == 0 and consistent) else []
    n_loops = len(loops)
    used = np.unique(mesh.triangles)
    chi = int(len(used) - len(conn.edges) + mesh.n_triangles)

    messages = []
    if len(nonmanifold):
        messages.append(f"{len(nonmanifold)} non-manifold edges")
    if not consistent:
        messages.append("inconsistent triangle orientation")
    if len(degenerate):
        messages.append(f"degenerate triangles at {degenerate.tolist()}")
    if n_loops != 2:
        messages.append(f"expected 2 boundary loops, found {n_loops}")
    if len(used) != mesh.n_vertices:
        messages.append(f"{mesh.n_vertices - len(used)} unreferenced vertices")

    passes = (
        len(nonmanifold) == 0
        and consistent
        and n_loops == 2
        and len(degenerate) == 0
        and chi == 0
    )
    return TopologyReport(
        vertex_count=mesh.n_vertices,
        triangle_count=mesh.n_triangles,
        edge_count=len(conn.edges),
        euler_characteristic=chi,
        boundary_loop_count=n_loops,
        nonmanifold_edges=nonmanifold,
        degenerate_triangles=degenerate,
        consistently_oriented=consistent,
        passes=passes,
        messages=messages,
    )


def remove_degenerate_triangles(mesh: TriMeshFrame, max_area_fraction: float = 1e-4) -> TriMeshFrame:
    """Collapse degenerate triangles (edge collapse on their shortest edge).

    Refuses (raises TopologyError) when the degenerate area exceeds
    ``max_area_fraction`` of the total surface area.
    """
    areas = mesh.triangle_areas()
    bad = np.nonzero(areas <= DEGENERATE_AREA)[0]
    if not len(bad):
        return mesh
    if areas[bad].sum() > max_area_fraction * max(areas.sum(), 1e-30):
        raise TopologyError("degenerate triangle area exceeds repair threshold")
    warnings.warn(f"collapsing {len(bad)} degenerate triangles")
    remap = np.arange(mesh.n_vertices)
    verts = mesh.vertices
    for fi in bad:
        tri = mesh.triangles[fi]
        p = verts[tri]
        lengths = [np.linalg.norm(p[(k + 1) % 3] - p[k]) for k in range(3)]
        k = int(np.argmin(lengths))
        a, b = int(tri[k]), int(tri[(k + 1) % 3])
        remap[remap == b] = remap[a]
    tris = remap[mesh.triangles]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 2] != tris[:, 0])
    return TriMeshFrame(verts.copy(), tris[keep], mesh.frame_index, mesh.time)


# ---------------------------------------------------------------------------
# Boundary loops
# ---------------------------------------------------------------------------

@dataclass
class BoundaryLoop:
    """Closed boundary polyline of a tube mesh."""

    vertex_indices: np.ndarray
    label: str
    mean_radius: float
    centroid: np.ndarray

    def points(self, mesh: TriMeshFrame) -> np.ndarray:
        return mesh.vertices[self.vertex_indices]


def _loop_stats(mesh: TriMeshFrame, cyc: np.ndarray):
    pts = mesh.vertices[cyc]
    centroid = pts.mean(0)
    radius = float(np.linalg.norm(pts - centroid, axis=1).mean())
    return centroid, radius


def boundary_loops(mesh: TriMeshFrame, inlet="auto"):
    """Extract the two boundary loops and label them inlet/outlet.

    The loop with the larger mean radius about its centroid is labeled
    inlet (the wide, ventricle-side end). Radii within 1% of each other
    are ambiguous and require an explicit override.

    Parameters
    ----------
    inlet : "auto" | 0 | 1
        0/1 select the loop in canonical order (by smallest contained
        vertex index) to be the inlet.

    Returns
    -------
    (inlet_loop, outlet_loop) : tuple of BoundaryLoop
    """
    cycles = _boundary_cycles(mesh)
    if len(cycles) != 2:
        raise TopologyError(f"expected 2 boundary loops, found {len(cycles)}")
    cycles.sort(key=lambda c: int(c.min()))
    stats = [_loop_stats(mesh, c) for c in cycles]
    if inlet == "auto":
        r0, r1 = stats[0][1], stats[1][1]
        if abs(r0 - r1) <= 0.01 * max(r0, r1):
            raise AmbiguousLabelError(
                "boundary radii within 1%; pass inlet=0 or inlet=1 to label explicitly"
            )
        inlet_idx = 0 if r0 > r1 else 1
    elif inlet in (0, 1):
        inlet_idx = int(inlet)
    else:
        raise ValueError(f"inlet must be 'auto', 0 or 1, got {inlet!r}")
    out_idx = 1 - inlet_idx
    mk = lambda i, lbl: BoundaryLoop(cycles[i], lbl, stats[i][1], stats[i][0])
    return mk(inlet_idx, "inlet"), mk(out_idx, "outlet")


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

def _signed_volume(verts: np.ndarray, tris: np.ndarray) -> float:
    v = verts[tris]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def enclosed_volume(mesh: TriMeshFrame, signed: bool = False) -> float:
    """Volume enclosed by the surface, closing any boundary loops with
    planar triangle fans from each loop centroid (divergence theorem)."""
    total = _signed_volume(mesh.vertices, mesh.triangles)
    for cyc in _boundary_cycles(mesh):
        pts = mesh.vertices[cyc]
        centroid = pts.mean(0)
        nxt = np.roll(pts, -1, axis=0)
        # cap traverses the loop against its induced direction
        total += float(np.einsum("ij,ij->i", np.broadcast_to(centroid, pts.shape),
                                 np.cross(nxt, pts)).sum() / 6.0)
    return total if signed else abs(total)


def _loop_planarity(mesh: TriMeshFrame, cyc: np.ndarray) -> float:
    pts = mesh.vertices[cyc]
    c = pts.mean(0)
    q = pts - c
    _, _, vt = np.linalg.svd(q, full_matrices=False)
    return float(np.abs(q @ vt[2]).max())


def layer_volume(outer: TriMeshFrame, inner: TriMeshFrame, planarity_warn: float = 0.05) -> float:
    """Volume of the layer between two nested tube surfaces (mm^3).

    Both surfaces are closed with end caps and evaluated with the
    divergence theorem; the result is enclosed(outer) - enclosed(inner).
    A negative result signals non-nested surfaces or flipped orientation.
    """
    for m in (outer, inner):
        for cyc in _boundary_cycles(m):
            dev = _loop_planarity(m, cyc)
            _, radius = _loop_stats(m, cyc)
            if radius > 0 and dev > planarity_warn * radius:
                warnings.warn(
                    f"end contour deviates {dev:.3g} mm from plane "
                    f"({dev / radius:.1%} of its radius)"
                )
            break  # one loop per mesh is enough for the sanity check
    vol = enclosed_volume(outer) - enclosed_volume(inner)
    if vol < -1e-9:
        raise ValueError("negative layer volume: surfaces not nested or orientation flipped")
    return vol


# ---------------------------------------------------------------------------
# Surface points and geodesic paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurfacePoint:
    """A point on the mesh surface: a vertex, or a point interior to an edge."""

    position: tuple
    vertex: Optional[int] = None
    edge: Optional[tuple] = None
    t: float = 0.0

    @staticmethod
    def at_vertex(mesh: TriMeshFrame, v: int) -> "SurfacePoint":
        return SurfacePoint(tuple(mesh.vertices[v]), vertex=int(v))

    @staticmethod
    def on_edge(mesh: TriMeshFrame, a: int, b: int, t: float) -> "SurfacePoint":
        p = (1.0 - t) * mesh.vertices[a] + t * mesh.vertices[b]
        return SurfacePoint(tuple(p), edge=(int(a), int(b)), t=float(t))

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.position)


@dataclass
class GeodesicPath:
    """Polyline geodesic on a mesh; points lie on vertices or edges."""

    points: list
    length: float

    def polyline(self) -> np.ndarray:
        return np.asarray([p.position for p in self.points])

    @property
    def start(self) -> SurfacePoint:
        return self.points[0]

    @property
    def end(self) -> SurfacePoint:
        return self.points[-1]

    def reversed(self) -> "GeodesicPath":
        return GeodesicPath(list(reversed(self.points)), self.length)


def vertex_path(mesh: TriMeshFrame, ids: Sequence[int]) -> GeodesicPath:
    """Build a GeodesicPath from a chain of mesh vertex ids (test helper
    and seam constructor for synthetic data)."""
    pts = [SurfacePoint.at_vertex(mesh, int(v)) for v in ids]
    poly = mesh.vertices[np.asarray(ids, dtype=int)]
    length = float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())
    return GeodesicPath(pts, length)


# ---------------------------------------------------------------------------
# Steiner graph
# ---------------------------------------------------------------------------

def _pair_template(k: int) -> np.ndarray:
    """Index pairs within a face's node list [v0, v1, v2, e0 steiners,
    e1 steiners, e2 steiners] excluding pairs on a common mesh edge."""
    n = 3 + 3 * k
    groups = [
        {0, 1} | set(range(3, 3 + k)),
        {1, 2} | set(range(3 + k, 3 + 2 * k)),
        {2, 0} | set(range(3 + 2 * k, 3 + 3 * k)),
    ]
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if not any(i in g and j in g for g in groups):
                pairs.append((i, j))
    return np.asarray(pairs, dtype=np.int64) if pairs else np.empty((0, 2), dtype=np.int64)


class GeodesicGraph:
    """Steiner-point-densified edge graph over a triangle mesh.

    Nodes are mesh vertices plus ``steiner_per_edge`` evenly spaced points
    on every edge; arcs connect nodes sharing a triangle. Shortest paths
    are found with Dijkstra and then straightened on the surface.
    """

    def __init__(self, mesh: TriMeshFrame, steiner_per_edge: int = 3):
        self.mesh = mesh
        self.k = int(steiner_per_edge)
        conn = connectivity(mesh)
        self.conn = conn
        V = mesh.n_vertices
        E = len(conn.edges)
        k = self.k
        self.n_vertex_nodes = V

        if k > 0:
            ts = (np.arange(1, k + 1) / (k + 1.0))[None, :, None]
            a = mesh.vertices[conn.edges[:, 0]][:, None, :]
            b = mesh.vertices[conn.edges[:, 1]][:, None, :]
            steiner = ((1 - ts) * a + ts * b).reshape(-1, 3)
            self.positions = np.vstack([mesh.vertices, steiner])
        else:
            self.positions = mesh.vertices.copy()
        self.node_edge = np.full(len(self.positions), -1, dtype=np.int64)
        self.node_t = np.zeros(len(self.positions))
        if k > 0:
            eids = np.repeat(np.arange(E), k)
            self.node_edge[V:] = eids
            self.node_t[V:] = np.tile(np.arange(1, k + 1) / (k + 1.0), E)

        # chains along each edge
        if k > 0:
            chain_nodes = np.empty((E, k + 2), dtype=np.int64)
            chain_nodes[:, 0] = conn.edges[:, 0]
            chain_nodes[:, -1] = conn.edges[:, 1]
            chain_nodes[:, 1:-1] = V + np.arange(E * k).reshape(E, k)
            ci = chain_nodes[:, :-1].reshape(-1)
            cj = chain_nodes[:, 1:].reshape(-1)
        else:
            ci = conn.edges[:, 0]
            cj = conn.edges[:, 1]

        # cross-edge pairs within each face
        tmpl = _pair_template(k)
        if len(tmpl):
            F = mesh.n_triangles
            face_nodes = np.empty((F, 3 + 3 * k), dtype=np.int64)
            face_nodes[:, :3] = mesh.triangles
            for c in range(3):
                e = conn.face_edges[:, c]
                face_nodes[:, 3 + c * k: 3 + (c + 1) * k] = V + e[:, None] * k + np.arange(k)
            fi = face_nodes[:, tmpl[:, 0]].reshape(-1)
            fj = face_nodes[:, tmpl[:, 1]].reshape(-1)
            ii = np.concatenate([ci, fi])
            jj = np.concatenate([cj, fj])
        else:
            ii, jj = ci, cj
        px, py, pz = (np.ascontiguousarray(self.positions[:, c]) for c in range(3))
        dx = px[ii] - px[jj]
        dy = py[ii] - py[jj]
        dz = pz[ii] - pz[jj]
        ww = np.sqrt(dx * dx + dy * dy + dz * dz)
        self._arcs = (ii, jj, ww)

    def _matrix(self, extra=None):
        ii, jj, ww = self._arcs
        n = len(self.positions)
        if extra:
            ei, ej, ew, n_extra = extra
            ii = np.concatenate([ii, ei])
            jj = np.concatenate([jj, ej])
            ww = np.concatenate([ww, ew])
            n += n_extra
        return csr_matrix((ww, (ii, jj)), shape=(n, n))

    def loop_nodes(self, loop_vertices: np.ndarray) -> np.ndarray:
        """Graph nodes lying on a boundary loop (vertices and edge steiners)."""
        ids = [np.asarray(loop_vertices, dtype=np.int64)]
        if self.k > 0:
            nxt = np.roll(loop_vertices, -1)
            for a, b in zip(loop_vertices, nxt):
                e = self.conn.edge_id(int(a), int(b))
                if e >= 0:
                    ids.append(self.n_vertex_nodes + e * self.k + np.arange(self.k))
        return np.concatenate(ids)

    def node_point(self, nid: int) -> SurfacePoint:
        if nid < self.n_vertex_nodes:
            return SurfacePoint.at_vertex(self.mesh, nid)
        e = int(self.node_edge[nid])
        a, b = self.conn.edges[e]
        return SurfacePoint.on_edge(self.mesh, int(a), int(b), float(self.node_t[nid]))

    def _inject(self, point: SurfacePoint, node_id: int):
        """Arcs tying an off-graph surface point to nodes of its faces."""
        if point.vertex is not None:
            return None, int(point.vertex)
        a, b = point.edge
        faces = self.conn.faces_of_edge(a, b)
        if not len(faces):
            raise GeodesicError(f"point edge ({a},{b}) not on mesh")
        neigh = set()
        for f in faces:
            tri = self.mesh.triangles[f]
            neigh.update(int(v) for v in tri)
            if self.k > 0:
                for e in self.conn.face_edges[f]:
                    base = self.n_vertex_nodes + int(e) * self.k
                    neigh.update(range(base, base + self.k))
        neigh = np.asarray(sorted(neigh), dtype=np.int64)
        w = np.linalg.norm(self.positions[neigh] - np.asarray(point.position), axis=1)
        return (np.full(len(neigh), node_id), neigh, w), node_id

    def shortest_nodes(self, sources: np.ndarray, targets: np.ndarray, extra=None):
        """Multi-source Dijkstra; returns the best node path sources->targets."""
        mat = self._matrix(extra)
        dist, pred, src = dijkstra(
            mat, directed=False, indices=np.asarray(sources, dtype=np.int64),
            return_predecessors=True, min_only=True,
        )
        targets = np.asarray(targets, dtype=np.int64)
        finite = np.isfinite(dist[targets])
        if not finite.any():
            raise GeodesicError("surface is disconnected between the requested boundaries")
        best = targets[finite][int(np.argmin(dist[targets][finite]))]
        path = [int(best)]
        while pred[path[-1]] >= 0:
            path.append(int(pred[path[-1]]))
        path.reverse()
        return path, float(dist[best])


# ---------------------------------------------------------------------------
# Path straightening (unfold adjacent triangles, shorten)
# ---------------------------------------------------------------------------

class _PPoint:
    __slots__ = ("kind", "a", "b", "t", "pos")

    def __init__(self, kind, a, b, t, pos):
        self.kind = kind  # 'v' or 'e'
        self.a = a
        self.b = b
        self.t = t
        self.pos = pos


def _common_face(conn: MeshConnectivity, p: _PPoint, q: _PPoint) -> int:
    def faces_of(pt):
        if pt.kind == "v":
            return set(conn.vertex_faces(pt.a))
        return set(int(f) for f in conn.faces_of_edge(pt.a, pt.b))

    shared = faces_of(p) & faces_of(q)
    if not shared:
        raise GeodesicError("consecutive path points share no face")
    return min(shared)


def _bary_2d(origin, ex, ey, p):
    d = (p[0] - origin[0], p[1] - origin[1], p[2] - origin[2])
    return (
        d[0] * ex[0] + d[1] * ex[1] + d[2] * ex[2],
        d[0] * ey[0] + d[1] * ey[1] + d[2] * ey[2],
    )


def _unit(v):
    n = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n < 1e-300:
        return None
    return (v[0] / n, v[1] / n, v[2] / n)


def _perp_in_face(A, ex, c):
    """Unit in-plane direction at A, perpendicular to ex, pointing toward c."""
    d = (c[0] - A[0], c[1] - A[1], c[2] - A[2])
    proj = d[0] * ex[0] + d[1] * ex[1] + d[2] * ex[2]
    w = (d[0] - proj * ex[0], d[1] - proj * ex[1], d[2] - proj * ex[2])
    return _unit(w)


def _path_length(pts) -> float:
    total = 0.0
    for p, q in zip(pts[:-1], pts[1:]):
        dx = q.pos[0] - p.pos[0]
        dy = q.pos[1] - p.pos[1]
        dz = q.pos[2] - p.pos[2]
        total += math.sqrt(dx * dx + dy * dy + dz * dz)
    return total


def _angle_between(d1, d2):
    n1 = math.sqrt(d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2])
    n2 = math.sqrt(d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2])
    if n1 < 1e-300 or n2 < 1e-300:
        return 0.0
    c = (d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2]) / (n1 * n2)
    return math.acos(max(-1.0, min(1.0, c)))


def _vertex_angle_fan(mesh, conn, v, f_start, f_end, first_dir, last_dir):
    """Unfold the two face fans around vertex v between f_start and f_end.

    Returns a list of (total_angle, crossed_edges, faces) for each side
    (one entry for boundary vertices). Angles are measured from first_dir
    (in f_start) to last_dir (in f_end), both emanating from v.
    """
    vlist, tlist = _vertex_list(mesh)
    pv = vlist[v]
    vf = conn.vertex_faces(v)
    # order faces around v by adjacency over edges through v
    adj = {}
    for f in vf:
        for x in tlist[f]:
            if x != v:
                adj.setdefault(x, []).append(f)

    def ray(w):
        pw = vlist[w]
        return (pw[0] - pv[0], pw[1] - pv[1], pw[2] - pv[2])

    def walk(start_face, via):
        """Walk the fan from start_face crossing edge (v, via) first."""
        seq_faces = [start_face]
        seq_edges = []
        cur = start_face
        cur_via = via
        while True:
            seq_edges.append(cur_via)
            nxts = [f for f in adj.get(cur_via, []) if f != cur]
            if not nxts:
                return seq_faces, seq_edges, False
            cur = nxts[0]
            seq_faces.append(cur)
            if cur == f_end:
                return seq_faces, seq_edges, True
            others = [x for x in tlist[cur] if x != v]
            cur_via = others[0] if others[1] == cur_via else others[1]
            if len(seq_faces) > len(vf) + 1:
                return seq_faces, seq_edges, False

    tri0 = [x for x in tlist[f_start] if x != v]
    sides = []
    for via in tri0:
        if f_start == f_end:
            continue
        res = walk(f_start, via)
        if res is None or not res[2]:
            continue
        faces, crossed, _ = res
        # accumulate angle: first_dir -> crossed[0], wedge interiors, last -> last_dir
        ang = _angle_between(first_dir, ray(crossed[0]))
        for idx in range(1, len(crossed)):
            ang += _angle_between(ray(crossed[idx - 1]), ray(crossed[idx]))
        ang += _angle_between(ray(crossed[-1]), last_dir)
        sides.append((ang, crossed, faces))
    return sides


def _vertex_list(mesh: TriMeshFrame):
    cached = getattr(mesh, "_vlist_cache", None)
    if cached is None:
        cached = (mesh.vertices.tolist(), mesh.triangles.tolist())
        mesh._vlist_cache = cached
    return cached


def _canonicalize_point(p: "_PPoint", vlist, snap: float = 1e-9):
    """Snap near-vertex edge points to vertices and order edge ids."""
    if p.kind != "e":
        return p
    if p.t <= snap:
        p.kind, p.a, p.b, p.t = "v", p.a, -1, 0.0
        p.pos = tuple(vlist[p.a])
    elif p.t >= 1.0 - snap:
        p.kind, p.a, p.b, p.t = "v", p.b, -1, 0.0
        p.pos = tuple(vlist[p.a])
    elif p.a > p.b:
        p.a, p.b, p.t = p.b, p.a, 1.0 - p.t
    return p


def _merge_duplicate_points(pts: list, faces: list, tol: float):
    """Merge consecutive path points that share a carrier and coincide."""
    i = 1
    while i < len(pts) - 1:
        p, q = pts[i - 1], pts[i]
        same_carrier = (
            p.kind == q.kind
            and p.a == q.a
            and (p.kind == "v" or p.b == q.b)
        )
        if same_carrier and abs(p.pos[0] - q.pos[0]) + abs(p.pos[1] - q.pos[1]) + abs(
            p.pos[2] - q.pos[2]
        ) < tol:
            # segment (i-1 -> i) is degenerate; keep the following carrier
            del pts[i]
            faces[i - 1: i + 1] = [faces[i]]
            continue
        r = pts[i + 1]
        same_carrier = (
            q.kind == r.kind
            and q.a == r.a
            and (q.kind == "v" or q.b == r.b)
        )
        if same_carrier and abs(q.pos[0] - r.pos[0]) + abs(q.pos[1] - r.pos[1]) + abs(
            q.pos[2] - r.pos[2]
        ) < tol:
            del pts[i]
            faces[i - 1: i + 1] = [faces[i - 1]]
            continue
        i += 1


def _straighten(mesh: TriMeshFrame, pts: list, faces: list,
                rel_tol: float = 1e-6, max_passes: int = 100):
    """Iteratively shorten a surface path by local unfolding.

    ``pts`` are _PPoint entries, ``faces`` the face carrying each segment.
    Endpoints stay fixed. Returns (pts, faces, length).
    """
    conn = connectivity(mesh)
    vlist, tlist = _vertex_list(mesh)
    length = _path_length(pts)
    merge_tol = 1e-9 * max(mesh.bbox_diagonal, 1e-9)

    for _ in range(max_passes):
        i = 1
        while i < len(pts) - 1:
            p = _canonicalize_point(pts[i], vlist)
            f_prev, f_next = faces[i - 1], faces[i]
            if f_prev == f_next:
                del pts[i]
                faces[i - 1: i + 1] = [f_prev]
                continue
            if p.kind == "e":
                _straighten_edge_point(vlist, tlist, pts, i, f_prev, f_next)
                i += 1
            else:
                expanded = _straighten_vertex_point(mesh, conn, pts, faces, i, f_prev, f_next)
                i += max(1, expanded)
        for k in range(1, len(pts) - 1):
            _canonicalize_point(pts[k], vlist)
        _merge_duplicate_points(pts, faces, merge_tol)
        new_length = _path_length(pts)
        if length - new_length <= rel_tol * max(length, 1e-300):
            length = new_length
            break
        length = new_length
    return pts, faces, length


def _straighten_edge_point(vlist, tlist, pts, i, f_prev, f_next):
    p = pts[i]
    a, b = p.a, p.b
    A = vlist[a]
    B = vlist[b]
    abx = B[0] - A[0]
    aby = B[1] - A[1]
    abz = B[2] - A[2]
    lab = math.sqrt(abx * abx + aby * aby + abz * abz)
    if lab < 1e-300:
        return False
    ex = (abx / lab, aby / lab, abz / lab)

    def third(f):
        tri = tlist[f]
        for v in tri:
            if v != a and v != b:
                return v
        return -1

    c1 = third(f_prev)
    c2 = third(f_next)
    if c1 < 0 or c2 < 0:
        return False
    ey1 = _perp_in_face(A, ex, vlist[c1])
    ey2 = _perp_in_face(A, ex, vlist[c2])
    if ey1 is None or ey2 is None:
        return False
    q_prev = _bary_2d(A, ex, ey1, pts[i - 1].pos)
    q_next_raw = _bary_2d(A, ex, ey2, pts[i + 1].pos)
    qnx, qny = q_next_raw[0], -q_next_raw[1]  # unfold across the edge
    dy = q_prev[1] - qny
    if abs(dy) < 1e-300:
        return False
    s = q_prev[1] / dy
    x_star = q_prev[0] + s * (qnx - q_prev[0])
    t_new = min(1.0, max(0.0, x_star / lab))
    if t_new <= 0.0:
        p.kind, p.a, p.b, p.t, p.pos = "v", a, -1, 0.0, tuple(A)
    elif t_new >= 1.0:
        p.kind, p.a, p.b, p.t, p.pos = "v", b, -1, 0.0, tuple(B)
    else:
        p.t = t_new
        p.pos = (A[0] + t_new * abx, A[1] + t_new * aby, A[2] + t_new * abz)
    return True


def _straighten_vertex_point(mesh, conn, pts, faces, i, f_prev, f_next):
    """Try to route the path around vertex pts[i]; returns number of new points."""
    verts = mesh.vertices
    v = pts[i].a
    d_prev = np.asarray(pts[i - 1].pos) - verts[v]
    d_next = np.asarray(pts[i + 1].pos) - verts[v]
    sides = _vertex_angle_fan(mesh, conn, v, f_prev, f_next, d_prev, d_next)
    open_sides = [s for s in sides if s[0] < math.pi - 1e-12]
    if not open_sides:
        return 0
    ang_total, crossed, fan_faces = min(open_sides, key=lambda s: s[0])
    r_prev = float(np.linalg.norm(d_prev))
    r_next = float(np.linalg.norm(d_next))
    if r_prev < 1e-300 or r_next < 1e-300:
        return 0
    # unfolded plane: v at origin, p_prev along angle 0
    q_prev = (r_prev, 0.0)
    q_next = (r_next * math.cos(ang_total), r_next * math.sin(ang_total))
    # cumulative angles of crossed edges
    angles = []
    acc = _angle_between_at(verts, v, d_prev, verts[crossed[0]] - verts[v])
    angles.append(acc)
    for idx in range(1, len(crossed)):
        p0 = verts[crossed[idx - 1]] - verts[v]
        p1 = verts[crossed[idx]] - verts[v]
        acc += _angle_between_at(verts, v, p0, p1)
        angles.append(acc)
    new_pts = []
    for w, theta in zip(crossed, angles):
        d = (math.cos(theta), math.sin(theta))
        denom = d[0] * (q_prev[1] - q_next[1]) - d[1] * (q_prev[0] - q_next[0])
        if abs(denom) < 1e-300:
            return 0
        s = (d[0] * q_prev[1] - d[1] * q_prev[0]) / denom
        if not (0.0 <= s <= 1.0):
            return 0
        x = q_prev[0] + s * (q_next[0] - q_prev[0])
        y = q_prev[1] + s * (q_next[1] - q_prev[1])
        rho = math.hypot(x, y)
        lw = float(np.linalg.norm(verts[w] - verts[v]))
        if lw < 1e-300:
            return 0
        t = rho / lw
        if t >= 1.0 - 1e-9:
            np_pt = _PPoint("v", int(w), -1, 0.0, tuple(verts[w]))
        elif t <= 1e-9:
            return 0  # would stay at v
        else:
            pos = tuple(verts[v] + t * (verts[w] - verts[v]))
            np_pt = _PPoint("e", int(v), int(w), t, pos)
        new_pts.append(np_pt)
    pts[i: i + 1] = new_pts
    faces[i - 1: i + 1] = list(fan_faces)
    return len(new_pts)


def _nodes_to_ppoints(graph: GeodesicGraph, node_path, extra_points=None):
    pts = []
    for nid in node_path:
        if extra_points and nid in extra_points:
            sp = extra_points[nid]
        else:
            sp = graph.node_point(nid)
        if sp.vertex is not None:
            pts.append(_PPoint("v", sp.vertex, -1, 0.0, sp.position))
        else:
            pts.append(_PPoint("e", sp.edge[0], sp.edge[1], sp.t, sp.position))
    # drop exact duplicates
    dedup = [pts[0]]
    for p in pts[1:]:
        q = dedup[-1]
        if (
            abs(p.pos[0] - q.pos[0]) + abs(p.pos[1] - q.pos[1]) + abs(p.pos[2] - q.pos[2])
            > 1e-15
        ):
            dedup.append(p)
    return dedup


def _ppoints_to_path(pts) -> GeodesicPath:
    out = []
    for p in pts:
        if p.kind == "v":
            out.append(SurfacePoint(p.pos, vertex=p.a))
        else:
            out.append(SurfacePoint(p.pos, edge=(p.a, p.b), t=p.t))
    return GeodesicPath(out, _path_length(pts))


def _finish_path(mesh: TriMeshFrame, graph: GeodesicGraph, node_path,
                 extra_points=None, straighten: bool = True) -> GeodesicPath:
    conn = connectivity(mesh)
    pts = _nodes_to_ppoints(graph, node_path, extra_points)
    if len(pts) < 2:
        raise GeodesicError("degenerate geodesic path")
    faces = [_common_face(conn, p, q) for p, q in zip(pts[:-1], pts[1:])]
    if straighten:
        pts, faces, _ = _straighten(mesh, pts, faces)
    path = _ppoints_to_path(pts)
    path.segment_faces = faces
    return path


def shortest_boundary_geodesic(
    mesh: TriMeshFrame,
    graph: Optional[GeodesicGraph] = None,
    steiner_per_edge: int = 3,
    straighten: bool = True,
) -> GeodesicPath:
    """Approximate globally shortest geodesic between the two boundary loops.

    Dijkstra runs over a Steiner-densified edge graph seeded from every
    sample on one loop and targeting every sample on the other; the node
    path is then straightened by unfolding adjacent triangle pairs until
    the relative length change falls below 1e-6.
    """
    cycles = _boundary_cycles(mesh)
    if len(cycles) != 2:
        raise TopologyError(f"expected 2 boundary loops, found {len(cycles)}")
    cycles.sort(key=lambda c: int(c.min()))
    if graph is None:
        graph = GeodesicGraph(mesh, steiner_per_edge)
    sources = graph.loop_nodes(cycles[0])
    targets = graph.loop_nodes(cycles[1])
    node_path, _ = graph.shortest_nodes(sources, targets)
    return _finish_path(mesh, graph, node_path, straighten=straighten)


def point_to_point_geodesic(
    mesh: TriMeshFrame,
    start: SurfacePoint,
    end: SurfacePoint,
    graph: Optional[GeodesicGraph] = None,
    steiner_per_edge: int = 3,
    straighten: bool = True,
) -> GeodesicPath:
    """Shortest path between two surface points (graph + straightening)."""
    if graph is None:
        graph = GeodesicGraph(mesh, steiner_per_edge)
    n = len(graph.positions)
    extra_i, extra_j, extra_w = [], [], []
    extra_points = {}
    n_extra = 0
    ends = []
    for sp in (start, end):
        arcs, nid = graph._inject(sp, n + n_extra)
        if arcs is not None:
            extra_i.append(arcs[0])
            extra_j.append(arcs[1])
            extra_w.append(arcs[2])
            extra_points[nid] = sp
            n_extra += 1
        ends.append(nid)
    extra = None
    if n_extra:
        extra = (
            np.concatenate(extra_i),
            np.concatenate(extra_j),
            np.concatenate(extra_w),
            n_extra,
        )
    node_path, _ = graph.shortest_nodes(
        np.asarray([ends[0]]), np.asarray([ends[1]]), extra=extra
    )
    return _finish_path(mesh, graph, node_path, extra_points, straighten=straighten)


def closest_point_on_loop(mesh: TriMeshFrame, loop: np.ndarray, point) -> SurfacePoint:
    """Closest point on a boundary loop polyline; ties resolve to the
    lowest segment start position along the loop."""
    p = np.asarray(point, dtype=float)
    a = mesh.vertices[loop]
    b = mesh.vertices[np.roll(loop, -1)]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom[denom < 1e-300] = 1e-300
    t = np.clip(np.einsum("ij,ij->i", p[None, :] - a, ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.linalg.norm(proj - p, axis=1)
    best = float(d.min())
    k = int(np.nonzero(d <= best + 1e-12)[0][0])
    va, vb = int(loop[k]), int(np.roll(loop, -1)[k])
    tk = float(t[k])
    if tk <= 1e-9:
        return SurfacePoint.at_vertex(mesh, va)
    if tk >= 1 - 1e-9:
        return SurfacePoint.at_vertex(mesh, vb)
    return SurfacePoint.on_edge(mesh, va, vb, tk)


def subdivide_midpoint(mesh: TriMeshFrame) -> TriMeshFrame:
    """1:4 midpoint subdivision (refinement probe for convergence tests)."""
    conn = connectivity(mesh)
    mid = 0.5 * (mesh.vertices[conn.edges[:, 0]] + mesh.vertices[conn.edges[:, 1]])
    verts = np.vstack([mesh.vertices, mid])
    V = mesh.n_vertices
    e0 = V + conn.face_edges[:, 0]
    e1 = V + conn.face_edges[:, 1]
    e2 = V + conn.face_edges[:, 2]
    t = mesh.triangles
    tris = np.concatenate([
        np.column_stack([t[:, 0], e0, e2]),
        np.column_stack([e0, t[:, 1], e1]),
        np.column_stack([e2, e1, t[:, 2]]),
        np.column_stack([e0, e1, e2]),
    ])
    return TriMeshFrame(verts, tris, mesh.frame_index, mesh.time)
