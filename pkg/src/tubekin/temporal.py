"""Temporal consistency: seam endpoint stabilization, cycle alignment by
volume extrema, and volume-preserving clipping of the grid domain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mesh_core import (
    GeodesicGraph,
    GeodesicPath,
    SurfacePoint,
    TriMeshFrame,
    _boundary_cycles,
    closest_point_on_loop,
    point_to_point_geodesic,
)
from .parameterize import GridMesh, grid_enclosed_volume, grid_layer_volume

logger = logging.getLogger(__name__)


@dataclass
class SurfaceSequence:
    """Ordered grid frames of one surface over one cardiac cycle."""

    frames: list
    period: float
    label: str = "outer"

    def __post_init__(self):
        if len(self.frames) < 8:
            raise ValueError("a surface sequence needs at least 8 frames")
        shapes = {f.points.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"frames disagree on grid shape: {shapes}")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> GridMesh:
        return self.frames[i]

    @property
    def grid_shape(self):
        return self.frames[0].points.shape[:2]

    def volumes(self) -> np.ndarray:
        return np.asarray([f.enclosed_volume() for f in self.frames])

    def points_array(self) -> np.ndarray:
        return np.stack([f.points for f in self.frames])


@dataclass
class CyclePhaseMap:
    """Monotone map from source frame index to normalized cycle time.

    t=0 is anchored at the minimum-volume frame; with ``two_segment`` the
    map is piecewise linear so the maximum-volume frame lands at t=0.5.
    """

    n_frames: int
    min_index: int
    max_index: int
    two_segment: bool = False

    def rotated_index(self, i) -> np.ndarray:
        return np.mod(np.asarray(i) - self.min_index, self.n_frames)

    def source_index(self, rotated) -> np.ndarray:
        return np.mod(np.asarray(rotated) + self.min_index, self.n_frames)

    def phase(self, i) -> np.ndarray:
        """Normalized cycle time for source frame index i."""
        r = self.rotated_index(i).astype(float)
        if not self.two_segment:
            return r / self.n_frames
        k = self.rotated_index(self.max_index)
        if k == 0:
            return r / self.n_frames
        first = r <= k
        out = np.where(first, 0.5 * r / k,
                       0.5 + 0.5 * (r - k) / max(self.n_frames - k, 1))
        return out

    def order(self) -> np.ndarray:
        """Source indices in rotated (phase) order."""
        return self.source_index(np.arange(self.n_frames))

    def expansion_indices(self) -> np.ndarray:
        """Source frames from minimum to maximum volume (cyclic)."""
        k = int(self.rotated_index(self.max_index))
        return self.source_index(np.arange(k + 1))

    def contraction_indices(self) -> np.ndarray:
        k = int(self.rotated_index(self.max_index))
        return self.source_index(np.arange(k, self.n_frames + 1) % self.n_frames)


def stabilize_seam_endpoints(
    frames: Sequence[TriMeshFrame],
    seams: Sequence[GeodesicPath],
    graphs: Optional[Sequence[GeodesicGraph]] = None,
    steiner_per_edge: int = 3,
) -> list:
    """Temporally smooth the seam end points and recompute the seams.

    Each seam endpoint is replaced by the projection, back onto its own
    frame's boundary loop, of the average of its position with its two
    temporal neighbors (cyclic). A single filtering pass is applied, then
    the geodesic is recomputed between the stabilized endpoints.
    """
    T = len(frames)
    if len(seams) != T:
        raise ValueError("need one seam per frame")
    starts = np.asarray([s.start.position for s in seams])
    ends = np.asarray([s.end.position for s in seams])

    def loop_of(mesh, point):
        cycles = _boundary_cycles(mesh)
        cents = [mesh.vertices[c].mean(axis=0) for c in cycles]
        d = [np.linalg.norm(np.asarray(point) - c) for c in cents]
        return cycles[int(np.argmin(d))]

    new_seams = []
    for t in range(T):
        mesh = frames[t]
        avg_s = (starts[(t - 1) % T] + starts[t] + starts[(t + 1) % T]) / 3.0
        avg_e = (ends[(t - 1) % T] + ends[t] + ends[(t + 1) % T]) / 3.0
        sp = closest_point_on_loop(mesh, loop_of(mesh, seams[t].start.position), avg_s)
        ep = closest_point_on_loop(mesh, loop_of(mesh, seams[t].end.position), avg_e)
        graph = graphs[t] if graphs is not None else None
        new_seams.append(
            point_to_point_geodesic(mesh, sp, ep, graph=graph,
                                    steiner_per_edge=steiner_per_edge)
        )
    return new_seams


def align_cycle_by_volume(sequence: SurfaceSequence, two_segment: bool = False,
                          volumes: Optional[np.ndarray] = None) -> CyclePhaseMap:
    """Anchor the cycle at the minimum-volume frame (earliest on ties).

    With ``two_segment`` the maximum-volume frame is additionally warped
    to t = 0.5 by a piecewise-linear map of frame indices.
    """
    vols = sequence.volumes() if volumes is None else np.asarray(volumes)
    vmin = vols.min()
    min_index = int(np.nonzero(vols <= vmin + 1e-9 * max(abs(vmin), 1.0))[0][0])
    vmax = vols.max()
    max_index = int(np.nonzero(vols >= vmax - 1e-9 * max(abs(vmax), 1.0))[0][0])
    return CyclePhaseMap(
        n_frames=len(vols),
        min_index=min_index,
        max_index=max_index,
        two_segment=two_segment,
    )


# ---------------------------------------------------------------------------
# Volume-preserving clipping
# ---------------------------------------------------------------------------

@dataclass
class ClipResult:
    """Per-frame clip fractions and the re-parameterized sequences."""

    v_c: np.ndarray
    outer: SurfaceSequence
    inner: SurfaceSequence
    target_volume: float
    volumes_after: np.ndarray


def _subgrid(points: np.ndarray, v_c: float, m: int) -> np.ndarray:
    """Resample the grid rows onto stations v'_j = v_c * j/(m-1) by linear
    interpolation along each column."""
    m0 = points.shape[0]
    r = np.clip(v_c, 0.0, 1.0) * np.arange(m) / (m - 1) * (m0 - 1)
    lo = np.floor(r).astype(int)
    hi = np.minimum(lo + 1, m0 - 1)
    w = (r - lo)[:, None, None]
    return (1.0 - w) * points[lo] + w * points[hi]


def clip_to_constant_volume(
    outer: SurfaceSequence,
    inner: SurfaceSequence,
    rel_tol: float = 1e-3,
    max_iter: int = 80,
) -> ClipResult:
    """Trim each frame's grid domain to [0, v_c] so the wall layer volume
    matches the minimum-volume frame.

    v_c is found by bisection on the layer volume of the re-resampled
    sub-grid (monotone in v_c; a fine scan is used as a fallback when the
    monotonicity check fails). The minimum-volume frame keeps v_c = 1.
    """
    if len(outer) != len(inner):
        raise ValueError("outer and inner sequences differ in length")
    T = len(outer)
    m = outer.grid_shape[0]
    totals = np.asarray([
        grid_layer_volume(outer[t].points, inner[t].points) for t in range(T)
    ])
    target = totals.min()
    min_index = int(np.argmin(totals))
    if target <= 0:
        raise ValueError("non-positive layer volume; surfaces not nested?")

    def vol_at(t, v_c):
        return grid_layer_volume(
            _subgrid(outer[t].points, v_c, m), _subgrid(inner[t].points, v_c, m)
        )

    v_cs = np.ones(T)
    vol_after = np.empty(T)
    for t in range(T):
        if t == min_index:
            vol_after[t] = vol_at(t, 1.0)
            continue
        probes = np.linspace(0.2, 1.0, 5)
        pv = [vol_at(t, p) for p in probes]
        monotone = all(b >= a - 1e-12 for a, b in zip(pv, pv[1:]))
        if not monotone:
            grid_vc = np.linspace(0.05, 1.0, 2000)
            vals = np.asarray([vol_at(t, v) for v in grid_vc])
            k = int(np.argmin(np.abs(vals - target)))
            v_cs[t] = grid_vc[k]
            vol_after[t] = vals[k]
            continue
        lo, hi = 0.0, 1.0
        v_lo, v_hi = 0.0, pv[-1]
        if v_hi < target * (1 - rel_tol):
            raise ValueError(f"frame {t}: clip target unreachable (v_c would exceed 1)")
        vc, val = 1.0, v_hi
        for _ in range(max_iter):
            vc = 0.5 * (lo + hi)
            val = vol_at(t, vc)
            if abs(val - target) <= rel_tol * target:
                break
            if val > target:
                hi = vc
            else:
                lo = vc
        v_cs[t] = vc
        vol_after[t] = val

    out_frames = []
    in_frames = []
    for t in range(T):
        op = _subgrid(outer[t].points, v_cs[t], m)
        ip = _subgrid(inner[t].points, v_cs[t], m)
        out_frames.append(GridMesh(op, frame_index=outer[t].frame_index,
                                   label=outer.label, time=outer[t].time))
        in_frames.append(GridMesh(ip, frame_index=inner[t].frame_index,
                                  label=inner.label, time=inner[t].time))
    return ClipResult(
        v_c=v_cs,
        outer=SurfaceSequence(out_frames, outer.period, outer.label),
        inner=SurfaceSequence(in_frames, inner.period, inner.label),
        target_volume=float(target),
        volumes_after=vol_after,
    )
