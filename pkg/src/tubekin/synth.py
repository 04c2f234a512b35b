"""Synthetic deforming-tube sequences with closed-form geometry.

Every analysis stage is checked against tubes generated here: the radius
field, cross-sectional areas, wall volumes, wave arrival times and trim
fractions all have analytic expressions that are independent of the mesh
pipeline under test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .mesh_core import TriMeshFrame


@dataclass
class TubeSpec:
    """Declarative description of a synthetic deforming tube.

    Radii and lengths in mm, times in seconds. The outer myocardial
    surface is the primary shape; the inner surface is an inward offset
    by ``wall_thickness`` and the lumen a further offset by
    ``jelly_thickness`` (optionally folded into a star or collapsed into
    a slit).
    """

    inlet_radius: float = 0.5
    outlet_radius: float = 0.25
    length: float = 2.0
    bend_angle: float = 0.0            # total centerline bend, radians (0 = straight)
    wall_thickness: float = 0.05
    jelly_thickness: float = 0.05

    wave_speed: float = 8.0            # mm/s, expansion pulse travel speed
    wave_depth: float = 0.4            # baseline contraction fraction, 0 = static
    wave_width: float = 0.35           # pulse support as a fraction of the period
    wave_profile: str = "raised_cosine"  # or "gaussian"
    reverse_from: Optional[float] = None  # v beyond which the wave runs backward

    band_position: Optional[float] = None  # v_b of a surgical-band constriction
    band_factor: float = 0.5
    band_width: float = 0.06

    stretch_amplitude: float = 0.0     # cyclic longitudinal stretch fraction

    cross_section: str = "circle"      # circle | ellipse | star
    ellipse_ratio: float = 2.0         # major/minor axis ratio (area preserved)
    star_points: int = 5
    star_amplitude: float = 0.3
    lumen_shape: str = "offset"        # offset | star | slit
    slit_factor: float = 0.02

    frames: int = 195
    period: float = 0.4

    samples_u: int = 80
    samples_v: int = 40
    jitter: float = 0.0                # vertex position noise, mm
    seed: int = 0

    def __post_init__(self):
        if self.inlet_radius <= 0 or self.outlet_radius <= 0:
            raise ValueError("radii must be positive")
        if not (0 <= self.wave_depth < 1):
            raise ValueError("wave_depth must lie in [0, 1)")
        if self.band_position is not None and not (0 < self.band_position < 1):
            raise ValueError("band_position must lie in (0, 1)")
        if self.band_position is not None and self.band_factor <= 0:
            raise ValueError("band_factor must be positive")
        if self.frames < 2:
            raise ValueError("at least two frames required")
        min_r = min(self.inlet_radius, self.outlet_radius)
        floor = min_r * (1 - self.wave_depth)
        if self.band_position is not None:
            floor *= self.band_factor
        if floor - self.wall_thickness - self.jelly_thickness <= 0:
            raise ValueError("spec self-intersects: lumen radius collapses below zero")
        if self.star_amplitude >= 1:
            raise ValueError("star amplitude must be < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TubeSpec":
        return TubeSpec(**d)


def _pulse(spec: TubeSpec, dt: np.ndarray) -> np.ndarray:
    """Temporal profile w(dt) in [0,1], cyclic, peaked at dt = 0."""
    halfper = spec.period / 2.0
    wrapped = np.mod(dt + halfper, spec.period) - halfper
    width = spec.wave_width * spec.period
    if spec.wave_profile == "raised_cosine":
        w = np.where(
            np.abs(wrapped) < width / 2.0,
            0.5 * (1.0 + np.cos(2.0 * np.pi * wrapped / width)),
            0.0,
        )
    elif spec.wave_profile == "gaussian":
        sigma = width / 4.0
        w = np.exp(-0.5 * (wrapped / sigma) ** 2)
    else:
        raise ValueError(f"unknown wave profile {spec.wave_profile!r}")
    return w


def wave_arrival_time(spec: TubeSpec, v) -> np.ndarray:
    """Arrival time t0(v) of the expansion pulse at longitudinal station v."""
    v = np.asarray(v, dtype=float)
    t0 = v * spec.length / spec.wave_speed
    if spec.reverse_from is not None:
        vr = spec.reverse_from
        mirrored = (2 * vr - v) * spec.length / spec.wave_speed
        t0 = np.where(v > vr, mirrored, t0)
    return t0


def _band(spec: TubeSpec, v: np.ndarray) -> np.ndarray:
    if spec.band_position is None:
        return np.ones_like(v)
    g = np.exp(-0.5 * ((v - spec.band_position) / spec.band_width) ** 2)
    return 1.0 - (1.0 - spec.band_factor) * g


def _stretch(spec: TubeSpec, t: np.ndarray) -> np.ndarray:
    s = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.asarray(t, dtype=float) / spec.period))
    return 1.0 + spec.stretch_amplitude * s


def base_radius(spec: TubeSpec, v, t) -> np.ndarray:
    """Mean outer radius at station v, time t (before cross-section shaping)."""
    v = np.asarray(v, dtype=float)
    taper = spec.inlet_radius + (spec.outlet_radius - spec.inlet_radius) * v
    pulse = _pulse(spec, np.asarray(t, dtype=float) - wave_arrival_time(spec, v))
    expansion = 1.0 - spec.wave_depth + spec.wave_depth * pulse
    return taper * _band(spec, v) * expansion


def _surface_radius(spec: TubeSpec, rho, surface: str):
    if surface == "outer":
        return rho
    if surface == "inner":
        return rho - spec.wall_thickness
    if surface == "lumen":
        return rho - spec.wall_thickness - spec.jelly_thickness
    raise ValueError(f"unknown surface {surface!r}")


def _centerline(spec: TubeSpec, v: np.ndarray, t: float):
    """Centerline points and (normal, binormal) cross-section frame."""
    L = spec.length * float(_stretch(spec, t))
    if spec.bend_angle < 1e-12:
        c = np.zeros((len(v), 3))
        c[:, 2] = L * v
        n = np.tile([1.0, 0.0, 0.0], (len(v), 1))
        b = np.tile([0.0, 1.0, 0.0], (len(v), 1))
        return c, n, b
    theta = spec.bend_angle
    R = L / theta
    phi = theta * v
    c = np.column_stack([R * np.sin(phi), np.zeros_like(phi), R * (1.0 - np.cos(phi))])
    n = np.column_stack([-np.sin(phi), np.zeros_like(phi), np.cos(phi)])
    b = np.tile([0.0, -1.0, 0.0], (len(v), 1))
    return c, n, b


def _shape_xy(spec: TubeSpec, u: np.ndarray, surface: str):
    """Cross-section shape in local (normal, binormal) coordinates, unit scale."""
    ang = 2.0 * np.pi * u
    shape = spec.cross_section if surface != "lumen" or spec.lumen_shape == "offset" else spec.lumen_shape
    if surface == "lumen" and spec.lumen_shape == "star":
        rho = 1.0 + spec.star_amplitude * np.cos(spec.star_points * ang)
        return rho * np.cos(ang), rho * np.sin(ang)
    if surface == "lumen" and spec.lumen_shape == "slit":
        return np.cos(ang), spec.slit_factor * np.sin(ang)
    if spec.cross_section == "circle":
        return np.cos(ang), np.sin(ang)
    if spec.cross_section == "ellipse":
        q = math.sqrt(spec.ellipse_ratio)
        return q * np.cos(ang), np.sin(ang) / q
    if spec.cross_section == "star":
        rho = 1.0 + spec.star_amplitude * np.cos(spec.star_points * ang)
        return rho * np.cos(ang), rho * np.sin(ang)
    raise ValueError(f"unknown cross_section {spec.cross_section!r}")


def _frame_mesh(spec: TubeSpec, surface: str, frame: int, rng) -> TriMeshFrame:
    nu, nv = spec.samples_u, spec.samples_v
    t = frame * spec.period / spec.frames
    v = np.arange(nv + 1) / nv
    u = np.arange(nu) / nu
    c, nvec, bvec = _centerline(spec, v, t)
    rho = _surface_radius(spec, base_radius(spec, v, t), surface)
    cx, cy = _shape_xy(spec, u, surface)
    pts = (
        c[:, None, :]
        + rho[:, None, None] * cx[None, :, None] * nvec[:, None, :]
        + rho[:, None, None] * cy[None, :, None] * bvec[:, None, :]
    )
    verts = pts.reshape(-1, 3)
    if spec.jitter > 0:
        interior = np.ones(len(verts), dtype=bool)
        interior[:nu] = False
        interior[-nu:] = False
        verts = verts + np.where(
            interior[:, None], rng.normal(0.0, spec.jitter, verts.shape), 0.0
        )

    rows = np.arange(nv)[:, None]
    cols = np.arange(nu)[None, :]
    i00 = rows * nu + cols
    i01 = rows * nu + (cols + 1) % nu
    i10 = (rows + 1) * nu + cols
    i11 = (rows + 1) * nu + (cols + 1) % nu
    t1 = np.stack([i00, i01, i11], axis=-1).reshape(-1, 3)
    t2 = np.stack([i00, i11, i10], axis=-1).reshape(-1, 3)
    tris = np.concatenate([t1, t2])
    return TriMeshFrame(verts, tris, frame_index=frame, time=t)


@dataclass
class SynthResult:
    """Generated mesh sequences plus the analytic record used by tests."""

    spec: TubeSpec
    outer: list
    inner: list
    lumen: list

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.spec.frames) * self.spec.period / self.spec.frames


def generate_sequence(spec: TubeSpec, surfaces=("outer", "inner", "lumen")) -> SynthResult:
    """Sample the analytic tube into outer / inner / lumen mesh sequences."""
    rng = np.random.default_rng(spec.seed)
    out = {"outer": [], "inner": [], "lumen": []}
    for frame in range(spec.frames):
        for s in surfaces:
            out[s].append(_frame_mesh(spec, s, frame, rng))
    return SynthResult(spec, out["outer"], out["inner"], out["lumen"])


# ---------------------------------------------------------------------------
# Closed-form oracles
# ---------------------------------------------------------------------------

def _section_area_factor(spec: TubeSpec, surface: str) -> float:
    """Cross-section area divided by pi * rho^2 for the section shape."""
    if surface == "lumen" and spec.lumen_shape == "star":
        return 1.0 + 0.5 * spec.star_amplitude ** 2
    if surface == "lumen" and spec.lumen_shape == "slit":
        return spec.slit_factor
    if spec.cross_section in ("circle", "ellipse"):
        return 1.0  # ellipse axes are area-preserving by construction
    if spec.cross_section == "star":
        return 1.0 + 0.5 * spec.star_amplitude ** 2
    raise ValueError(spec.cross_section)


def oracle_area(spec: TubeSpec, v, t, surface: str = "outer") -> np.ndarray:
    """Analytic cross-sectional area (mm^2) at station v, time t."""
    rho = _surface_radius(spec, base_radius(spec, v, t), surface)
    return np.pi * rho ** 2 * _section_area_factor(spec, surface)


def oracle_wave_speed(spec: TubeSpec) -> float:
    """Wave speed is the construction parameter itself."""
    return spec.wave_speed


def oracle_layer_volume(spec: TubeSpec, t, n_quad: int = 4001) -> float:
    """Myocardial layer volume (outer minus inner) by quadrature of the
    analytic area profile along the (possibly stretched) centerline."""
    v = np.linspace(0.0, 1.0, n_quad)
    a_out = oracle_area(spec, v, t, "outer")
    a_in = oracle_area(spec, v, t, "inner")
    L = spec.length * float(_stretch(spec, np.asarray(t)))
    return float(np.trapezoid(a_out - a_in, v) * L)


def oracle_trim_fraction(spec: TubeSpec, t) -> float:
    """Analytic volume-preserving trim fraction v_c(t) for uniform-radius
    tubes whose volume varies only through longitudinal stretch."""
    if abs(spec.inlet_radius - spec.outlet_radius) > 1e-12 or spec.wave_depth != 0:
        raise ValueError("trim oracle requires a uniform static radius profile")
    frames = np.arange(spec.frames) * spec.period / spec.frames
    stretches = _stretch(spec, frames)
    return float(stretches.min() / _stretch(spec, np.asarray(t)))


def oracle_duty_cycle(spec: TubeSpec, threshold: float = 0.75) -> float:
    """Fraction of the cycle a station's area stays >= threshold * max."""
    d = spec.wave_depth
    if d <= 0:
        return 1.0
    w_thr = (math.sqrt(threshold) - (1.0 - d)) / d
    if w_thr <= 0:
        return 1.0
    if w_thr >= 1:
        return 0.0
    if spec.wave_profile == "raised_cosine":
        width = spec.wave_width * spec.period
        dur = (width / math.pi) * math.acos(2.0 * w_thr - 1.0)
    else:
        sigma = spec.wave_width * spec.period / 4.0
        dur = 2.0 * sigma * math.sqrt(-2.0 * math.log(w_thr))
    return min(1.0, dur / spec.period)


def oracle_gaussian_sigma_frames(spec: TubeSpec) -> float:
    """Std (in frames) of the Gaussian wave profile, for band-fit checks."""
    if spec.wave_profile != "gaussian":
        raise ValueError("only defined for gaussian profiles")
    sigma_s = spec.wave_width * spec.period / 4.0
    return sigma_s * spec.frames / spec.period
