"""Spatio-temporal area image and the wall-motion quantities derived
from it: peak expansion times, expansion bands (Gaussian fit and 75%
threshold), percent time expanded, gradient images, wave speeds, and
expansion/contraction cycle ratios."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)


@dataclass
class AreaImage:
    """Cross-sectional areas indexed by (station, time).

    ``values[j, k]`` is the area (mm^2) at station j, frame k.
    ``station_depth_mm`` maps stations to longitudinal arc length;
    ``seconds_per_frame`` fixes the time axis.
    """

    values: np.ndarray
    station_depth_mm: np.ndarray
    seconds_per_frame: float

    @property
    def n_stations(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def period(self) -> float:
        return self.n_frames * self.seconds_per_frame


def build_area_image(areas, station_depth_mm, seconds_per_frame: float) -> AreaImage:
    """Assemble the (station x time) area matrix, refusing missing cells."""
    values = np.asarray(areas, dtype=float)
    if values.ndim != 2:
        raise ValueError("areas must be a 2D (station x time) table")
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        j, k = bad[0]
        raise ValueError(f"missing area at station {j}, frame {k} "
                         f"({len(bad)} missing cells total)")
    if (values < 0).any():
        raise ValueError("negative areas in table")
    return AreaImage(values=values,
                     station_depth_mm=np.asarray(station_depth_mm, dtype=float),
                     seconds_per_frame=float(seconds_per_frame))


FLAT_ROW_TOL = 1e-9


def peak_times(image: AreaImage) -> np.ndarray:
    """Per-station time of maximum area, in frames (cyclic, sub-frame).

    The integer argmax is refined with 3-point parabolic interpolation;
    flat rows (max - min < 1e-9) get NaN.
    """
    A = image.values
    m, T = A.shape
    out = np.full(m, np.nan)
    for j in range(m):
        row = A[j]
        if row.max() - row.min() < FLAT_ROW_TOL:
            continue
        k = int(np.argmax(row))
        y0 = row[(k - 1) % T]
        y1 = row[k]
        y2 = row[(k + 1) % T]
        denom = y0 - 2 * y1 + y2
        delta = 0.0 if abs(denom) < 1e-300 else 0.5 * (y0 - y2) / denom
        delta = float(np.clip(delta, -0.5, 0.5))
        out[j] = (k + delta) % T
    return out


@dataclass
class ExpansionBand:
    """Expansion interval around a station's peak, both threshold variants.

    Band edges are in frames; an edge pair (lo, hi) is cyclic with
    lo <= hi after unwrapping about the peak.
    """

    station: int
    t_peak: float
    gauss_sigma: Optional[float]
    gauss_band: Optional[tuple]
    p75_band: tuple
    gauss_converged: bool
    flags: list = field(default_factory=list)

    def width(self, variant: str) -> float:
        band = self.gauss_band if variant == "gauss" else self.p75_band
        if band is None:
            return float("nan")
        return band[1] - band[0]


def _cyclic_offsets(T: int, center: float) -> np.ndarray:
    return (np.arange(T) - center + T / 2.0) % T - T / 2.0


def _threshold_band(row: np.ndarray, t_peak: float, frac: float = 0.75):
    """Contiguous band around the peak where row >= frac * max, with
    linearly interpolated crossings (frames, cyclic)."""
    T = len(row)
    thr = frac * row.max()
    kp = int(round(t_peak)) % T

    def scan(direction):
        steps = 0
        k = kp
        while steps < T:
            k2 = (k + direction) % T
            if row[k2] < thr:
                y1, y2 = row[k], row[k2]
                f = (y1 - thr) / max(y1 - y2, 1e-300)
                return steps + f
            k = k2
            steps += 1
        return T / 2.0  # the whole cycle stays above threshold

    left = scan(-1)
    right = scan(+1)
    return (t_peak - left, t_peak + right)


def expansion_band(row, t_peak: float, station: int = 0,
                   max_nfev: int = 50) -> ExpansionBand:
    """Expansion band for one station row.

    Gaussian variant: least-squares fit of A*exp(-(t-t*)^2/(2 s^2)) + c
    over the cyclic row with the mean pinned at the detected peak; the
    band is t* +- s (the fitted curve's one-sigma crossings). Threshold
    variant: interpolated crossings of 0.75 * max. A non-converged fit
    falls back to the threshold variant only.
    """
    row = np.asarray(row, dtype=float)
    T = len(row)
    if not np.isfinite(t_peak):
        raise ValueError("undefined peak; station should have been flagged upstream")
    x = _cyclic_offsets(T, t_peak)
    amp0 = row.max() - row.min()
    p0 = np.array([amp0, max(T / 6.0, 1.0), row.min()])

    def resid(p):
        a, s, c = p
        return a * np.exp(-0.5 * (x / s) ** 2) + c - row

    gauss_sigma = None
    gauss_band = None
    converged = False
    flags = []
    try:
        fit = least_squares(resid, p0, method="lm", max_nfev=max_nfev)
        sigma = abs(float(fit.x[1]))
        converged = bool(fit.status > 0) and sigma < T
        if converged:
            gauss_sigma = sigma
            gauss_band = (t_peak - sigma, t_peak + sigma)
    except Exception:
        converged = False
    if not converged:
        flags.append("gaussian fit did not converge; threshold variant only")

    p75 = _threshold_band(row, t_peak, 0.75)
    return ExpansionBand(
        station=station,
        t_peak=float(t_peak),
        gauss_sigma=gauss_sigma,
        gauss_band=gauss_band,
        p75_band=p75,
        gauss_converged=converged,
        flags=flags,
    )


def percent_time_expanded(bands: Sequence[ExpansionBand], n_frames: int):
    """Band duration as a fraction of the cycle, per station and variant.

    Returns (gauss_fraction, p75_fraction) arrays; stations without a
    converged Gaussian fit get NaN in the first array.
    """
    gauss = np.full(len(bands), np.nan)
    p75 = np.full(len(bands), np.nan)
    for i, b in enumerate(bands):
        if b.gauss_band is not None:
            gauss[i] = min(b.width("gauss") / n_frames, 1.0)
        p75[i] = min(b.width("p75") / n_frames, 1.0)
    return gauss, p75


@dataclass
class GradientImage:
    """Per-pixel area gradient in physical units (d/dt in mm^2/s, d/dv in
    mm^2/mm), with hue angle and 99th-percentile-normalized magnitude."""

    d_dt: np.ndarray
    d_dv: np.ndarray
    angle: np.ndarray
    magnitude: np.ndarray


def area_gradient_image(image: AreaImage) -> GradientImage:
    """Central-difference gradient of the area image (cyclic in time,
    clamped at the longitudinal ends)."""
    A = image.values
    spf = image.seconds_per_frame
    d_dt = (np.roll(A, -1, axis=1) - np.roll(A, 1, axis=1)) / (2.0 * spf)
    depth = image.station_depth_mm
    d_dv = np.empty_like(A)
    if len(depth) > 1:
        d_dv[1:-1] = (A[2:] - A[:-2]) / np.maximum(
            (depth[2:] - depth[:-2])[:, None], 1e-12)
        d_dv[0] = (A[1] - A[0]) / max(depth[1] - depth[0], 1e-12)
        d_dv[-1] = (A[-1] - A[-2]) / max(depth[-1] - depth[-2], 1e-12)
    else:
        d_dv[:] = 0.0
    angle = np.arctan2(d_dv, d_dt)
    mag = np.hypot(d_dt, d_dv)
    ref = np.percentile(mag, 99.0)
    magnitude = np.clip(mag / max(ref, 1e-300), 0.0, 1.0)
    return GradientImage(d_dt=d_dt, d_dv=d_dv, angle=angle, magnitude=magnitude)


@dataclass
class WaveStats:
    """Summary of the expansion wave's travel speed along the tube (mm/s)."""

    speed_min: float
    speed_max: float
    speed_avg: float
    speed_std: float
    speed_cycle: float
    n_local: int
    n_excluded: int

    def as_dict(self) -> dict:
        return {
            "speed_min": self.speed_min,
            "speed_max": self.speed_max,
            "speed_avg": self.speed_avg,
            "speed_std": self.speed_std,
            "speed_cycle": self.speed_cycle,
        }


def _wrap_delta(dt: np.ndarray, period: float) -> np.ndarray:
    return (dt + period / 2.0) % period - period / 2.0


def wave_speed_stats(t_peak_frames: np.ndarray, station_depth_mm: np.ndarray,
                     seconds_per_frame: float, n_frames: int) -> WaveStats:
    """Local and end-to-end wave speeds from per-station peak times.

    Local speed between adjacent stations is depth difference over the
    cyclically wrapped peak delay (signed; a backward wave gives negative
    speeds). Pairs with zero delay are excluded and counted.
    """
    t = np.asarray(t_peak_frames, dtype=float)
    depth = np.asarray(station_depth_mm, dtype=float)
    ok = np.isfinite(t)
    if ok.sum() < 3:
        return WaveStats(*([float("nan")] * 5), n_local=0, n_excluded=0)
    idx = np.nonzero(ok)[0]
    ts = t[idx] * seconds_per_frame
    ds = depth[idx]
    period = n_frames * seconds_per_frame
    dt = _wrap_delta(np.diff(ts), period)
    dd = np.diff(ds)
    nz = dt != 0
    speeds = dd[nz] / dt[nz]
    excluded = int((~nz).sum())
    if not len(speeds):
        return WaveStats(*([float("nan")] * 5), n_local=0, n_excluded=excluded)
    cum = np.concatenate([[ts[0]], ts[0] + np.cumsum(dt)])
    delay = cum[-1] - cum[0]
    cycle = (ds[-1] - ds[0]) / delay if delay != 0 else float("nan")
    return WaveStats(
        speed_min=float(speeds.min()),
        speed_max=float(speeds.max()),
        speed_avg=float(speeds.mean()),
        speed_std=float(speeds.std()),
        speed_cycle=float(cycle),
        n_local=int(len(speeds)),
        n_excluded=excluded,
    )


@dataclass
class CycleRatios:
    """Expansion/contraction split of the volume cycle."""

    expand_fraction: float
    contract_fraction: float
    ratio: float
    period_ms: float
    expand_ms: float
    contract_ms: float
    min_index: int
    max_index: int

    def as_dict(self) -> dict:
        return {
            "expand_pct": 100.0 * self.expand_fraction,
            "contract_pct": 100.0 * self.contract_fraction,
            "ratio": self.ratio,
            "period_ms": self.period_ms,
            "expand_ms": self.expand_ms,
            "contract_ms": self.contract_ms,
        }


def cycle_phase_ratios(volumes, period: float) -> CycleRatios:
    """Expansion = frames from the volume minimum to the maximum (cyclic);
    contraction is the complement. Ties pick the earliest extremum."""
    v = np.asarray(volumes, dtype=float)
    T = len(v)
    vmin, vmax = v.min(), v.max()
    i_min = int(np.nonzero(v <= vmin + 1e-9 * max(abs(vmin), 1.0))[0][0])
    i_max = int(np.nonzero(v >= vmax - 1e-9 * max(abs(vmax), 1.0))[0][0])
    expand = ((i_max - i_min) % T) / T
    contract = 1.0 - expand
    ratio = expand / contract if contract > 0 else float("inf")
    return CycleRatios(
        expand_fraction=expand,
        contract_fraction=contract,
        ratio=ratio,
        period_ms=1000.0 * period,
        expand_ms=1000.0 * period * expand,
        contract_ms=1000.0 * period * contract,
        min_index=i_min,
        max_index=i_max,
    )
