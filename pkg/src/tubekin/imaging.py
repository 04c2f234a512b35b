"""Color mapping and deterministic PNG export of analysis images."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

logger = logging.getLogger(__name__)

NEUTRAL_GRAY = (128, 128, 128)


@dataclass
class ColorMap:
    """Scalar [0,1] -> RGB map. ``area`` runs blue (0) to red (1) through
    the spectrum with exact endpoints; ``gray`` is linear."""

    name: str

    def __call__(self, values: np.ndarray) -> np.ndarray:
        v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
        if self.name == "area":
            hsv = np.stack([(1.0 - v) * (2.0 / 3.0), np.ones_like(v), np.ones_like(v)],
                           axis=-1)
            rgb = hsv_to_rgb(hsv)
        elif self.name == "gray":
            rgb = np.stack([v, v, v], axis=-1)
        else:
            raise ValueError(f"unknown colormap {self.name!r}")
        return np.round(rgb * 255).astype(np.uint8)


AREA_COLORMAP = ColorMap("area")
GRAY_COLORMAP = ColorMap("gray")


def gradient_rgb(angle: np.ndarray, magnitude: np.ndarray) -> np.ndarray:
    """Angle -> hue, magnitude -> intensity (black at zero magnitude)."""
    h = (np.asarray(angle) % (2.0 * np.pi)) / (2.0 * np.pi)
    val = np.clip(np.asarray(magnitude, dtype=float), 0.0, 1.0)
    hsv = np.stack([h, np.ones_like(h), val], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def normalize_matrix(values: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    if not finite.any():
        return np.zeros_like(v)
    lo = np.nanmin(v) if vmin is None else vmin
    hi = np.nanmax(v) if vmax is None else vmax
    if hi - lo <= 0:
        return np.where(finite, 0.5, np.nan)
    return (v - lo) / (hi - lo)


def render_image(matrix, colormap: ColorMap = AREA_COLORMAP, path=None,
                 magnification: int = 4, flip_vertical: bool = True,
                 rgb: Optional[np.ndarray] = None):
    """Render a (station x time) matrix to a PNG, one cell per pixel block.

    NaN cells render neutral gray and are counted in the return value.
    Output bytes are deterministic for identical inputs. Station 0 is
    drawn at the bottom edge unless ``flip_vertical`` is disabled.
    """
    if rgb is None:
        m = np.asarray(matrix, dtype=float)
        nan_mask = ~np.isfinite(m)
        filled = np.where(nan_mask, 0.0, m)
        img = colormap(filled)
        img[nan_mask] = NEUTRAL_GRAY
        n_nan = int(nan_mask.sum())
    else:
        img = rgb
        n_nan = 0
    if flip_vertical:
        img = img[::-1]
    if magnification > 1:
        img = np.repeat(np.repeat(img, magnification, axis=0), magnification, axis=1)
    out = Image.fromarray(img, mode="RGB")
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        out.save(Path(path), format="PNG")
    return out, n_nan


def save_figure(fig, path):
    """Write a matplotlib figure as a byte-stable PNG (fixed metadata)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(Path(path), format="png", dpi=110, metadata={"Software": "tubekin"})
