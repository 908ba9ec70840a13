"""Flat-field correction and per-pixel spectral normalization.

Dark ``D`` and flat ``F`` frames are the usual push-broom references: a few
lines (often one, after averaging) across the full sensor width. The gain is

    G = m / (F - D),   C = (I - D) * G

with ``m`` the per-band mean of the corrected flat ``F - D``.  Frames whose
height differs from the image are broadcast along the scan axis, which
requires them to be a single line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .hypercube import HyperCube


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CalibrationFrames:
    dark: HyperCube
    flat: HyperCube

    def __post_init__(self):
        if self.dark.shape != self.flat.shape:
            raise CalibrationError(f"dark {self.dark.shape} and flat {self.flat.shape} differ in shape")
        if self.dark.grid != self.flat.grid:
            raise CalibrationError("dark and flat frames use different wavelength grids")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dark.shape

    def line_average(self) -> "CalibrationFrames":
        """Collapse several reference lines into one."""
        d = self.dark.data.mean(axis=0, keepdims=True)
        f = self.flat.data.mean(axis=0, keepdims=True)
        return CalibrationFrames(self.dark.with_data(d), self.flat.with_data(f))

    def select_bands(self) -> "CalibrationFrames":
        from .hypercube import select_bands
        return CalibrationFrames(select_bands(self.dark), select_bands(self.flat))


@dataclass(frozen=True, eq=False)
class GainMap:
    gain: np.ndarray        # same layout as the frames
    per_band_mean: np.ndarray
    dead_mask: np.ndarray   # True where F - D <= epsilon_live (per pixel and band)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.gain.shape


def compute_gain(frames: CalibrationFrames, epsilon_live: float | None = None) -> GainMap:
    """Per-pixel gain ``m_b / (F - D)`` with dead elements flagged.

    ``epsilon_live`` defaults to ``1e-6 * max(F - D)``.
    """
    diff = frames.flat.data.astype(np.float64) - frames.dark.data.astype(np.float64)
    if epsilon_live is None:
        epsilon_live = 1e-6 * max(float(diff.max()), 0.0)
    if epsilon_live < 0:
        raise ValueError("epsilon_live must be non-negative")
    dead = diff <= epsilon_live
    live_count = (~dead).sum(axis=(0, 1))
    if (live_count == 0).any():
        bad = int(np.flatnonzero(live_count == 0)[0])
        raise CalibrationError(f"calibration impossible: every pixel of band {bad} has F - D <= {epsilon_live:g}")
    m = np.where(dead, 0.0, diff).sum(axis=(0, 1)) / live_count
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(dead, 0.0, m / diff)
    return GainMap(gain, m, dead)


def _fill_dead(c: np.ndarray, dead: np.ndarray) -> np.ndarray:
    """Replace dead elements by the mean of their live 4-neighbours in the same band."""
    live = (~dead).astype(c.dtype)
    cross = np.zeros((3, 3, 1))
    cross[[0, 1, 1, 2], [1, 0, 2, 1], 0] = 1
    total = ndimage.convolve(c * live, cross, mode="constant")
    count = ndimage.convolve(live, cross, mode="constant")
    fill = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return np.where(dead, fill, c)


def apply_ffc(image: HyperCube, frames: CalibrationFrames, gain: GainMap) -> HyperCube:
    """Flat-field corrected cube ``(I - D) * G``."""
    fh, fw, fb = frames.shape
    if gain.shape != frames.shape:
        raise CalibrationError(f"gain map {gain.shape} does not match frames {frames.shape}")
    if (image.width, image.bands) != (fw, fb) or fh not in (1, image.height):
        raise CalibrationError(f"image {image.shape} incompatible with calibration frames {frames.shape}")
    if image.grid != frames.dark.grid:
        raise CalibrationError("image and calibration frames use different wavelength grids")
    dark = frames.dark.data.astype(np.float64)
    c = (image.data.astype(np.float64) - dark) * gain.gain
    dead = np.broadcast_to(gain.dead_mask, c.shape)
    if dead.any():
        c = _fill_dead(c, dead)
    return image.with_data(c.astype(np.float32), "ffc")


def calibrate(image: HyperCube, frames: CalibrationFrames, epsilon_live: float | None = None) -> HyperCube:
    return apply_ffc(image, frames, compute_gain(frames, epsilon_live))


def normalize_array(spectra: np.ndarray) -> np.ndarray:
    """Min-max scale every spectrum (last axis) to [0, 1]; constant spectra become zeros."""
    s = np.asarray(spectra, dtype=np.float64)
    if s.shape[-1] < 2:
        raise ValueError("normalization needs at least two bands")
    lo = s.min(axis=-1, keepdims=True)
    span = s.max(axis=-1, keepdims=True) - lo
    shifted = s - lo
    return np.divide(shifted, span, out=np.zeros_like(shifted), where=span > 0)


def normalize_spectra(cube: HyperCube) -> HyperCube:
    return cube.with_data(normalize_array(cube.data).astype(np.float32), "normalize")
