"""Spectral rules and erosion on a deliberately bad prediction.

A perfect label map is corrupted the way a weak classifier fails: a fat
region is called PEHD, a strip of belt is called PEHD, and a few isolated
pixels flicker to metal.  The rules look at the flat-field corrected spectra
and undo the PEHD calls; erosion removes the speckle.

    python demos/02_postprocess.py
"""

import numpy as np

from beltscan.calibration import apply_ffc, compute_gain
from beltscan.hypercube import LabelMap, MaterialClass as M, select_bands
from beltscan.postprocess import run_postprocess
from beltscan.segment import SegmentationResult
from beltscan.synthscene import Contaminant, NoiseModel, SceneSpec, render_scene

spec = SceneSpec(height=64, width=64, orientation="fat_up", seed=5,
                 contaminants=(Contaminant(M.PEHD, "rectangle", 8, position=(40, 40)),))
raw, truth, frames = render_scene(spec, noise=NoiseModel())
frames = frames.select_bands()
ffc = apply_ffc(select_bands(raw), frames, compute_gain(frames))

pred = truth.labels.copy()
fat = np.argwhere(truth.labels == M.FAT)
r, c = fat[len(fat) // 2]
pred[r - 3:r + 3, c - 3:c + 3] = M.PEHD                  # fat mistaken for PEHD
belt_rows = np.flatnonzero((truth.labels == M.CONVEYOR).all(axis=1))
pred[belt_rows[0], 5:30] = M.PEHD                        # belt streak
rng = np.random.default_rng(0)
speckle = rng.integers(0, 64, size=(12, 2))
pred[speckle[:, 0], speckle[:, 1]] = M.METAL             # isolated metal pixels
result = SegmentationResult(LabelMap(pred), np.ones(pred.shape, np.float32))

for order in ("erosion", "rules", "rules,erosion"):
    cleaned, report = run_postprocess(result, ffc, order)
    blobs = [(b.cls.label, b.area) for b in report.blobs]
    print(f"{order:14s} -> {len(blobs)} contaminant blob(s): {blobs}")
print("ground truth   -> 1 contaminant blob: PEHD, 64 px")
