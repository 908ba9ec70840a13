"""Shared builders for post-processing and inference tests."""

import numpy as np

from beltscan.hypercube import DEFAULT_GRID, HyperCube, LabelMap, wavelength_to_band
from beltscan.nn import ModelConfig
from beltscan.segment import SegmentationResult


def spectrum(values: dict[float, float], base: float = 1.0) -> np.ndarray:
    """184-band spectrum equal to ``base`` except at the listed wavelengths."""
    s = np.full(DEFAULT_GRID.retained_bands, base, dtype=np.float32)
    for nm, v in values.items():
        s[wavelength_to_band(nm)] = v
    return s


FAT_LIKE = {1211.5: 0.5, 1225.5: 0.8, 1012: 0.5, 1026: 0.6, 1407.5: 0.5, 1411: 0.51}   # rule 1 holds
CONVEYOR_LIKE = {1117: 0.5, 1099.5: 0.4}                                                # rule 2 holds
MEAT_LIKE = {1225.5: 0.5, 1215: 0.5, 1232.5: 0.9, 1012: 0.5}                            # rule 3 holds
NEUTRAL = {1117: 0.4, 1099.5: 0.5, 1225.5: 0.5, 1215: 0.4, 1232.5: 0.5, 1012: 0.5}     # no rule holds


def ffc_cube(spectra: np.ndarray) -> HyperCube:
    return HyperCube(np.asarray(spectra, np.float32), DEFAULT_GRID, ("band_select", "ffc"))


def result_from_labels(labels, logits=None) -> SegmentationResult:
    labels = np.asarray(labels)
    return SegmentationResult(LabelMap(labels), np.ones(labels.shape, np.float32), logits)


class ConstantModel:
    """Stand-in model returning fixed per-token logits, counting its invocations."""

    def __init__(self, logits_fn, normalized=True, tokens=320):
        self.config = ModelConfig(tokens=tokens, normalized_input=normalized)
        self.fn = logits_fn
        self.calls = 0
        self.patches = 0

    def forward(self, tokens):
        self.calls += 1
        self.patches += len(tokens)
        return self.fn(tokens)
