"""beltscan: NIR hyperspectral segmentation of contaminants on a meat conveyor belt."""

from .calibration import CalibrationFrames, apply_ffc, compute_gain, normalize_spectra
from .hypercube import (
    DEFAULT_GRID,
    HyperCube,
    LabelMap,
    MaterialClass,
    PatchSpec,
    WavelengthGrid,
    band_to_wavelength,
    load_cube,
    load_labels,
    save_cube,
    save_labels,
    wavelength_to_band,
)
from .nn import Model, ModelConfig
from .postprocess import run_postprocess
from .segment import SegmentationResult, predict_cube
from .train import LossConfig, TrainConfig, train

__version__ = "0.1.0"
