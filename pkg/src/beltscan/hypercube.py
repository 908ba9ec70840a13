"""Cubes and label maps on the FX17 wavelength lattice, with ENVI I/O and patch tiling."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class FormatError(ValueError):
    """Raised for malformed or unsupported cube files."""


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform sensor lattice with head/tail bands dropped.

    Retained band ``i`` sits at ``origin_nm + step_nm * (i + skip_head)``.
    """

    origin_nm: float = 942.0
    step_nm: float = 3.5
    sensor_bands: int = 224
    skip_head: int = 20
    skip_tail: int = 20

    def __post_init__(self):
        if self.step_nm <= 0:
            raise ValueError("step_nm must be positive")
        if self.retained_bands <= 0:
            raise ValueError("skip_head + skip_tail leaves no bands")

    @property
    def retained_bands(self) -> int:
        return self.sensor_bands - self.skip_head - self.skip_tail

    @property
    def sensor_wavelengths(self) -> np.ndarray:
        return self.origin_nm + self.step_nm * np.arange(self.sensor_bands)

    @property
    def wavelengths(self) -> np.ndarray:
        return self.sensor_wavelengths[self.skip_head:self.skip_head + self.retained_bands]

    @property
    def span(self) -> tuple[float, float]:
        w = self.wavelengths
        return float(w[0]), float(w[-1])

    def for_bands(self, bands: int) -> np.ndarray:
        """Wavelengths for a cube carrying ``bands`` bands (raw sensor or retained)."""
        if bands == self.sensor_bands:
            return self.sensor_wavelengths
        if bands == self.retained_bands:
            return self.wavelengths
        raise ValueError(f"{bands} bands matches neither the sensor ({self.sensor_bands}) "
                         f"nor the retained ({self.retained_bands}) band count")


DEFAULT_GRID = WavelengthGrid()


def wavelength_to_band(lambda_nm: float, grid: WavelengthGrid = DEFAULT_GRID) -> int:
    """Nearest retained band index for a wavelength in nm."""
    idx = int(round((lambda_nm - grid.origin_nm) / grid.step_nm)) - grid.skip_head
    if not 0 <= idx < grid.retained_bands:
        lo, hi = grid.span
        raise ValueError(f"wavelength {lambda_nm} nm outside retained span [{lo:g}, {hi:g}] nm")
    return idx


def band_to_wavelength(i: int, grid: WavelengthGrid = DEFAULT_GRID) -> float:
    if not 0 <= i < grid.retained_bands:
        raise IndexError(f"band index {i} outside [0, {grid.retained_bands})")
    return grid.origin_nm + grid.step_nm * (i + grid.skip_head)


class MaterialClass(enum.IntEnum):
    MEAT = 0
    FAT = 1
    CONVEYOR = 2
    PA_PP = 3
    PU = 4
    METAL = 5
    PEHD = 6
    TEFLON = 7
    NITRILE = 8
    WOOD = 9
    PAPER = 10
    CARDBOARD = 11
    WHITE_CONVEYOR = 12

    @property
    def code(self) -> int:
        return int(self)

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def is_contaminant(self) -> bool:
        return self >= MaterialClass.PA_PP

    @classmethod
    def from_label(cls, name: str) -> "MaterialClass":
        return cls[name.strip().upper()]


N_CLASSES = len(MaterialClass)
CLASS_NAMES = tuple(c.label for c in MaterialClass)
NEGATIVE_CLASSES = tuple(c for c in MaterialClass if not c.is_contaminant)
CONTAMINANT_CLASSES = tuple(c for c in MaterialClass if c.is_contaminant)


@dataclass(frozen=True, eq=False)
class HyperCube:
    """H x W x B volume stored pixel-interleaved (BIP).

    ``stages`` records the preprocessing already applied, e.g.
    ``("band_select", "ffc", "normalize")``; inference checks it against the
    checkpoint.
    """

    data: np.ndarray
    grid: WavelengthGrid = DEFAULT_GRID
    stages: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (lines, samples, bands), got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.isfinite(data).all():
            raise ValueError("cube contains non-finite values")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def wavelengths(self) -> np.ndarray:
        return self.grid.for_bands(self.bands)

    def band(self, lambda_nm: float) -> np.ndarray:
        """H x W image of the retained band nearest ``lambda_nm``."""
        if self.bands != self.grid.retained_bands:
            raise ValueError("wavelength lookup requires a band-selected cube")
        return self.data[:, :, wavelength_to_band(lambda_nm, self.grid)]

    def with_data(self, data: np.ndarray, stage: str | None = None) -> "HyperCube":
        stages = self.stages + (stage,) if stage else self.stages
        return replace(self, data=data, stages=stages)


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("label raster must be 2-D")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise ValueError(f"labels must lie in [0, {N_CLASSES})")
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def contaminant_mask(self) -> np.ndarray:
        return self.labels >= MaterialClass.PA_PP

    def classes_present(self) -> set[MaterialClass]:
        return {MaterialClass(int(c)) for c in np.unique(self.labels)}


def select_bands(raw: HyperCube) -> HyperCube:
    """Drop the noisy head and tail bands of a raw sensor cube."""
    g = raw.grid
    if raw.bands != g.sensor_bands:
        raise ValueError(f"band selection expects {g.sensor_bands} sensor bands, got {raw.bands}")
    data = raw.data[:, :, g.skip_head:g.skip_head + g.retained_bands]
    return raw.with_data(data, "band_select")


# ---------------------------------------------------------------- tiling

@dataclass(frozen=True)
class PatchSpec:
    patch_h: int = 20
    patch_w: int = 16
    overlap_fraction: float = 0.0

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch dimensions must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")

    @property
    def tokens(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def stride(self) -> tuple[int, int]:
        f = 1.0 - self.overlap_fraction
        return max(1, int(round(self.patch_h * f))), max(1, int(round(self.patch_w * f)))


TRAIN_PATCHES = PatchSpec(overlap_fraction=0.5)


def _axis_origins(size: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] + patch < size:
        origins.append(size - patch)
    return origins


def tile_origins(height: int, width: int, spec: PatchSpec) -> list[tuple[int, int]]:
    """Row-major patch origins; the last tile on each axis ends flush with the edge."""
    if height < spec.patch_h or width < spec.patch_w:
        raise ValueError(f"image {height}x{width} smaller than one {spec.patch_h}x{spec.patch_w} patch")
    sh, sw = spec.stride
    rows = _axis_origins(height, spec.patch_h, sh)
    cols = _axis_origins(width, spec.patch_w, sw)
    return [(r, c) for r in rows for c in cols]


def extract_patch(data: np.ndarray, origin: tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """Tokens of one patch, shape (patch_h * patch_w, bands), row-major pixels."""
    r, c = origin
    block = data[r:r + spec.patch_h, c:c + spec.patch_w]
    return block.reshape(spec.tokens, -1)


def tile(cube: HyperCube, spec: PatchSpec) -> Iterator[tuple[np.ndarray, tuple[int, int]]]:
    for origin in tile_origins(cube.height, cube.width, spec):
        yield extract_patch(cube.data, origin, spec), origin


# ---------------------------------------------------------------- ENVI I/O

_DTYPES = {4: np.dtype("<f4"), 1: np.dtype("u1")}
_HEADER_LINE = re.compile(r"^\s*([^=]+?)\s*=\s*(.*)$")


def _header_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".hdr", ".raw") else p
    return base.with_suffix(".hdr"), base.with_suffix(".raw")


def read_header(path: str | Path) -> dict[str, str]:
    hdr, _ = _header_paths(path)
    text = hdr.read_text()
    if not text.lstrip().startswith("ENVI"):
        raise FormatError(f"{hdr}: missing ENVI magic line")
    # fold brace-delimited values that span several lines
    text = re.sub(r"\{[^}]*\}", lambda m: " ".join(m.group(0).split()), text)
    out: dict[str, str] = {}
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        m = _HEADER_LINE.match(line)
        if not m:
            raise FormatError(f"{hdr}: cannot parse header line {line!r}")
        out[m.group(1).strip().lower()] = m.group(2).strip()
    return out


def _brace_list(value: str) -> list[str]:
    value = value.strip()
    if not (value.startswith("{") and value.endswith("}")):
        raise FormatError(f"expected a {{...}} list, got {value!r}")
    return [v.strip() for v in value[1:-1].split(",") if v.strip()]


def _write_header(hdr: Path, fields: dict[str, str]) -> None:
    lines = ["ENVI"] + [f"{k} = {v}" for k, v in fields.items()]
    hdr.write_text("\n".join(lines) + "\n")


def _read_raster(path: str | Path, expect_type: int) -> tuple[np.ndarray, dict[str, str]]:
    hdr, raw = _header_paths(path)
    h = read_header(hdr)
    try:
        samples, lines, bands = int(h["samples"]), int(h["lines"]), int(h["bands"])
        dtype_code = int(h["data type"])
        interleave = h.get("interleave", "bsq").lower()
        byte_order = int(h.get("byte order", "0"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{hdr}: malformed header ({exc})") from exc
    if interleave != "bip":
        raise FormatError(f"{hdr}: unsupported interleave {interleave!r}, only bip is supported")
    if dtype_code != expect_type:
        raise FormatError(f"{hdr}: data type {dtype_code}, expected {expect_type}")
    if int(h.get("header offset", "0")) != 0:
        raise FormatError(f"{hdr}: non-zero header offset is unsupported")
    dtype = _DTYPES[dtype_code]
    if byte_order == 1:
        dtype = dtype.newbyteorder(">")
    expected = samples * lines * bands * dtype.itemsize
    actual = raw.stat().st_size if raw.exists() else -1
    if actual != expected:
        raise FormatError(f"{raw}: size mismatch, header declares {lines}x{samples}x{bands} "
                          f"({expected} bytes) but file holds {max(actual, 0)} bytes")
    data = np.fromfile(raw, dtype=dtype).reshape(lines, samples, bands)
    return data, h


def save_cube(cube: HyperCube, path: str | Path) -> Path:
    hdr, raw = _header_paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    fields = {
        "samples": str(cube.width),
        "lines": str(cube.height),
        "bands": str(cube.bands),
        "header offset": "0",
        "data type": "4",
        "interleave": "bip",
        "byte order": "0",
        "wavelength units": "Nanometers",
        "wavelength": "{" + ", ".join(f"{w:g}" for w in cube.wavelengths) + "}",
        "beltscan stages": "{" + ", ".join(cube.stages) + "}",
    }
    _write_header(hdr, fields)
    cube.data.astype("<f4", copy=False).tofile(raw)
    return hdr


def load_cube(path: str | Path, grid: WavelengthGrid = DEFAULT_GRID) -> HyperCube:
    data, h = _read_raster(path, 4)
    data = data.astype(np.float32)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: raster contains non-finite values")
    try:
        expected = grid.for_bands(data.shape[2])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if "wavelength" in h:
        try:
            wl = np.array([float(v) for v in _brace_list(h["wavelength"])])
        except ValueError as exc:
            raise FormatError(f"{path}: malformed wavelength list") from exc
        if wl.shape != expected.shape or np.abs(wl - expected).max() > 1e-3:
            raise FormatError(f"{path}: wavelength list does not match the sensor lattice")
    stages = tuple(_brace_list(h["beltscan stages"])) if "beltscan stages" in h else ()
    return HyperCube(data, grid, stages)


def save_labels(labels: LabelMap, path: str | Path) -> Path:
    hdr, raw = _header_paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    _write_header(hdr, {
        "samples": str(labels.width),
        "lines": str(labels.height),
        "bands": "1",
        "header offset": "0",
        "data type": "1",
        "interleave": "bip",
        "byte order": "0",
        "file type": "ENVI Classification",
        "classes": "{" + ", ".join(CLASS_NAMES) + "}",
    })
    labels.labels.tofile(raw)
    return hdr


def load_labels(path: str | Path) -> LabelMap:
    data, h = _read_raster(path, 1)
    if int(h.get("bands", "1")) != 1:
        raise FormatError(f"{path}: label raster must have one band")
    if "classes" in h and tuple(_brace_list(h["classes"])) != CLASS_NAMES:
        raise FormatError(f"{path}: class list does not match {CLASS_NAMES}")
    try:
        return LabelMap(data[:, :, 0])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_raster(values: np.ndarray, path: str | Path, description: str = "") -> Path:
    """Single-band float32 raster (confidence maps)."""
    values = np.asarray(values, dtype="<f4")
    hdr, raw = _header_paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    fields = {
        "samples": str(values.shape[1]),
        "lines": str(values.shape[0]),
        "bands": "1",
        "header offset": "0",
        "data type": "4",
        "interleave": "bip",
        "byte order": "0",
    }
    if description:
        fields["description"] = "{" + description + "}"
    _write_header(hdr, fields)
    values.tofile(raw)
    return hdr


def load_raster(path: str | Path) -> np.ndarray:
    data, _ = _read_raster(path, 4)
    return data[:, :, 0].astype(np.float32)
