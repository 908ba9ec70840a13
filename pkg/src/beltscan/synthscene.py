"""Seeded synthetic line-scan scenes of pork belly on a belt, with foreign bodies and sensor artefacts.

Material curves are smooth reflectance-like functions built from a linear
trend plus Gaussian absorption features.  They are not measured signatures;
they are shaped so the PEHD/fat confusion and the reclassification rules are
exercised the way real data exercises them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import CalibrationFrames
from .hypercube import (
    DEFAULT_GRID,
    CONTAMINANT_CLASSES,
    HyperCube,
    LabelMap,
    MaterialClass,
    WavelengthGrid,
    save_cube,
    save_labels,
)

M = MaterialClass

# (level, slope per 100 nm about 1300 nm, [(centre nm, width nm, depth), ...])
# negative depth = reflectance peak
_CURVES: dict[MaterialClass, tuple[float, float, list[tuple[float, float, float]]]] = {
    M.MEAT: (0.62, -0.035, [(1190, 45, 0.10), (1450, 70, 0.30), (1650, 60, 0.08), (990, 45, 0.32)]),
    M.FAT: (0.80, -0.010, [(1210, 12, 0.16), (1400, 30, 0.10), (1440, 60, 0.05), (1160, 30, 0.03),
                           (1128, 22, 0.07)]),
    M.CONVEYOR: (0.36, 0.015, [(1095, 18, 0.10), (1350, 90, -0.05), (1520, 50, 0.06)]),
    M.PA_PP: (0.70, -0.030, [(1214, 9, 0.20), (1180, 30, 0.05), (1390, 25, 0.08), (1500, 40, 0.12)]),
    M.PU: (0.58, -0.010, [(1480, 35, 0.18), (1200, 20, 0.08), (1300, 60, -0.05)]),
    M.METAL: (0.30, 0.030, [(1250, 200, 0.04)]),
    M.PEHD: (0.80, -0.010, [(1229, 11, 0.20), (1400, 30, 0.10), (1440, 60, 0.05), (1160, 30, 0.03),
                            (1128, 22, 0.07)]),
    M.TEFLON: (0.92, 0.000, [(1150, 60, 0.03), (1600, 50, 0.05)]),
    M.NITRILE: (0.45, 0.020, [(1160, 25, 0.07), (1420, 30, 0.06), (1560, 40, -0.08)]),
    M.WOOD: (0.60, 0.050, [(1200, 35, 0.05), (1490, 60, 0.20)]),
    M.PAPER: (0.75, 0.010, [(1490, 55, 0.12), (1590, 25, 0.05), (1110, 40, -0.04)]),
    M.CARDBOARD: (0.55, 0.040, [(1490, 55, 0.09), (1200, 40, 0.04), (1350, 30, 0.05)]),
    M.WHITE_CONVEYOR: (0.85, -0.020, [(1215, 25, 0.06), (1395, 20, 0.07), (1540, 30, 0.06), (1050, 30, 0.05)]),
}


def material_curve(cls: MaterialClass, wavelengths: np.ndarray) -> np.ndarray:
    level, slope, feats = _CURVES[cls]
    w = np.asarray(wavelengths, dtype=np.float64)
    r = level + slope * (w - 1300.0) / 100.0
    for centre, width, depth in feats:
        r = r - depth * np.exp(-0.5 * ((w - centre) / width) ** 2)
    return r


@dataclass(frozen=True, eq=False)
class MaterialSpectrum:
    cls: MaterialClass
    level_shift: float = 0.0
    band_std: float = 0.004
    smoothness_nm: float = 9.0      # narrowest feature width in the curve

    def curve(self, wavelengths: np.ndarray) -> np.ndarray:
        return material_curve(self.cls, wavelengths) + self.level_shift

    @property
    def mean(self) -> np.ndarray:
        return self.curve(DEFAULT_GRID.wavelengths)

    @property
    def std(self) -> np.ndarray:
        return np.full(DEFAULT_GRID.retained_bands, self.band_std)


def default_materials(seed: int = 0) -> dict[MaterialClass, MaterialSpectrum]:
    """The 13 synthetic materials; ``seed`` jitters overall levels by at most 0.01."""
    rng = np.random.default_rng(seed)
    shifts = rng.uniform(-0.01, 0.01, size=len(MaterialClass))
    shifts[M.PEHD] = shifts[M.FAT]      # the two differ only around 1222 nm
    return {c: MaterialSpectrum(c, float(shifts[c])) for c in MaterialClass}


@dataclass(frozen=True)
class CameraMeta:
    line_rate_hz: float = 527.0
    pixel_pitch_mm: float = 0.47
    fov_width_mm: float = 300.0
    standoff_mm: float = 400.0
    sensor_width_px: int = 640

    @property
    def min_feature_px(self) -> int:
        """Pixels spanned along the scan by a 1 mm object."""
        return int(math.floor(1.0 / self.pixel_pitch_mm))


SHAPES = ("rectangle", "ellipse", "line", "spiral")


@dataclass(frozen=True)
class Contaminant:
    cls: MaterialClass
    shape: str = "rectangle"
    size: int = 6                   # extent in px (side, diameter or length)
    thickness: int = 2              # line and spiral stroke width, 1-2 px
    position: tuple[int, int] | None = None    # top-left of the footprint box
    angle: float = 0.0              # radians, lines only

    def __post_init__(self):
        if not self.cls.is_contaminant:
            raise ValueError(f"{self.cls.label} is not a contaminant class")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown contaminant shape {self.shape!r}")
        if self.size < 2:
            raise ValueError("contaminants must span at least two pixels")
        if self.thickness not in (1, 2):
            raise ValueError("stroke thickness must be 1 or 2 px")

    def footprint(self) -> np.ndarray:
        n = self.size
        if self.shape == "rectangle":
            return np.ones((n, n), dtype=bool)
        if self.shape == "ellipse":
            yy, xx = np.mgrid[:n, :n]
            c = (n - 1) / 2.0
            return ((yy - c) ** 2 + (xx - c) ** 2) <= (n / 2.0) ** 2
        if self.shape == "line":
            dy, dx = math.sin(self.angle), math.cos(self.angle)
            span = n - 1
            h = int(round(abs(dy) * span)) + self.thickness
            w = int(round(abs(dx) * span)) + self.thickness
            m = np.zeros((h, w), dtype=bool)
            y0 = 0 if dy >= 0 else h - self.thickness
            x0 = 0 if dx >= 0 else w - self.thickness
            for t in np.linspace(0.0, span, 4 * n):
                y = int(round(y0 + dy * t))
                x = int(round(x0 + dx * t))
                m[y:y + self.thickness, x:x + self.thickness] = True
            return m
        # Archimedean spiral with ~3 px between turns
        m = np.zeros((n, n), dtype=bool)
        c = (n - 1) / 2.0
        turns_gap = 2.0 + self.thickness
        r_max = (n - self.thickness) / 2.0
        theta_max = 2 * math.pi * r_max / turns_gap
        for th in np.linspace(0.0, theta_max, 40 * n):
            r = turns_gap * th / (2 * math.pi)
            y = int(round(c + r * math.sin(th) - (self.thickness - 1) / 2))
            x = int(round(c + r * math.cos(th) - (self.thickness - 1) / 2))
            y, x = min(max(y, 0), n - self.thickness), min(max(x, 0), n - self.thickness)
            m[y:y + self.thickness, x:x + self.thickness] = True
        return m


@dataclass(frozen=True)
class SceneSpec:
    height: int = 160               # lines (scan direction)
    width: int = 128                # samples across the belt
    orientation: str = "fat_up"     # fat_up | meat_up | belt
    pork_margin: float = 0.12       # belt margin around the belly, fraction of each side
    contaminants: tuple[Contaminant, ...] = ()
    seed: int = 0
    blend_px: int = 1               # boundary spectral mixing width, 0 or 1
    blend_weight: float = 0.25      # share of a boundary pixel taken from its neighbours
    shading: float = 0.08           # amplitude of the smooth multiplicative shading field

    def __post_init__(self):
        if self.orientation not in ("fat_up", "meat_up", "belt"):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.height < 4 or self.width < 4:
            raise ValueError("scene too small")
        if self.blend_px not in (0, 1):
            raise ValueError("blend_px must be 0 or 1")
        if not 0.0 <= self.blend_weight <= 0.5:
            raise ValueError("blend_weight must lie in [0, 0.5]")
        for c in self.contaminants:
            if c.position is None:
                continue
            fh, fw = c.footprint().shape
            r, col = c.position
            if r < 0 or col < 0 or r + fh > self.height or col + fw > self.width:
                raise ValueError(f"{c.cls.label} {c.shape} at {c.position} extends outside the "
                                 f"{self.height}x{self.width} image")


@dataclass(frozen=True)
class NoiseModel:
    stripe_std: float = 0.05        # column-to-column gain spread
    camera_seed: int = 1234         # the stripe field is a property of the camera
    dark_offset: float = 0.05
    drift_gain: float = 1.0
    drift_offset: float = 0.0
    shot_std: float = 0.003
    illumination: float = 1.0
    reference_lines: int = 32       # lines averaged into each calibration frame

    def __post_init__(self):
        if self.drift_gain <= 0 or self.illumination <= 0:
            raise ValueError("gains must be positive")
        if self.stripe_std < 0 or self.shot_std < 0:
            raise ValueError("noise levels must be non-negative")

    @classmethod
    def identity(cls) -> "NoiseModel":
        return cls(stripe_std=0.0, dark_offset=0.0, shot_std=0.0)

    def stripe_field(self, width: int, bands: int) -> np.ndarray:
        """Per-column per-band gain, smooth along bands, mean 1 over columns in every band."""
        if self.stripe_std == 0:
            return np.ones((width, bands))
        rng = np.random.default_rng(self.camera_seed)
        col = rng.normal(0.0, self.stripe_std, size=(width, 1))
        slow = rng.normal(0.0, self.stripe_std / 2, size=(width, 4))
        t = np.linspace(0.0, 1.0, bands)
        basis = np.stack([np.cos(np.pi * k * t) for k in range(1, 5)])
        g = 1.0 + col + slow @ basis
        g = np.clip(g, 0.5, None)
        return g / g.mean(axis=0, keepdims=True)


def _smooth_field(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    from scipy.ndimage import gaussian_filter
    f = gaussian_filter(rng.normal(size=(h, w)), sigma=scale, mode="wrap")
    f -= f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    labels = np.full((h, w), M.CONVEYOR, dtype=np.uint8)
    if spec.orientation == "belt":
        return labels
    yy, xx = np.mgrid[:h, :w]
    my, mx = spec.pork_margin * h, spec.pork_margin * w
    wobble = 0.6 * min(my, mx) * _smooth_field(rng, h, w, max(h, w) / 8)
    # rounded rectangle: superellipse footprint
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ry, rx = h / 2 - my, w / 2 - mx
    inside = (np.abs((yy - cy) / ry) ** 4 + np.abs((xx - cx) / rx) ** 4) ** 0.25
    pork = inside * np.maximum(ry, rx) + wobble < np.maximum(ry, rx)
    base, streak = (M.FAT, M.MEAT) if spec.orientation == "fat_up" else (M.MEAT, M.FAT)
    layers = _smooth_field(rng, h, w, max(2.0, h / 20))
    # streaks run along the belly, i.e. along the scan axis
    band_field = np.sin(2 * np.pi * (xx / (w / 3.5)) + 2.5 * layers)
    frac = 0.3 if spec.orientation == "fat_up" else 0.35
    thresh = np.quantile(band_field[pork], 1 - frac) if pork.any() else 1.0
    labels[pork] = base
    labels[pork & (band_field > thresh)] = streak
    return labels


def _place(spec: SceneSpec, labels: np.ndarray, rng: np.random.Generator) -> list[tuple[Contaminant, np.ndarray]]:
    placed = []
    pork = labels != M.CONVEYOR
    occupied = np.zeros_like(pork)
    for c in spec.contaminants:
        fp = c.footprint()
        fh, fw = fp.shape
        if fh > spec.height or fw > spec.width:
            raise ValueError(f"{c.cls.label} {c.shape} of size {c.size} does not fit the image")
        if c.position is not None:
            r, col = c.position
        else:
            best = None
            for _ in range(200):
                r = int(rng.integers(0, spec.height - fh + 1))
                col = int(rng.integers(0, spec.width - fw + 1))
                win_pork = pork[r:r + fh, col:col + fw][fp]
                win_occ = occupied[max(r - 2, 0):r + fh + 2, max(col - 2, 0):col + fw + 2]
                if win_pork.all() and not win_occ.any():
                    best = (r, col)
                    break
                if best is None and not win_occ.any():
                    best = (r, col)
            if best is None:
                best = (r, col)
            r, col = best
        mask = np.zeros_like(pork)
        mask[r:r + fh, col:col + fw] = fp
        occupied |= mask
        placed.append((replace(c, position=(r, col)), mask))
    return placed


def _blend(ideal: np.ndarray, labels: np.ndarray, weight: float) -> np.ndarray:
    """Mix each boundary pixel with the mean of its differently-labelled 4-neighbours.

    ``weight`` is the neighbours' share.  At 0.5 the two pixels either side of
    a straight edge become identical, so their labels carry no spectral
    evidence; below that each pixel stays closest to its own material.
    """
    h, w = labels.shape
    pad_l = np.pad(labels, 1, mode="edge")
    pad_s = np.pad(ideal, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(ideal)
    cnt = np.zeros((h, w, 1))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nl = pad_l[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        ns = pad_s[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        diff = (nl != labels)[..., None]
        acc += np.where(diff, ns, 0.0)
        cnt += diff
    edge = cnt > 0
    mixed = (1.0 - weight) * ideal + weight * np.divide(acc, cnt, out=np.zeros_like(acc), where=edge)
    return np.where(edge, mixed, ideal)


def render_labels(spec: SceneSpec) -> tuple[LabelMap, list[Contaminant]]:
    rng = np.random.default_rng(spec.seed)
    labels = _layout(spec, rng)
    placed = _place(spec, labels, rng)
    for c, mask in placed:
        labels[mask] = c.cls
    return LabelMap(labels), [c for c, _ in placed]


def render_scene(spec: SceneSpec, materials: dict[MaterialClass, MaterialSpectrum] | None = None,
                 noise: NoiseModel = NoiseModel(), grid: WavelengthGrid = DEFAULT_GRID
                 ) -> tuple[HyperCube, LabelMap, CalibrationFrames]:
    """Raw 224-band scene with its exact label map, plus matching dark/flat frames.

    raw = L * stripe * (drift_gain * ideal + drift_offset) + dark_offset + shot noise

    The flat frame images a Teflon tile at nominal drift, so flat-field
    correction returns ``L * (drift_gain * ideal + drift_offset)``.
    """
    materials = materials or default_materials()
    rng = np.random.default_rng(spec.seed)
    labels = _layout(spec, rng)
    placed = _place(spec, labels, rng)
    for c, mask in placed:
        labels[mask] = c.cls
    h, w = labels.shape
    wl = grid.sensor_wavelengths
    b = len(wl)

    table = np.stack([materials[c].curve(wl) for c in MaterialClass])
    stds = np.array([materials[c].band_std for c in MaterialClass])
    noise_rng = np.random.default_rng([spec.seed, 1])
    ideal = table[labels]
    if stds.any():
        ideal = ideal + noise_rng.normal(size=ideal.shape) * stds[labels][..., None]
    if spec.blend_px:
        ideal = _blend(ideal, labels, spec.blend_weight)
    if spec.shading:
        shade = 1.0 + spec.shading * _smooth_field(noise_rng, h, w, max(h, w) / 6)
        ideal = ideal * shade[..., None]

    stripe = noise.stripe_field(w, b)[None]
    L = noise.illumination
    raw = L * stripe * (noise.drift_gain * ideal + noise.drift_offset) + noise.dark_offset
    if noise.shot_std:
        raw = raw + noise_rng.normal(0.0, noise.shot_std, size=raw.shape)

    ref_rng = np.random.default_rng([noise.camera_seed, 2])
    n_ref = noise.reference_lines
    teflon = materials[M.TEFLON].curve(wl)
    dark = np.full((n_ref, w, b), noise.dark_offset)
    flat = L * stripe * teflon + noise.dark_offset
    flat = np.broadcast_to(flat, (n_ref, w, b))
    if noise.shot_std:
        dark = dark + ref_rng.normal(0.0, noise.shot_std, size=dark.shape)
        flat = flat + ref_rng.normal(0.0, noise.shot_std, size=flat.shape)
    frames = CalibrationFrames(HyperCube(dark.astype(np.float32), grid),
                               HyperCube(np.asarray(flat, dtype=np.float32), grid)).line_average()
    return HyperCube(raw.astype(np.float32), grid), LabelMap(labels), frames


# ---------------------------------------------------------------- datasets

def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def random_contaminants(rng: np.random.Generator, count: int, min_solid: int = 5,
                        max_solid: int = 12, fine_fraction: float = 0.25) -> tuple[Contaminant, ...]:
    out = []
    for _ in range(count):
        cls = CONTAMINANT_CLASSES[int(rng.integers(len(CONTAMINANT_CLASSES)))]
        if rng.random() < fine_fraction:
            shape = "line" if rng.random() < 0.6 else "spiral"
            size = int(rng.integers(8, 16))
            out.append(Contaminant(cls, shape, size, thickness=int(rng.integers(1, 3)),
                                   angle=float(rng.uniform(0, math.pi))))
        else:
            shape = "rectangle" if rng.random() < 0.5 else "ellipse"
            out.append(Contaminant(cls, shape, int(rng.integers(min_solid, max_solid + 1))))
    return tuple(out)


@dataclass(frozen=True)
class DatasetSpec:
    n_scenes: int = 10
    height: int = 160
    width: int = 128
    contaminant_fraction: float = 0.7
    contaminants_per_scene: tuple[int, int] = (2, 5)
    drift_gain: tuple[float, float] = (0.8, 1.2)
    drift_offset: tuple[float, float] = (-0.02, 0.02)
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.n_scenes <= 0:
            raise ValueError("n_scenes must be positive")
        if not 0.0 <= self.contaminant_fraction <= 1.0:
            raise ValueError("contaminant_fraction must lie in [0, 1]")
        if self.drift_gain[0] > self.drift_gain[1] or self.drift_gain[0] <= 0:
            raise ValueError("drift gain range must be positive and ordered")


MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("scene_id", "orientation", "drift_gain", "drift_offset", "contaminants")


def scene_plan(ds: DatasetSpec, index: int) -> tuple[SceneSpec, NoiseModel]:
    seed = scene_seed(ds.seed, index)
    rng = np.random.default_rng([seed, 7])
    orientation = "fat_up" if index % 2 == 0 else "meat_up"
    n_contaminated = int(round(ds.contaminant_fraction * ds.n_scenes))
    contaminated = (index * n_contaminated) // ds.n_scenes != ((index + 1) * n_contaminated) // ds.n_scenes
    lo, hi = ds.contaminants_per_scene
    conts = random_contaminants(rng, int(rng.integers(lo, hi + 1))) if contaminated else ()
    gain = float(rng.uniform(*ds.drift_gain))
    offset = float(rng.uniform(*ds.drift_offset))
    spec = SceneSpec(ds.height, ds.width, orientation, contaminants=conts, seed=seed)
    return spec, replace(ds.noise, drift_gain=gain, drift_offset=offset)


def write_frames(frames: CalibrationFrames, out: Path) -> None:
    save_cube(frames.dark, out / "dark.hdr")
    save_cube(frames.flat, out / "flat.hdr")


def render_dataset(out: str | Path, ds: DatasetSpec,
                   materials: dict[MaterialClass, MaterialSpectrum] | None = None,
                   drift_override: tuple[float, float] | None = None) -> Path:
    """Write ``n_scenes`` raw cubes, label maps, shared dark/flat frames and a manifest.

    ``drift_override`` forces one (gain, offset) pair on every scene, keeping
    everything else identical; used for drift sweeps.
    """
    out = Path(out)
    try:
        (out / "scenes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    materials = materials or default_materials(ds.seed)
    rows = []
    frames = None
    for i in range(ds.n_scenes):
        spec, noise = scene_plan(ds, i)
        if drift_override is not None:
            noise = replace(noise, drift_gain=drift_override[0], drift_offset=drift_override[1])
        cube, labels, frames_i = render_scene(spec, materials, noise)
        frames = frames or frames_i
        sid = f"scene_{i:04d}"
        save_cube(cube, out / "scenes" / f"{sid}.hdr")
        save_labels(labels, out / "scenes" / f"{sid}_labels.hdr")
        present = sorted({c.cls.label for c in spec.contaminants})
        rows.append({
            "scene_id": sid,
            "orientation": spec.orientation,
            "drift_gain": f"{noise.drift_gain:.6f}",
            "drift_offset": f"{noise.drift_offset:.6f}",
            "contaminants": ";".join(present),
        })
    write_frames(frames, out)
    with open(out / MANIFEST, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return out


def read_manifest(root: str | Path) -> list[dict[str, str]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
