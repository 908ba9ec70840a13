"""False-positive suppression: spectral reclassification rules, 3x3 erosion, blob cleanup."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .hypercube import (
    CONTAMINANT_CLASSES,
    DEFAULT_GRID,
    NEGATIVE_CLASSES,
    HyperCube,
    LabelMap,
    MaterialClass,
    WavelengthGrid,
    wavelength_to_band,
)
from .segment import SegmentationResult

RULE_WAVELENGTHS = (1225.5, 1211.5, 1026.0, 1012.0, 1411.0, 1407.5, 1117.0, 1099.5, 1215.0, 1232.5)
PEHD_FAT_RATIO_LIMIT = 1.04


class _Bands:
    """Band accessor: ``I(1225.5)`` -> intensity array at that wavelength."""

    def __init__(self, spectra: np.ndarray, grid: WavelengthGrid):
        self.spectra = spectra
        self.grid = grid

    def __call__(self, nm: float) -> np.ndarray:
        return self.spectra[..., wavelength_to_band(nm, self.grid)].astype(np.float64)


def fat_predicate(spectra: np.ndarray, grid: WavelengthGrid = DEFAULT_GRID) -> np.ndarray:
    """PEHD -> fat test: rise across 1211.5-1225.5 beats the 1012-1026 rise and the 1411/1407.5 ratio stays below 1.04."""
    I = _Bands(spectra, grid)
    rise = I(1225.5) - I(1211.5) > I(1026) - I(1012)
    den = I(1407.5)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0, I(1411) / np.where(den > 0, den, 1.0), np.inf)
    return rise & (den > 0) & (ratio < PEHD_FAT_RATIO_LIMIT)


def conveyor_predicate(spectra: np.ndarray, grid: WavelengthGrid = DEFAULT_GRID) -> np.ndarray:
    I = _Bands(spectra, grid)
    return I(1117) > I(1099.5)


def meat_predicate(spectra: np.ndarray, grid: WavelengthGrid = DEFAULT_GRID) -> np.ndarray:
    I = _Bands(spectra, grid)
    return I(1225.5) - I(1215) < I(1232.5) - I(1012)


@dataclass(frozen=True)
class SpectralRule:
    name: str
    trigger: MaterialClass
    predicate: Callable[[np.ndarray, WavelengthGrid], np.ndarray]
    reassign: MaterialClass

    def __post_init__(self):
        if self.reassign.is_contaminant:
            raise ValueError("rules may only reassign to a negative class")


RULES = (
    SpectralRule("pehd_to_fat", MaterialClass.PEHD, fat_predicate, MaterialClass.FAT),
    SpectralRule("pehd_to_conveyor", MaterialClass.PEHD, conveyor_predicate, MaterialClass.CONVEYOR),
    SpectralRule("papp_to_meat", MaterialClass.PA_PP, meat_predicate, MaterialClass.MEAT),
)


def apply_rules(result: SegmentationResult, cube_ffc: HyperCube,
                rules: Sequence[SpectralRule] = RULES) -> SegmentationResult:
    """Reassign PEHD / PA-PP pixels whose spectra fail the rule tests.

    ``cube_ffc`` must be flat-field corrected but not normalized: the ratio
    clause is not invariant to the min-subtraction.  Rules are tried in order
    and the first match wins.
    """
    if "normalize" in cube_ffc.stages:
        raise ValueError("spectral rules expect the flat-field corrected cube before normalization")
    if cube_ffc.shape[:2] != result.labels.shape:
        raise ValueError(f"cube {cube_ffc.shape[:2]} and labels {result.labels.shape} differ in size")
    for nm in RULE_WAVELENGTHS:
        wavelength_to_band(nm, cube_ffc.grid)
    old = result.labels.labels
    new = old.copy()
    decided = np.zeros(old.shape, dtype=bool)
    for rule in rules:
        sel = (old == rule.trigger) & ~decided
        if not sel.any():
            continue
        hit = np.zeros(old.shape, dtype=bool)
        hit[sel] = rule.predicate(cube_ffc.data[sel], cube_ffc.grid)
        new[hit] = rule.reassign
        decided |= hit
    return result.relabel(new)


# ---------------------------------------------------------------- morphology

SQUARE_3X3 = np.ones((3, 3), dtype=bool)
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class MorphologyConfig:
    fallback: str = "best-negative-logit"   # or "fat"

    def __post_init__(self):
        if self.fallback not in ("best-negative-logit", "fat"):
            raise ValueError(f"unknown erosion fallback {self.fallback!r}")

    @property
    def structure(self) -> np.ndarray:
        return SQUARE_3X3


@dataclass(frozen=True, eq=False)
class Blob:
    cls: MaterialClass
    pixels: np.ndarray          # (n, 2) row, col
    survived_erosion: bool = True

    @property
    def area(self) -> int:
        return len(self.pixels)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(row_min, col_min, row_max, col_max), inclusive."""
        r, c = self.pixels[:, 0], self.pixels[:, 1]
        return int(r.min()), int(c.min()), int(r.max()), int(c.max())


def find_blobs(labels: np.ndarray, survived: bool = True) -> list[Blob]:
    """8-connected components of same-class contaminant pixels, ordered by class then scan order."""
    blobs = []
    for cls in CONTAMINANT_CLASSES:
        mask = labels == cls
        if not mask.any():
            continue
        comp, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        rows, cols = np.nonzero(comp)
        ids = comp[rows, cols]
        order = np.argsort(ids, kind="stable")
        splits = np.cumsum(np.bincount(ids, minlength=n + 1)[1:])[:-1]
        for pix in np.split(np.stack([rows[order], cols[order]], axis=1), splits):
            blobs.append(Blob(cls, pix, survived))
    return blobs


def erode_and_reclassify(result: SegmentationResult, cfg: MorphologyConfig = MorphologyConfig()
                         ) -> tuple[SegmentationResult, list[Blob]]:
    labels = result.labels.labels
    mask = labels >= MaterialClass.PA_PP
    kept = ndimage.binary_erosion(mask, structure=cfg.structure, border_value=0)
    new = labels.copy()
    removed = mask & ~kept
    if removed.any():
        if cfg.fallback == "fat" or result.logits is None:
            new[removed] = MaterialClass.FAT
        else:
            neg = np.array([int(c) for c in NEGATIVE_CLASSES])
            best = neg[np.argmax(result.logits[removed][:, neg], axis=1)]
            new[removed] = best
    # blobs with no surviving core go wholly to fat
    for blob in find_blobs(labels):
        r, c = blob.pixels[:, 0], blob.pixels[:, 1]
        if not kept[r, c].any():
            new[r, c] = MaterialClass.FAT
    out = result.relabel(new)
    return out, find_blobs(new)


# ---------------------------------------------------------------- orchestration

STAGE_ORDERS = {
    "rules,erosion": ("rules", "erosion"),
    "erosion": ("erosion",),
    "rules": ("rules",),
    "none": (),
}


@dataclass
class ContaminantReport:
    blobs: list[Blob]
    class_pixels: dict[MaterialClass, int]
    stage_counts: list[tuple[str, MaterialClass, int, int]] = field(default_factory=list)

    def stage_total(self, stage: str) -> tuple[int, int]:
        rows = [r for r in self.stage_counts if r[0] == stage]
        return sum(r[2] for r in rows), sum(r[3] for r in rows)

    @property
    def stages(self) -> list[str]:
        seen: list[str] = []
        for s, *_ in self.stage_counts:
            if s not in seen:
                seen.append(s)
        return seen

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "class", "blobs", "pixels"])
            for stage, cls, nb, npx in self.stage_counts:
                w.writerow([stage, cls.label, nb, npx])


def _tally(stage: str, labels: np.ndarray) -> list[tuple[str, MaterialClass, int, int]]:
    blobs = find_blobs(labels)
    rows = []
    for cls in CONTAMINANT_CLASSES:
        nb = sum(1 for b in blobs if b.cls == cls)
        rows.append((stage, cls, nb, int((labels == cls).sum())))
    return rows


def parse_order(order: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(order, str):
        key = order.replace(" ", "").replace("->", ",").lower()
        if key in STAGE_ORDERS:
            return STAGE_ORDERS[key]
        order = [s for s in key.split(",") if s]
    stages = tuple(order)
    if stages not in STAGE_ORDERS.values():
        raise ValueError(f"unsupported post-processing order {order!r}")
    return stages


def run_postprocess(result: SegmentationResult, cube_ffc: HyperCube | None,
                    order: str | Sequence[str] = "rules,erosion",
                    morphology: MorphologyConfig = MorphologyConfig()
                    ) -> tuple[SegmentationResult, ContaminantReport]:
    stages = parse_order(order)
    counts = _tally("model", result.labels.labels)
    blobs = find_blobs(result.labels.labels)
    for stage in stages:
        if stage == "rules":
            if cube_ffc is None:
                raise ValueError("the rules stage needs the flat-field corrected cube")
            result = apply_rules(result, cube_ffc)
            blobs = find_blobs(result.labels.labels)
        else:
            result, blobs = erode_and_reclassify(result, morphology)
        counts += _tally(stage, result.labels.labels)
    labels = result.labels.labels
    totals = {cls: int((labels == cls).sum()) for cls in CONTAMINANT_CLASSES}
    return result, ContaminantReport(blobs, totals, counts)
