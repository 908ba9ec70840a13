"""Confusion matrix, mIoU, blob-level TP/FP accounting and CSV/SVG emitters."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy import ndimage

from .hypercube import CLASS_NAMES, N_CLASSES, HyperCube, LabelMap
from .postprocess import EIGHT_CONNECTED, SQUARE_3X3, Blob, ContaminantReport, find_blobs


def confusion_from_arrays(pred: np.ndarray, gt: np.ndarray, k: int = N_CLASSES) -> np.ndarray:
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    g = np.asarray(gt).reshape(-1).astype(np.int64)
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def confusion(pred: LabelMap, gt: LabelMap) -> np.ndarray:
    """Entry (g, p) counts pixels of ground-truth class g predicted as p."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    return confusion_from_arrays(pred.labels, gt.labels)


def class_iou(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    return np.divide(tp, union, out=np.full_like(tp, np.nan), where=union > 0)


def miou(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    if cm.size == 0 or cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    return float(np.nanmean(class_iou(cm)))


# ---------------------------------------------------------------- blob accounting

@dataclass
class BlobTally:
    tp_blobs: int = 0
    fp_blobs: int = 0
    tp_pixels: int = 0
    fp_pixels: int = 0
    fp_images: int = 0
    images: int = 0
    gt_blobs: int = 0           # ground-truth contaminant blobs eligible for recall
    gt_detected: int = 0

    def __add__(self, other: "BlobTally") -> "BlobTally":
        return BlobTally(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[int, ...]:
        return (self.tp_blobs, self.fp_blobs, self.tp_pixels, self.fp_pixels,
                self.fp_images, self.images, self.gt_blobs, self.gt_detected)

    @property
    def recall(self) -> float:
        return self.gt_detected / self.gt_blobs if self.gt_blobs else float("nan")


def blob_match(report: ContaminantReport | Sequence[Blob], gt: LabelMap,
               min_core: int = 3) -> BlobTally:
    """TP/FP tallies for predicted contaminant blobs against ground truth.

    A predicted blob is a TP when any of its pixels lies on a ground-truth
    contaminant of any class, else an FP.  Recall counts ground-truth blobs
    (8-connected contaminant regions) that contain a ``min_core`` square and
    are touched by some predicted blob.
    """
    blobs = report.blobs if isinstance(report, ContaminantReport) else list(report)
    gmask = gt.contaminant_mask()
    t = BlobTally(images=1)
    pred_mask = np.zeros(gt.shape, dtype=bool)
    for b in blobs:
        r, c = b.pixels[:, 0], b.pixels[:, 1]
        if r.max(initial=-1) >= gt.height or c.max(initial=-1) >= gt.width:
            raise ValueError("blob lies outside the ground-truth raster")
        pred_mask[r, c] = True
        hit = gmask[r, c]
        if hit.any():
            t.tp_blobs += 1
        else:
            t.fp_blobs += 1
        t.tp_pixels += int(hit.sum())
        t.fp_pixels += int((~hit).sum())
    t.fp_images = int(t.fp_blobs > 0)
    comp, n = ndimage.label(gmask, structure=EIGHT_CONNECTED)
    if n:
        core = ndimage.binary_erosion(gmask, structure=np.ones((min_core, min_core), bool), border_value=0)
        eligible = np.unique(comp[core])
        eligible = eligible[eligible > 0]
        detected = np.unique(comp[pred_mask & gmask])
        t.gt_blobs = len(eligible)
        t.gt_detected = int(np.isin(eligible, detected).sum())
    return t


@dataclass
class EvalMetrics:
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), np.int64))
    tally: BlobTally = field(default_factory=BlobTally)
    fps: float = float("nan")

    @property
    def iou(self) -> np.ndarray:
        return class_iou(self.confusion)

    @property
    def miou(self) -> float:
        return miou(self.confusion) if self.confusion.sum() else float("nan")

    def add(self, pred: LabelMap, gt: LabelMap, report: ContaminantReport | Sequence[Blob] | None = None) -> BlobTally:
        self.confusion = self.confusion + confusion(pred, gt)
        tally = blob_match(report if report is not None else find_blobs(pred.labels), gt)
        self.tally = self.tally + tally
        return tally

    def rows(self) -> list[tuple[str, str]]:
        t = self.tally
        out = [
            ("miou", _fmt(self.miou)),
            ("tp_blobs", str(t.tp_blobs)), ("fp_blobs", str(t.fp_blobs)),
            ("tp_pixels", str(t.tp_pixels)), ("fp_pixels", str(t.fp_pixels)),
            ("fp_images", str(t.fp_images)), ("images", str(t.images)),
            ("gt_blobs", str(t.gt_blobs)), ("gt_detected", str(t.gt_detected)),
            ("recall", _fmt(t.recall)), ("fps", _fmt(self.fps)),
        ]
        out += [(f"iou.{name}", _fmt(v)) for name, v in zip(CLASS_NAMES, self.iou)]
        for g in range(N_CLASSES):
            for p in range(N_CLASSES):
                out.append((f"confusion.{CLASS_NAMES[g]}.{CLASS_NAMES[p]}", str(int(self.confusion[g, p]))))
        return out


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def emit_report(metrics: EvalMetrics, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(metrics.rows())
    return path


def read_report(path: str | Path) -> EvalMetrics:
    with open(path, newline="") as fh:
        rows = dict(list(csv.reader(fh))[1:])
    cm = np.zeros((N_CLASSES, N_CLASSES), np.int64)
    for g, gn in enumerate(CLASS_NAMES):
        for p, pn in enumerate(CLASS_NAMES):
            cm[g, p] = int(rows[f"confusion.{gn}.{pn}"])
    tally = BlobTally(*(int(rows[k]) for k in ("tp_blobs", "fp_blobs", "tp_pixels", "fp_pixels",
                                               "fp_images", "images", "gt_blobs", "gt_detected")))
    return EvalMetrics(cm, tally, float(rows["fps"]))


# ---------------------------------------------------------------- spectra plots

def emit_spectra(cube: HyperCube, pixels: Iterable[tuple[int, int]], path: str | Path,
                 svg_path: str | Path | None = None) -> tuple[Path, Path]:
    """Write the spectra at ``(x, y)`` pixels as CSV plus an SVG line plot.

    ``x`` is the sample (column) and ``y`` the line (row).  The SVG defaults
    to the CSV path with a ``.svg`` suffix.
    """
    pixels = [(int(x), int(y)) for x, y in pixels]
    for x, y in pixels:
        if not (0 <= x < cube.width and 0 <= y < cube.height):
            raise ValueError(f"pixel ({x}, {y}) outside the {cube.width}x{cube.height} cube")
    path = Path(path)
    svg_path = Path(svg_path) if svg_path else path.with_suffix(".svg")
    path.parent.mkdir(parents=True, exist_ok=True)
    wl = cube.wavelengths
    spectra = np.stack([cube.data[y, x] for x, y in pixels], axis=1) if pixels else np.zeros((len(wl), 0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm"] + [f"x{x}_y{y}" for x, y in pixels])
        for i, lam in enumerate(wl):
            w.writerow([f"{lam:g}"] + [repr(float(v)) for v in spectra[i]])
    svg_path.write_text(_svg_plot(wl, spectra, [f"({x}, {y})" for x, y in pixels]))
    return path, svg_path


_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _svg_plot(wl: np.ndarray, spectra: np.ndarray, names: Sequence[str],
              width: int = 640, height: int = 360, pad: int = 48) -> str:
    lo = float(spectra.min()) if spectra.size else 0.0
    hi = float(spectra.max()) if spectra.size else 1.0
    if hi <= lo:
        hi = lo + 1.0
    sx = (width - 2 * pad) / (wl[-1] - wl[0])
    sy = (height - 2 * pad) / (hi - lo)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">wavelength (nm)</text>',
             f'<text x="{pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{wl[0]:g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{wl[-1]:g}</text>']
    for j, name in enumerate(names):
        pts = " ".join(f"{pad + (lam - wl[0]) * sx:.1f},{height - pad - (v - lo) * sy:.1f}"
                       for lam, v in zip(wl, spectra[:, j]))
        colour = _COLOURS[j % len(_COLOURS)]
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}">'
                     f'<title>{escape(name)}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
