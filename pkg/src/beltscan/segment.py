"""Full-image inference: classify every pixel patch by patch and stitch the label and confidence maps."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .hypercube import HyperCube, LabelMap, PatchSpec, extract_patch, tile_origins


class PreprocessingMismatch(ValueError):
    """Cube preprocessing differs from what the checkpoint was trained on."""


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    labels: LabelMap
    confidence: np.ndarray                # max softmax probability per pixel
    logits: np.ndarray | None = None      # H x W x classes

    def relabel(self, labels: np.ndarray) -> "SegmentationResult":
        return replace(self, labels=LabelMap(labels))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def check_preprocessing(cube: HyperCube, normalized: bool) -> None:
    if "ffc" not in cube.stages:
        raise PreprocessingMismatch("cube has not been flat-field corrected")
    has_norm = "normalize" in cube.stages
    if has_norm != normalized:
        want = "normalized" if normalized else "unnormalized"
        got = "normalized" if has_norm else "unnormalized"
        raise PreprocessingMismatch(f"checkpoint expects {want} spectra but the cube is {got}")


MODES = {"tile": 0.0, "overlap": 0.5}


def predict_cube(cube: HyperCube, model, patch: PatchSpec = PatchSpec(), mode: str = "tile",
                 batch: int = 64, keep_logits: bool = True, stats: dict | None = None
                 ) -> SegmentationResult:
    """Classify every pixel of a preprocessed cube.

    ``model`` is a :class:`beltscan.nn.Model`.  In ``overlap`` mode logits
    from all covering patches are averaged before the argmax.
    """
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    check_preprocessing(cube, model.config.normalized_input)
    spec = replace(patch, overlap_fraction=MODES[mode])
    origins = tile_origins(cube.height, cube.width, spec)
    k = model.config.classes
    acc = np.zeros((cube.height, cube.width, k), dtype=np.float64)
    hits = np.zeros((cube.height, cube.width, 1), dtype=np.float64)
    data = cube.data
    t0 = time.perf_counter()
    for start in range(0, len(origins), batch):
        chunk = origins[start:start + batch]
        tokens = np.stack([extract_patch(data, o, spec) for o in chunk])
        logits = model.forward(tokens)
        for (r, c), z in zip(chunk, logits):
            acc[r:r + spec.patch_h, c:c + spec.patch_w] += z.reshape(spec.patch_h, spec.patch_w, k)
            hits[r:r + spec.patch_h, c:c + spec.patch_w] += 1
    if stats is not None:
        stats["patches"] = len(origins)
        stats["model_seconds"] = time.perf_counter() - t0
    logits = (acc / hits).astype(np.float32)
    labels = np.argmax(logits, axis=-1)
    conf = softmax(logits.astype(np.float64)).max(axis=-1).astype(np.float32)
    return SegmentationResult(LabelMap(labels), conf, logits if keep_logits else None)


def throughput(cubes, model, frames=None, patch: PatchSpec = PatchSpec(), mode: str = "tile",
               runs: int = 10, postprocess: str = "rules,erosion") -> dict:
    """Images per second and mean per-stage seconds over ``runs`` warm passes.

    ``cubes`` are raw (224-band) or band-selected cubes; ``frames`` are the
    matching calibration frames.  Without frames the cubes are taken as
    already preprocessed and the calibrate/normalize stages report zero.
    """
    from .calibration import apply_ffc, compute_gain, normalize_spectra
    from .hypercube import select_bands
    from .postprocess import run_postprocess

    cubes = list(cubes)
    if not cubes:
        raise ValueError("throughput needs at least one cube")
    gain = None
    if frames is not None:
        if frames.shape[2] == frames.dark.grid.sensor_bands:
            frames = frames.select_bands()
        gain = compute_gain(frames)

    def one(cube):
        t = {}
        t0 = time.perf_counter()
        if frames is not None:
            if cube.bands == cube.grid.sensor_bands:
                cube = select_bands(cube)
            ffc = apply_ffc(cube, frames, gain)
        else:
            ffc = cube
        t["calibrate"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        x = normalize_spectra(ffc) if (frames is not None and model.config.normalized_input) else ffc
        t["normalize"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        st = {}
        res = predict_cube(x, model, patch, mode, stats=st)
        t["model"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        rules_cube = ffc if "normalize" not in ffc.stages else None
        order = postprocess if rules_cube is not None else "erosion"
        run_postprocess(res, rules_cube, order)
        t["postprocess"] = time.perf_counter() - t0
        return t, st["patches"]

    one(cubes[0])  # warm-up
    per_cube = []
    patches = 0
    wall0 = time.perf_counter()
    n_images = 0
    for _ in range(runs):
        for cube in cubes:
            t, patches = one(cube)
            per_cube.append(t)
            n_images += 1
    wall = time.perf_counter() - wall0
    stages = {k: float(np.mean([t[k] for t in per_cube])) for k in per_cube[0]}
    return {
        "fps": n_images / wall,
        "images": n_images,
        "patches_per_image": patches,
        "stage_seconds": stages,
        "model_seconds_per_cube": [t["model"] for t in per_cube],
    }
