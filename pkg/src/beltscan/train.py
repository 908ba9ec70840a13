"""Training objective and optimizer, plus the patch-based training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .calibration import CalibrationFrames, apply_ffc, compute_gain, normalize_spectra
from .hypercube import (
    CONTAMINANT_CLASSES,
    N_CLASSES,
    HyperCube,
    LabelMap,
    MaterialClass,
    PatchSpec,
    TRAIN_PATCHES,
    extract_patch,
    load_cube,
    load_labels,
    select_bands,
    tile_origins,
)

log = logging.getLogger(__name__)


def default_class_weights() -> tuple[float, ...]:
    w = [1.0] * N_CLASSES
    w[MaterialClass.MEAT] = 2.0
    w[MaterialClass.FAT] = 2.0
    w[MaterialClass.CONVEYOR] = 0.5
    return tuple(w)


@dataclass(frozen=True)
class LossConfig:
    smoothing: float = 0.3
    class_weights: tuple[float, ...] = field(default_factory=default_class_weights)
    fp_penalty: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) <= 0:
            raise ValueError(f"need {N_CLASSES} positive class weights")
        if self.fp_penalty < 0:
            raise ValueError("fp_penalty must be non-negative")


_CONTAM = np.array([c.is_contaminant for c in MaterialClass])
_PORK = np.array([c in (MaterialClass.MEAT, MaterialClass.FAT) for c in MaterialClass])


def loss(logits: np.ndarray, targets: np.ndarray, cfg: LossConfig = LossConfig()
         ) -> tuple[float, np.ndarray]:
    """Weighted label-smoothed cross-entropy plus a contaminant-mass penalty on pork tokens.

    Per token with true class y::

        w(y) * CE(smoothed target, softmax) + beta * [y in {meat, fat}] * sum_{c contaminant} p_c

    averaged over tokens.  Returns the scalar and d(loss)/d(logits).
    """
    z = np.asarray(logits)
    y = np.asarray(targets).reshape(-1)
    k = z.shape[-1]
    z2 = z.reshape(-1, k).astype(np.float64)
    if z2.shape[0] != y.shape[0]:
        raise ValueError(f"{z2.shape[0]} logit rows but {y.shape[0]} targets")
    if not np.isfinite(z2).all():
        raise FloatingPointError("non-finite logits")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError("target outside the class range")
    n = z2.shape[0]
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    eps = cfg.smoothing
    t = np.full_like(p, eps / k)
    t[np.arange(n), y] += 1.0 - eps
    w = np.asarray(cfg.class_weights, dtype=np.float64)[y]
    ce = -(t * logp).sum(axis=1)
    pork = _PORK[y].astype(np.float64)
    contam = _CONTAM[:k]
    pk = p[:, contam].sum(axis=1)
    total = float((w * ce + cfg.fp_penalty * pork * pk).sum() / n)
    # d CE / dz = p - t (targets sum to 1); d pk / dz_j = p_j ([j contaminant] - pk)
    grad = w[:, None] * (p - t)
    grad += (cfg.fp_penalty * pork)[:, None] * p * (contam[None, :] - pk[:, None])
    grad /= n
    return total, grad.reshape(z.shape).astype(z.dtype, copy=False)


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 2e-4
    warmup_epochs: int = 3
    poly_power: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalize: bool = True
    val_fraction: float = 0.1
    patches_per_epoch: int | None = None    # None: every tile of every training scene
    val_patches: int | None = None          # None: full validation scenes
    overlap: float = 0.5
    contaminant_share: float | None = None  # fraction of each epoch drawn from contaminant-bearing tiles

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup must be shorter than training")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.contaminant_share is not None and not 0.0 <= self.contaminant_share <= 1.0:
            raise ValueError("contaminant_share must lie in [0, 1]")


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for optimizer step ``step`` (1-based; step 0 is the origin).

    Linear warm-up to ``cfg.lr`` over ``warmup_epochs`` epochs, then
    polynomial decay reaching zero at the final step.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step <= warm and warm > 0:
        return cfg.lr * step / warm
    if step >= total:
        return 0.0
    frac = (step - warm) / (total - warm)
    return cfg.lr * (1.0 - frac) ** cfg.poly_power


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float, cfg: TrainConfig) -> None:
    """In-place AdamW update with decoupled decay; norm scales and biases are not decayed.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient is
    NaN or infinite.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"{name}: gradient shape {grads[name].shape} != {p.shape}")
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and nn.is_decayed(name):
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype)


# ---------------------------------------------------------------- data

@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    cube: HyperCube         # preprocessed
    labels: LabelMap


def preprocess(cube: HyperCube, frames: CalibrationFrames | None, normalize: bool,
               gain=None) -> tuple[HyperCube, HyperCube]:
    """(model input, flat-field corrected cube) from a raw or band-selected cube."""
    if cube.bands == cube.grid.sensor_bands:
        cube = select_bands(cube)
    if "ffc" not in cube.stages:
        if frames is None:
            raise ValueError("raw cube needs dark/flat frames for flat-field correction")
        if frames.shape[2] == frames.dark.grid.sensor_bands:
            frames = frames.select_bands()
        cube = apply_ffc(cube, frames, gain if gain is not None else compute_gain(frames))
    ffc = cube
    if normalize and "normalize" not in cube.stages:
        cube = normalize_spectra(cube)
    return cube, ffc


def load_frames(root: Path) -> CalibrationFrames | None:
    if (root / "dark.hdr").exists() and (root / "flat.hdr").exists():
        frames = CalibrationFrames(load_cube(root / "dark.hdr"), load_cube(root / "flat.hdr"))
        if frames.shape[2] == frames.dark.grid.sensor_bands:
            frames = frames.select_bands()
        return frames
    return None


def scene_ids(root: str | Path) -> list[str]:
    from .synthscene import read_manifest
    return [row["scene_id"] for row in read_manifest(root)]


def load_dataset(root: str | Path, normalize: bool) -> list[Scene]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    ids = scene_ids(root)
    if not ids:
        raise ValueError(f"dataset {root} is empty")
    frames = load_frames(root)
    gain = compute_gain(frames) if frames is not None else None
    scenes = []
    for sid in ids:
        cube = load_cube(root / "scenes" / f"{sid}.hdr")
        labels = load_labels(root / "scenes" / f"{sid}_labels.hdr")
        if labels.shape != cube.shape[:2]:
            raise ValueError(f"{sid}: label map {labels.shape} does not match cube {cube.shape[:2]}")
        x, _ = preprocess(cube, frames, normalize, gain)
        scenes.append(Scene(sid, x, labels))
    return scenes


def split_scenes(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if n < 2 or val_fraction <= 0:
        return list(range(n)), []
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    order = np.random.default_rng([seed, 11]).permutation(n)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def patch_index(scenes: Sequence[Scene], spec: PatchSpec) -> list[tuple[int, tuple[int, int]]]:
    index = []
    for i, s in enumerate(scenes):
        index += [(i, o) for o in tile_origins(s.cube.height, s.cube.width, spec)]
    return index


def epoch_order(pool_size: int, per_epoch: int, rng: np.random.Generator,
                positives: np.ndarray | None = None, share: float | None = None) -> np.ndarray:
    """Indices of the tiles visited in one epoch.

    Plain mode takes the first ``per_epoch`` entries of a permutation.  With
    ``share`` set, that fraction of the budget is drawn from the tiles flagged
    in ``positives`` and the rest from the others, then the two are shuffled
    together.
    """
    if share is None or positives is None:
        return rng.permutation(pool_size)[:per_epoch]
    pos = np.flatnonzero(positives)
    neg = np.flatnonzero(~positives)
    n_pos = min(len(pos), int(round(share * per_epoch)))
    n_neg = min(len(neg), per_epoch - n_pos)
    n_pos = min(len(pos), per_epoch - n_neg)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return pick[rng.permutation(len(pick))]


def gather(scenes: Sequence[Scene], items, spec: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([extract_patch(scenes[i].cube.data, o, spec) for i, o in items])
    y = np.stack([scenes[i].labels.labels[o[0]:o[0] + spec.patch_h, o[1]:o[1] + spec.patch_w].reshape(-1)
                  for i, o in items])
    return x, y


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: nn.Model
    history: list[dict]
    best_epoch: int
    best_miou: float
    val_miou_full: float = float("nan")     # best weights on every tile of the validation scenes


def train_step(model: nn.Model, state: OptimState, x: np.ndarray, y: np.ndarray, lr: float,
               tcfg: TrainConfig, lcfg: LossConfig) -> float:
    logits, cache = nn.forward(x, model.params, model.config, cache=True)
    value, dlogits = loss(logits, y, lcfg)
    grads = nn.backward(dlogits, cache, model.params, model.config)
    del cache
    grads.pop("input")
    adamw_step(model.params, grads, state, lr, tcfg)
    return value


def overfit(model: nn.Model, x: np.ndarray, y: np.ndarray, steps: int = 200,
            tcfg: TrainConfig | None = None, lcfg: LossConfig = LossConfig(smoothing=0.0)) -> list[float]:
    """Train repeatedly on one fixed batch; the loss trajectory is a sanity check of the whole stack.

    One "epoch" is one step here, so ``tcfg.epochs`` must equal ``steps``.
    """
    tcfg = tcfg or TrainConfig(epochs=steps, warmup_epochs=10, weight_decay=0.0, lr=1e-4)
    if tcfg.epochs != steps:
        raise ValueError("overfit schedules one step per epoch")
    state = OptimState.zeros_like(model.params)
    return [train_step(model, state, x, y, lr_at(s, 1, tcfg), tcfg, lcfg) for s in range(1, steps + 1)]


def evaluate_scenes(model: nn.Model, scenes: Sequence[Scene], spec: PatchSpec,
                    max_patches: int | None = None, seed: int = 0) -> float:
    """Pixel mIoU over non-overlapping tiles of ``scenes`` (optionally a fixed random subset)."""
    from .eval import confusion_from_arrays, miou
    tiles = patch_index(scenes, replace(spec, overlap_fraction=0.0))
    if max_patches is not None and len(tiles) > max_patches:
        pick = np.random.default_rng([seed, 13]).choice(len(tiles), max_patches, replace=False)
        tiles = [tiles[i] for i in sorted(pick)]
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for start in range(0, len(tiles), 64):
        x, y = gather(scenes, tiles[start:start + 64], spec)
        pred = model.forward(x).argmax(axis=-1)
        cm += confusion_from_arrays(pred, y)
    return miou(cm)


def train(scenes: Sequence[Scene], patch: PatchSpec = TRAIN_PATCHES,
          mcfg: nn.ModelConfig | None = None, tcfg: TrainConfig = TrainConfig(),
          lcfg: LossConfig = LossConfig(), out_dir: str | Path | None = None) -> TrainResult:
    """Train on preprocessed scenes; keeps the best-validation-mIoU weights.

    With ``out_dir`` the best checkpoint goes to ``model.ckpt`` and the
    per-epoch log to ``metrics.csv`` (epoch, loss, val_miou, lr).
    """
    if not scenes:
        raise ValueError("empty dataset")
    bands = scenes[0].cube.bands
    normalized = "normalize" in scenes[0].cube.stages
    for s in scenes:
        if s.labels.shape != s.cube.shape[:2]:
            raise ValueError(f"{s.scene_id}: label/cube dimension mismatch")
        if ("normalize" in s.cube.stages) != normalized or s.cube.bands != bands:
            raise ValueError(f"{s.scene_id}: inconsistent preprocessing across the dataset")
    mcfg = mcfg or nn.ModelConfig()
    mcfg = replace(mcfg, tokens=patch.tokens, dim=bands, normalized_input=normalized)
    train_idx, val_idx = split_scenes(len(scenes), tcfg.val_fraction, tcfg.seed)
    tr = [scenes[i] for i in train_idx]
    va = [scenes[i] for i in val_idx]
    spec = replace(patch, overlap_fraction=tcfg.overlap)
    pool = patch_index(tr, spec)
    per_epoch = len(pool) if tcfg.patches_per_epoch is None else min(tcfg.patches_per_epoch, len(pool))
    steps_per_epoch = math.ceil(per_epoch / tcfg.batch)
    log.info("training on %d scenes (%d tiles, %d per epoch, %d steps/epoch), validating on %d",
             len(tr), len(pool), per_epoch, steps_per_epoch, len(va))

    positives = None
    if tcfg.contaminant_share is not None:
        positives = np.array([(tr[i].labels.labels[r:r + spec.patch_h, c:c + spec.patch_w]
                               >= MaterialClass.PA_PP).any() for i, (r, c) in pool])
        log.info("%d of %d tiles contain contaminants; drawing %.0f%% of each epoch from them",
                 int(positives.sum()), len(pool), 100 * tcfg.contaminant_share)

    model = nn.Model(mcfg, seed=tcfg.seed)
    state = OptimState.zeros_like(model.params)
    rng = np.random.default_rng([tcfg.seed, 3])
    history = []
    best = (-1.0, 0, None)
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = epoch_order(len(pool), per_epoch, rng, positives, tcfg.contaminant_share)
        losses = []
        lr = 0.0
        for s in range(steps_per_epoch):
            items = [pool[j] for j in order[s * tcfg.batch:(s + 1) * tcfg.batch]]
            x, y = gather(tr, items, spec)
            lr = lr_at(state.step + 1, steps_per_epoch, tcfg)
            try:
                losses.append(train_step(model, state, x, y, lr, tcfg, lcfg))
            except NonFiniteGradient as exc:
                log.warning("epoch %d step %d skipped: %s", epoch, s, exc)
        val = evaluate_scenes(model, va, spec, tcfg.val_patches, tcfg.seed) if va else float("nan")
        row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
               "val_miou": val, "lr": lr}
        history.append(row)
        log.info("epoch %2d  loss %.4f  val mIoU %.4f  lr %.2e  (%.1fs)",
                 epoch, row["loss"], val, lr, time.perf_counter() - t0)
        score = val if va else -row["loss"]
        if best[2] is None or score >= best[0]:      # ties keep the later, further-decayed weights
            best = (score, epoch, {k: v.copy() for k, v in model.params.items()})
    model = nn.Model(mcfg, best[2])
    full = evaluate_scenes(model, va, spec) if va else float("nan")
    if va:
        log.info("best epoch %d: validation mIoU %.4f on all %d validation scenes", best[1], full, len(va))
    result = TrainResult(model, history, best[1], best[0] if va else float("nan"), full)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "model.ckpt")
        write_history(history, out / "metrics.csv")
        with open(out / "validation.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["metric", "value"], ["best_epoch", result.best_epoch],
                                      ["val_miou_subset", f"{result.best_miou:.8f}"],
                                      ["val_miou", f"{full:.8f}"]])
    return result


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "val_miou", "lr"])
        for r in history:
            w.writerow([r["epoch"], f"{r['loss']:.8f}", f"{r['val_miou']:.8f}", f"{r['lr']:.8e}"])


def train_dataset(root: str | Path, patch: PatchSpec = TRAIN_PATCHES, mcfg: nn.ModelConfig | None = None,
                  tcfg: TrainConfig = TrainConfig(), lcfg: LossConfig = LossConfig(),
                  out_dir: str | Path | None = None) -> TrainResult:
    return train(load_dataset(root, tcfg.normalize), patch, mcfg, tcfg, lcfg, out_dir)
