"""Command-line entry point: ``beltscan <command> [flags]``.

Every command accepts ``--config FILE`` (flat ``section.key = value`` text),
``--seed``, ``--determinism``, ``--threads`` and ``-v/-q``.  Values from the
config file are overridden by flags given on the command line.  Logs go to
stderr; data goes to files only.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

log = logging.getLogger("beltscan")

SEED_ENV = "BELTSCAN_SEED"


# ---------------------------------------------------------------- run configuration

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else kind(text)
    return parse


# key -> (parser, default, help)
OPTIONS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "global.seed": (int, 0, "master seed (default from $BELTSCAN_SEED, else 0)"),
    "global.determinism": (_parse_bool, False, "bit-reproducible mode; implies one thread unless --threads is set"),
    "global.threads": (int, 0, "cap on BLAS worker threads (0: library default)"),
    "global.log_level": (str, "INFO", "logging level"),
    "gen.n": (int, 10, "number of scenes"),
    "gen.height": (int, 160, "scene lines"),
    "gen.width": (int, 128, "scene samples"),
    "gen.contaminant_fraction": (float, 0.7, "fraction of scenes carrying contaminants"),
    "gen.drift_min": (float, 0.8, "lower bound of the sampled drift gain"),
    "gen.drift_max": (float, 1.2, "upper bound of the sampled drift gain"),
    "calibrate.normalize": (_parse_bool, True, "min-max normalize every spectrum after flat-field correction"),
    "model.depth": (int, 4, "transformer blocks"),
    "model.heads": (int, 8, "attention heads"),
    "model.mlp_hidden": (int, 368, "MLP hidden width"),
    "model.positional": (_parse_bool, True, "learnable positional embedding"),
    "train.epochs": (int, 24, "training epochs"),
    "train.batch": (int, 64, "patches per optimizer step"),
    "train.lr": (float, 1e-3, "peak learning rate"),
    "train.weight_decay": (float, 2e-4, "decoupled weight decay"),
    "train.warmup_epochs": (int, 3, "linear warm-up epochs"),
    "train.poly_power": (float, 1.0, "polynomial decay power"),
    "train.val_fraction": (float, 0.1, "fraction of scenes held out for validation"),
    "train.overlap": (float, 0.5, "training patch overlap fraction"),
    "train.patches_per_epoch": (_opt(int), None, "patch budget per epoch (none: every tile)"),
    "train.val_patches": (_opt(int), None, "validation patch budget (none: full validation scenes)"),
    "train.contaminant_share": (_opt(float), None, "fraction of each epoch drawn from contaminant-bearing tiles"),
    "loss.smoothing": (float, 0.3, "label smoothing"),
    "loss.contaminant_weight": (float, 1.0, "cross-entropy weight of the contaminant classes"),
    "loss.fp_penalty": (float, 1.0, "weight of the contaminant-mass penalty on meat/fat pixels"),
    "predict.mode": (str, "tile", "tile or overlap"),
    "predict.postprocess": (str, "rules,erosion", "ordered post-processing stages"),
    "predict.fallback": (str, "best-negative-logit", "label for eroded pixels: best-negative-logit or fat"),
    "bench.runs": (int, 10, "warm passes over the benchmark cubes"),
    "pipeline.train_scenes": (int, 60, "training scenes"),
    "pipeline.test_clean": (int, 20, "clean test scenes"),
    "pipeline.test_contaminated": (int, 20, "contaminated test scenes"),
    "pipeline.drift_settings": (int, 0, "drift settings for the robustness sweep (0: skip)"),
    "pipeline.compare_unnormalized": (_parse_bool, False, "also train and sweep a model without normalization"),
}


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    """Flat ``section.key`` settings; every key has a default."""

    values: dict[str, Any] = field(default_factory=lambda: {k: v[1] for k, v in OPTIONS.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        if key not in OPTIONS:
            raise KeyError(f"unknown config key {key!r}")
        self.values[key] = OPTIONS[key][0](value) if isinstance(value, str) else value

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in OPTIONS)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = RunConfig(dict(base.values)) if base else cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, value)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"config line {n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)

    # typed views onto the module config objects
    def model_config(self):
        from .nn import ModelConfig
        return ModelConfig(depth=self["model.depth"], heads=self["model.heads"],
                           mlp_hidden=self["model.mlp_hidden"], positional=self["model.positional"])

    def train_config(self, normalize: bool | None = None):
        from .train import TrainConfig
        return TrainConfig(
            epochs=self["train.epochs"], batch=self["train.batch"], lr=self["train.lr"],
            weight_decay=self["train.weight_decay"], warmup_epochs=self["train.warmup_epochs"],
            poly_power=self["train.poly_power"], seed=self["global.seed"],
            normalize=self["calibrate.normalize"] if normalize is None else normalize,
            val_fraction=self["train.val_fraction"], patches_per_epoch=self["train.patches_per_epoch"],
            val_patches=self["train.val_patches"], overlap=self["train.overlap"],
            contaminant_share=self["train.contaminant_share"])

    def loss_config(self):
        from .hypercube import MaterialClass
        from .train import LossConfig, default_class_weights
        weights = tuple(self["loss.contaminant_weight"] if c.is_contaminant else w
                        for c, w in zip(MaterialClass, default_class_weights()))
        return LossConfig(smoothing=self["loss.smoothing"], fp_penalty=self["loss.fp_penalty"],
                          class_weights=weights)

    def morphology(self):
        from .postprocess import MorphologyConfig
        return MorphologyConfig(fallback=self["predict.fallback"])


# ---------------------------------------------------------------- errors

class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _seed_default() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {raw!r}") from None


@contextmanager
def _thread_limit(n: int):
    if n and n > 0:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=n):
            yield
    else:
        yield


def _labels_path(out_dir: Path, sid: str) -> Path:
    return out_dir / f"{sid}_labels.hdr"


def _dataset_root(path: Path) -> Path:
    if not path.is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    if not (path / "manifest.csv").exists():
        raise DataError(f"{path} has no manifest.csv")
    return path


def _frames(dark: str | None, flat: str | None):
    from .calibration import CalibrationFrames
    from .hypercube import load_cube
    if (dark is None) != (flat is None):
        raise UsageError("--dark and --flat go together")
    if dark is None:
        return None
    frames = CalibrationFrames(load_cube(dark), load_cube(flat))
    if frames.shape[2] == frames.dark.grid.sensor_bands:
        frames = frames.select_bands()
    return frames


def predict_one(raw, frames, gain, model, cfg: RunConfig, normalize: bool | None = None):
    """Classify ``raw`` under the preprocessing its checkpoint expects, then post-process.

    Returns ``(SegmentationResult, ContaminantReport)``.  ``normalize`` set to
    a value different from the checkpoint raises :class:`PreprocessingMismatch`.
    """
    from .postprocess import parse_order, run_postprocess
    from .segment import check_preprocessing, predict_cube
    from .train import preprocess

    want = model.config.normalized_input if normalize is None else normalize
    if "normalize" in raw.stages and not want:
        check_preprocessing(raw, model.config.normalized_input)
    x, ffc = preprocess(raw, frames, want, gain)
    check_preprocessing(x, model.config.normalized_input)
    order = parse_order(cfg["predict.postprocess"])
    if "rules" in order and "normalize" in ffc.stages:
        raise DataError("the rules stage needs an unnormalized flat-field corrected cube; "
                        "pass the raw cube with --dark/--flat")
    res = predict_cube(x, model, mode=cfg["predict.mode"])
    return run_postprocess(res, ffc, order, cfg.morphology())


def predict_dataset(root: Path, model, out_dir: Path, cfg: RunConfig,
                    normalize: bool | None = None) -> list[str]:
    """Predict every scene of a generated dataset into ``out_dir``."""
    from .calibration import compute_gain
    from .hypercube import load_cube, save_labels, save_raster
    from .train import load_frames, scene_ids

    frames = load_frames(root)
    gain = compute_gain(frames) if frames is not None else None
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = scene_ids(root)
    for sid in ids:
        raw = load_cube(root / "scenes" / f"{sid}.hdr")
        res, report = predict_one(raw, frames, gain, model, cfg, normalize)
        save_labels(res.labels, _labels_path(out_dir, sid))
        save_raster(res.confidence, out_dir / f"{sid}_confidence.hdr", "max softmax probability")
        report.to_csv(out_dir / f"{sid}_report.csv")
    return ids


def evaluate_dirs(pred_dir: Path, gt_dir: Path, per_scene: list | None = None):
    """EvalMetrics over every ``*_labels.hdr`` in ``pred_dir`` against ``gt_dir``.

    When ``per_scene`` is a list, ``(scene_id, BlobTally)`` pairs are appended to it.
    """
    from .eval import EvalMetrics
    from .hypercube import load_labels

    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} does not exist")
    if (gt_dir / "scenes").is_dir():
        gt_dir = gt_dir / "scenes"
    if not gt_dir.is_dir():
        raise DataError(f"ground-truth directory {gt_dir} does not exist")
    preds = sorted(pred_dir.glob("*_labels.hdr"))
    if not preds:
        raise DataError(f"no *_labels.hdr files in {pred_dir}")
    metrics = EvalMetrics()
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise DataError(f"no ground truth {g} for prediction {p.name}")
        tally = metrics.add(load_labels(p), load_labels(g))
        if per_scene is not None:
            per_scene.append((p.name[:-len("_labels.hdr")], tally))
    return metrics


SCENE_COLUMNS = ["scene_id", "contaminated", "tp_blobs", "fp_blobs", "fp_pixels", "gt_blobs", "gt_detected"]


def write_scene_tallies(rows, root: Path, path: Path) -> None:
    """Per-scene blob tallies; ``contaminated`` comes from the dataset manifest."""
    from .synthscene import read_manifest
    dirty = {r["scene_id"]: bool(r.get("contaminants", "").strip()) for r in read_manifest(root)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCENE_COLUMNS)
        for sid, t in rows:
            w.writerow([sid, int(dirty.get(sid, False)), t.tp_blobs, t.fp_blobs, t.fp_pixels,
                        t.gt_blobs, t.gt_detected])


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg: RunConfig) -> int:
    from .synthscene import DatasetSpec, render_dataset
    override = None
    if args.drift_override:
        try:
            g, o = (float(v) for v in args.drift_override.split(","))
        except ValueError:
            raise UsageError("--drift-override expects GAIN,OFFSET") from None
        override = (g, o)
    ds = DatasetSpec(n_scenes=cfg["gen.n"], height=cfg["gen.height"], width=cfg["gen.width"],
                     contaminant_fraction=cfg["gen.contaminant_fraction"],
                     drift_gain=(cfg["gen.drift_min"], cfg["gen.drift_max"]), seed=cfg["global.seed"])
    render_dataset(args.out, ds, drift_override=override)
    log.info("wrote %d scenes to %s", ds.n_scenes, args.out)
    return 0


def cmd_calibrate(args, cfg: RunConfig) -> int:
    from .hypercube import load_cube, save_cube
    from .train import preprocess
    frames = _frames(args.dark, args.flat)
    x, _ = preprocess(load_cube(args.input), frames, cfg["calibrate.normalize"])
    save_cube(x, args.out)
    log.info("calibrated cube (%s) written to %s", ", ".join(x.stages), args.out)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import train_dataset
    root = _dataset_root(Path(args.data))
    res = train_dataset(root, mcfg=cfg.model_config(), tcfg=cfg.train_config(),
                        lcfg=cfg.loss_config(), out_dir=args.out)
    log.info("best epoch %d, validation mIoU %.4f", res.best_epoch, res.best_miou)
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    from .hypercube import load_cube, save_labels, save_raster
    from .nn import Model
    model = Model.load(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        if not args.out_dir:
            raise UsageError("predicting a dataset directory needs --out-dir")
        predict_dataset(_dataset_root(src), model, Path(args.out_dir), cfg, args.normalize)
        return 0
    if not (args.out_labels and args.out_confidence):
        raise UsageError("predicting a single cube needs --out-labels and --out-confidence")
    frames = _frames(args.dark, args.flat)
    res, report = predict_one(load_cube(src), frames, None, model, cfg, args.normalize)
    save_labels(res.labels, args.out_labels)
    save_raster(res.confidence, args.out_confidence, "max softmax probability")
    if args.report:
        report.to_csv(args.report)
    log.info("%d contaminant blobs after %s", len(report.blobs), cfg["predict.postprocess"])
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .eval import emit_report
    metrics = evaluate_dirs(Path(args.pred_dir), Path(args.gt_dir))
    emit_report(metrics, args.report)
    t = metrics.tally
    log.info("mIoU %.4f  TP blobs %d  FP blobs %d  recall %.3f", metrics.miou, t.tp_blobs, t.fp_blobs, t.recall)
    return 0


def _parse_pixels(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in item.split(",")) for item in text.split(";") if item.strip()]
    except ValueError:
        raise UsageError(f"--pixels expects x,y;x,y, got {text!r}") from None


def cmd_plot_spectra(args, cfg: RunConfig) -> int:
    from .eval import emit_spectra
    from .hypercube import load_cube
    pixels = _parse_pixels(args.pixels)
    if any(len(p) != 2 for p in pixels) or not pixels:
        raise UsageError("--pixels expects x,y;x,y")
    out = Path(args.out)
    emit_spectra(load_cube(args.input), pixels, out.with_suffix(".csv"), out)
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    from .hypercube import load_cube
    from .nn import Model
    from .segment import throughput
    model = Model.load(args.checkpoint)
    paths = []
    for p in map(Path, args.input):
        paths += sorted(p.glob("scenes/*[0-9].hdr")) if p.is_dir() else [p]
    if not paths:
        raise DataError("no benchmark cubes found")
    frames = _frames(args.dark, args.flat)
    if frames is None and Path(args.input[0]).is_dir():
        from .train import load_frames
        frames = load_frames(Path(args.input[0]))
    rep = throughput([load_cube(p) for p in paths], model, frames, mode=cfg["predict.mode"],
                     runs=cfg["bench.runs"], postprocess=cfg["predict.postprocess"])
    rows = [("fps", rep["fps"]), ("images", rep["images"]), ("patches_per_image", rep["patches_per_image"])]
    rows += [(f"seconds.{k}", v) for k, v in rep["stage_seconds"].items()]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(rows)
    log.info("%.2f images/s over %d images", rep["fps"], rep["images"])
    return 0


# ---------------------------------------------------------------- pipeline

class StageFailed(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    log.info("== %s", name)
    t0 = time.perf_counter()
    try:
        yield
    except (UsageError, StageFailed):
        raise
    except Exception as exc:
        raise StageFailed(name, exc) from exc
    log.info("== %s done in %.1fs", name, time.perf_counter() - t0)


def drift_settings(n: int, lo: float, hi: float) -> list[tuple[float, float]]:
    """``n`` (gain, offset) pairs spanning the configured gain range at zero offset."""
    if n == 1:
        return [((lo + hi) / 2, 0.0)]
    return [(float(g), 0.0) for g in np.linspace(lo, hi, n)]


def drift_sweep(out: Path, models: dict, test_spec, cfg: RunConfig) -> Path:
    """Re-render the test set at each drift setting and score every model; returns the CSV path."""
    from .synthscene import render_dataset
    rows = []
    lo, hi = cfg["gen.drift_min"], cfg["gen.drift_max"]
    for i, (g, o) in enumerate(drift_settings(cfg["pipeline.drift_settings"], lo, hi)):
        root = out / "drift" / f"setting_{i}"
        render_dataset(root, test_spec, drift_override=(g, o))
        for name, m in models.items():
            pred = out / "drift" / f"pred_{i}_{name}"
            predict_dataset(root, m, pred, cfg)
            mt = evaluate_dirs(pred, root)
            ta = mt.tally
            rows.append([name, f"{g:.6f}", f"{o:.6f}", ta.images, ta.fp_blobs, ta.fp_pixels,
                         ta.fp_images, ta.tp_blobs, f"{mt.miou:.6f}"])
            log.info("drift %.3f %s: FP blobs %d", g, name, ta.fp_blobs)
    path = out / "drift.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "drift_gain", "drift_offset", "images", "fp_blobs", "fp_pixels",
                    "fp_images", "tp_blobs", "miou"])
        w.writerows(rows)
    return path


def plan_test_set(cfg: RunConfig):
    """The test-set plan: clean + contaminated scenes at seed + 1."""
    from .synthscene import DatasetSpec
    n_clean, n_cont = cfg["pipeline.test_clean"], cfg["pipeline.test_contaminated"]
    return DatasetSpec(n_scenes=n_clean + n_cont, contaminant_fraction=n_cont / (n_clean + n_cont),
                       drift_gain=(cfg["gen.drift_min"], cfg["gen.drift_max"]), seed=cfg["global.seed"] + 1,
                       height=cfg["gen.height"], width=cfg["gen.width"])


def run_pipeline(out: Path, cfg: RunConfig, data: Path | None = None) -> Path:
    """gen -> calibrate -> train -> predict -> eval; returns the metrics CSV path.

    With ``data`` given, training and test sets are read from ``data/train``
    and ``data/test`` instead of being generated.  Besides ``metrics.csv`` the
    run directory receives ``scenes.csv`` (per-scene blob tallies), one
    ``model_<variant>/`` per trained model and, with drift settings,
    ``drift.csv``.
    """
    from .eval import emit_report
    from .synthscene import DatasetSpec, render_dataset
    from .train import load_dataset, train

    out.mkdir(parents=True, exist_ok=True)
    spec = plan_test_set(cfg)
    if data is None:
        train_root, test_root = out / "data" / "train", out / "data" / "test"
        with _stage("gen"):
            render_dataset(train_root, DatasetSpec(n_scenes=cfg["pipeline.train_scenes"],
                                                   contaminant_fraction=cfg["gen.contaminant_fraction"],
                                                   drift_gain=spec.drift_gain, seed=cfg["global.seed"],
                                                   height=spec.height, width=spec.width))
            render_dataset(test_root, spec)
    else:
        train_root, test_root = data / "train", data / "test"
        for root in (train_root, test_root):
            if not (root / "manifest.csv").exists():
                raise DataError(f"no dataset at {root}")

    variants = [("normalized", True)]
    if cfg["pipeline.compare_unnormalized"]:
        variants.append(("unnormalized", False))
    models = {}
    for name, normalize in variants:
        with _stage(f"calibrate ({name})"):
            scenes = load_dataset(train_root, normalize)
        with _stage(f"train ({name})"):
            res = train(scenes, mcfg=cfg.model_config(), tcfg=cfg.train_config(normalize),
                        lcfg=cfg.loss_config(), out_dir=out / f"model_{name}")
            del scenes
        models[name] = res.model

    with _stage("predict"):
        predict_dataset(test_root, models["normalized"], out / "pred", cfg)
    with _stage("eval"):
        per_scene: list = []
        metrics = evaluate_dirs(out / "pred", test_root, per_scene)
        report = emit_report(metrics, out / "metrics.csv")
        write_scene_tallies(per_scene, test_root, out / "scenes.csv")
    t = metrics.tally
    log.info("test mIoU %.4f  TP blobs %d  FP blobs %d  recall %.3f",
             metrics.miou, t.tp_blobs, t.fp_blobs, t.recall)

    if cfg["pipeline.drift_settings"] > 0:
        with _stage("drift sweep"):
            drift_sweep(out, models, spec, cfg)
    (out / "config.txt").write_text(cfg.to_text())
    return report


def cmd_pipeline(args, cfg: RunConfig) -> int:
    data = Path(args.data) if args.data else None
    if data is not None and not data.is_dir():
        raise DataError(f"dataset directory {data} does not exist")
    run_pipeline(Path(args.out), cfg, data)
    return 0


# ---------------------------------------------------------------- argument parsing

def _add_option(p: argparse.ArgumentParser, flag: str, key: str, **kw) -> None:
    kind, _, help_text = OPTIONS[key]
    if kind is _parse_bool:
        p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_text)
    else:
        p.add_argument(flag, dest=key, type=kind, default=None, metavar=key.split(".")[-1].upper(),
                      help=help_text, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", help="key=value file with section.key names (flags take precedence)")
    g.add_argument("--seed", dest="global.seed", type=int, default=None, metavar="SEED", help=OPTIONS["global.seed"][2])
    g.add_argument("--determinism", dest="global.determinism", action="store_true", default=None,
                   help=OPTIONS["global.determinism"][2])
    g.add_argument("--threads", dest="global.threads", type=int, default=None, metavar="N", help=OPTIONS["global.threads"][2])
    g.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    g.add_argument("-q", "--quiet", action="count", default=0, help="less logging")

    parser = _Parser(prog="beltscan", description="Hyperspectral contaminant segmentation on a meat conveyor belt.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    _add_option(p, "--n", "gen.n")
    _add_option(p, "--height", "gen.height")
    _add_option(p, "--width", "gen.width")
    _add_option(p, "--contaminant-fraction", "gen.contaminant_fraction")
    _add_option(p, "--drift-min", "gen.drift_min")
    _add_option(p, "--drift-max", "gen.drift_max")
    p.add_argument("--drift-override", metavar="GAIN,OFFSET", help="force one drift setting on every scene")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", parents=[common], help="flat-field correct (and normalize) a cube")
    p.add_argument("--in", dest="input", required=True, help="raw cube header")
    p.add_argument("--dark", required=True, help="dark frame header")
    p.add_argument("--flat", required=True, help="flat frame header")
    p.add_argument("--out", required=True, help="output cube header")
    _add_option(p, "--normalize", "calibrate.normalize")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and metrics.csv")
    _add_option(p, "--normalize", "calibrate.normalize")
    for key in OPTIONS:
        if key.startswith(("train.", "loss.", "model.")):
            _add_option(p, "--" + key.split(".", 1)[1].replace("_", "-"), key)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="segment a cube or a dataset")
    p.add_argument("--in", dest="input", required=True, help="cube header or dataset directory")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--dark", help="dark frame header (raw input)")
    p.add_argument("--flat", help="flat frame header (raw input)")
    p.add_argument("--out-labels", help="label map header (single cube)")
    p.add_argument("--out-confidence", help="confidence raster header (single cube)")
    p.add_argument("--out-dir", help="output directory (dataset input)")
    p.add_argument("--report", help="post-processing report CSV (single cube)")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None,
                   help="normalize spectra (default: as recorded in the checkpoint)")
    _add_option(p, "--mode", "predict.mode")
    _add_option(p, "--postprocess", "predict.postprocess")
    _add_option(p, "--fallback", "predict.fallback")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score predicted label maps")
    p.add_argument("--pred-dir", required=True, help="directory of *_labels.hdr predictions")
    p.add_argument("--gt-dir", required=True, help="dataset directory or directory of ground-truth label maps")
    p.add_argument("--report", required=True, help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-spectra", parents=[common], help="plot pixel spectra as CSV + SVG")
    p.add_argument("--in", dest="input", required=True, help="cube header")
    p.add_argument("--pixels", required=True, help="x,y;x,y list")
    p.add_argument("--out", required=True, help="SVG path; the CSV is written next to it")
    p.set_defaults(func=cmd_plot_spectra)

    p = sub.add_parser("bench", parents=[common], help="throughput benchmark")
    p.add_argument("--in", dest="input", nargs="+", required=True, help="cube headers or dataset directories")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--dark", help="dark frame header")
    p.add_argument("--flat", help="flat frame header")
    p.add_argument("--out", required=True, help="timing CSV")
    _add_option(p, "--mode", "predict.mode")
    _add_option(p, "--postprocess", "predict.postprocess")
    _add_option(p, "--runs", "bench.runs")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pipeline", parents=[common], help="gen -> calibrate -> train -> predict -> eval")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", help="existing directory holding train/ and test/ datasets")
    for key in OPTIONS:
        if key.startswith(("pipeline.", "train.", "loss.", "gen.")) and key != "gen.n":
            _add_option(p, "--" + key.split(".", 1)[1].replace("_", "-"), key)
    _add_option(p, "--mode", "predict.mode")
    _add_option(p, "--postprocess", "predict.postprocess")
    p.set_defaults(func=cmd_pipeline)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    cfg.set("global.seed", _seed_default())
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.load(args.config, cfg)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for key, value in vars(args).items():
        if key in OPTIONS and value is not None:
            cfg.set(key, value)
    if cfg["global.determinism"] and not cfg["global.threads"]:
        cfg.set("global.threads", 1)
    return cfg


def _setup_logging(cfg: RunConfig, verbose: int, quiet: int) -> None:
    base = logging.getLevelName(str(cfg["global.log_level"]).upper())
    if not isinstance(base, int):
        raise UsageError(f"unknown log level {cfg['global.log_level']!r}")
    level = min(max(base - 10 * verbose + 10 * quiet, logging.DEBUG), logging.CRITICAL)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("beltscan")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return 1
        cfg = resolve_config(args)
        _setup_logging(cfg, args.verbose, args.quiet)
        with _thread_limit(cfg["global.threads"]):
            return args.func(args, cfg)
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except StageFailed as exc:
        print(f"beltscan: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError) as exc:
        print(f"beltscan: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
