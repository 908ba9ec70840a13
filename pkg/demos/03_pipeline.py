"""A small end-to-end run through the command-line pipeline.

Generates a handful of scenes, trains a reduced model for a few epochs,
predicts the test scenes with rules and erosion, and prints the metrics CSV.
The full acceptance recipe is the same command with the defaults (see the
README); this one finishes in a few minutes on one core.

    python demos/03_pipeline.py [run-directory]
"""

import sys
import tempfile
from pathlib import Path

from beltscan.cli import main

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "run"
config = out.parent / "demo.cfg"
out.parent.mkdir(parents=True, exist_ok=True)
config.write_text("model.depth = 2\n")
code = main(["pipeline", "--out", str(out), "--config", str(config), "--seed", "7",
             "--train-scenes", "8", "--test-clean", "2", "--test-contaminated", "2",
             "--epochs", "6", "--warmup-epochs", "1", "--patches-per-epoch", "64", "--val-patches", "32",
             "--contaminant-share", "0.5", "--drift-settings", "2"])
print((out / "metrics.csv").read_text() if code == 0 else f"pipeline failed with exit code {code}")
if code == 0:
    print((out / "drift.csv").read_text())
