"""
Training, evaluation and the command line
=========================================

Writes a small synthetic dataset, trains a reduced model for a few dozen
steps, evaluates it, and then drives the same steps through the
``dfdnet`` command line, including a per-stage feature dump.
"""

# %%
import sys
import tempfile
from pathlib import Path

from dfdnet.cli import main
from dfdnet.image import RainParams, write_toy_dataset
from dfdnet.net import ModelConfig
from dfdnet.trainer import Checkpoint, TrainHyper, evaluate, smoothed, train

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="dfdnet_demo_"))
rain = RainParams(angle_degrees=10, density=2.0, intensity=0.6)
train_set = write_toy_dataset(work / "train", 8, seed=1, rain=rain, size=48)
val_set = write_toy_dataset(work / "val", 2, seed=2, rain=rain, size=48, prefix="val")

# %%
cfg = ModelConfig(stages=2, width=8)
result = train(train_set, cfg, TrainHyper(iters=60, log_every=20), out_dir=work / "run")
curve = smoothed(result.losses, window=10)
print(f"smoothed loss {curve[9]:.3f} -> {curve[-1]:.3f}")
print("validation", evaluate(result.model, val_set).mean)

# checkpoints round-trip byte for byte
blob = (work / "run" / "checkpoint.dfd").read_bytes()
assert Checkpoint.from_bytes(blob).to_bytes() == blob

# %%
# the same workflow from the command line
(work / "toy.cfg").write_text(
    "stages = 2\nwidth = 8\niters = 20\ntrain_manifest = train/manifest.txt\n"
    "val_manifest = val/manifest.txt\nval_every = 20\nout_dir = cli_run\n", encoding="utf-8")
main(["train", "--config", str(work / "toy.cfg")])
rainy = val_set.entries[0][0]
main(["derain", "--model", str(work / "cli_run" / "checkpoint.dfd"), "--input", str(rainy),
      "--output", str(work / "derained.png"), "--dump-features", str(work / "features")])
main(["eval", "--model", str(work / "cli_run" / "checkpoint.dfd"), "--manifest", str(work / "val" / "manifest.txt"),
      "--out", str(work / "eval.csv")])
print(sorted(p.name for p in (work / "features").iterdir()))
print("outputs in", work)
