"""Desk-scale training: a depth-8 network on synthetic two-class blobs.

Run with ``python demos/04_smoke_training.py`` (about four minutes on one
core).  Pass ``--epochs 3`` for a quicker look.
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from pyror.archspec import ArchConfig
from pyror.graph import build_graph
from pyror.nnkernel.checkpoint import load_checkpoint
from pyror.stochdepth import linear_decay
from pyror.trainer import TrainConfig, evaluate, make_synthetic, normalize, train

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=30)
args = parser.parse_args()

# %% data
# each class has its own colour and blob position, so global pooling already
# separates them; the point is to exercise the full training path
train_set = make_synthetic(2, 500, seed=0)
test_set = make_synthetic(2, 100, seed=1, split="test")
print("train images", train_set.images.shape, "labels", np.bincount(train_set.labels))

# %% model and schedule
config = ArchConfig(8, 3, "pyramid-bn")
graph = build_graph(config)
sd = linear_decay(config.total_blocks, 0.5)
cfg = TrainConfig.smoke(epochs=args.epochs)
print("survival probabilities", [round(p, 3) for p in sd.probs])

# %% train
out = Path(tempfile.mkdtemp())
result = train(graph, cfg, train_set, sd_schedule=sd, test_set=test_set,
               log_path=out / "log.ndjson", checkpoint_dir=out / "ckpt")
for rec in result.log:
    print(f"epoch {rec['epoch']:>2}  loss {rec['train_loss']:.4f}  train acc {rec['train_acc']:.3f}  "
          f"test acc {rec['test_acc']:.3f}  active {rec['active_fraction']:.2f}")

# %% evaluate from the saved checkpoint
# the checkpoint echoes the architecture and the normalisation statistics
params, echo = load_checkpoint(out / "ckpt" / "last.ckpt")
stats = (echo["normalize"]["mean"], echo["normalize"]["std"])
metrics = evaluate(build_graph(ArchConfig.from_dict(echo["graph"])), params,
                   normalize(test_set, stats), sd)
print("held-out top-1 error", metrics["top1_error"], "mean loss", round(metrics["mean_loss"], 5))
print("run log and checkpoints in", out)
