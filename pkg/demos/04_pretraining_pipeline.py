# %% [markdown]
# # Two-stage training on noisy textures
#
# Stage one learns features without labels (SimCLR). Stage two trains a
# classifier on noisy labels with Co-teaching, starting either from those
# features or from random weights. This script is a scaled-down version of
# the desk benchmark in the acceptance suite; pass larger sizes on the
# command line to get closer to it (5000 images, 60 SimCLR epochs and 30
# LNL epochs take about an hour on one CPU core).
#
#     python3 demos/04_pretraining_pipeline.py --train 1000 --ssl-epochs 10 --epochs 14

# %%
import argparse
import tempfile
from pathlib import Path

from nlbench.experiment import ExperimentConfig, prepare_manifest, resolve_init, run_single
from nlbench.plotting import plot_confusion
from nlbench.results import ResultsStore
from nlbench.synthetic import generate_textures

parser = argparse.ArgumentParser()
parser.add_argument("--train", type=int, default=1000)
parser.add_argument("--ssl-epochs", type=int, default=10)
parser.add_argument("--epochs", type=int, default=14)
parser.add_argument("--noise", type=float, default=0.5)
parser.add_argument("--out", default=None)
args = parser.parse_args()
out = Path(args.out or tempfile.mkdtemp(prefix="nlbench-demo-"))

# %% [markdown]
# ## Data
#
# Three texture families (stripes, checkerboard, dots) with random colours,
# orientation, frequency and phase, written as PNGs plus a manifest.

# %%
generate_textures(out / "textures", n_train=args.train, n_test=max(150, args.train // 5), seed=0,
                  noise=0.05, contrast=(0.5, 1.0))

# %% [markdown]
# ## Experiment configs
#
# The same tree a YAML file would hold. Only the pretraining block differs
# between the two arms.

# %%
def config(pretrain: dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict({
        "dataset": {"manifest": str(out / "textures" / "manifest.csv")},
        "noise": {"kind": "symmetric", "epsilon": args.noise, "seed": 7},
        "pretrain": pretrain,
        "lnl": {"method": "coteaching", "epochs": args.epochs, "warmup_epochs": min(10, args.epochs // 2),
                "architecture": "resnet10-w16", "input_size": 32, "batch_size": 32},
        "seeds": [1],
        "output": str(out),
    })


arms = {
    "scratch": config({"mode": "none"}),
    "simclr": config({"mode": "ssl", "task": "simclr", "seed": 0,
                      "overrides": {"epochs": args.ssl_epochs, "batch_size": 256}}),
}

# %% [markdown]
# ## Train both arms
#
# Pretraining runs once and is cached under the output directory; every run
# is stored as an immutable JSON record.

# %%
store = ResultsStore(out / "results")
records = {}
for name, cfg in arms.items():
    manifest = prepare_manifest(cfg)
    rec = run_single(cfg, args.noise, 1, manifest, init=resolve_init(cfg, manifest))
    store.write(rec)
    records[name] = rec
    print(f"{name:8s} BEST {rec.best:.3f}  LAST {rec.last:.3f}  series {[round(v, 2) for v in rec.report.series]}")

# %% [markdown]
# ## Confusion matrices
#
# With few classes and heavy noise, small-loss selection can abandon a class
# entirely: once both networks lean away from it, its samples all have large
# losses and none are kept again. Pretraining delays this but does not rule
# it out.

# %%
(out / "figures").mkdir(parents=True, exist_ok=True)
for path in plot_confusion(list(records.values()), out / "figures"):
    print(path)
