"""Train the same net with and without the orthogonality penalty and compare the bases.

Uses CIFAR-10 from OBN_DATA_DIR when present, otherwise low-SNR synthetic images.
Run: python3 demos/paired_regularizer.py [--subset 1000] [--epochs 5] [--out /tmp/paired]
"""
import argparse
import os

import numpy as np

from obn import analyze
from obn.checkpoint import load
from obn.cli import resolve_config, run_training
from obn.models import build
from obn.train import load_state_dict, spec_from_state

ap = argparse.ArgumentParser()
ap.add_argument("--subset", type=int, default=1000)
ap.add_argument("--epochs", type=int, default=5)
ap.add_argument("--model", default="ResNet20-S8U1")
ap.add_argument("--out", default="paired_out")
args = ap.parse_args()

source = ["data.name=cifar10"] if os.environ.get("OBN_DATA_DIR") else ["data.name=synthetic", "data.snr=0.1"]
print("data:", source[0].split("=")[1])
for lam in (1e-3, 0.0):
    cfg = resolve_config(None, [*source, f"model.name={args.model}", f"data.subset={args.subset}",
                                "data.test_subset=500", f"train.epochs={args.epochs}", f"ortho.lambda={lam}"])
    out = os.path.join(args.out, f"lambda_{lam:g}")
    last = run_training(cfg, out, log=lambda s: print("  " + s))
    state = load(os.path.join(out, "checkpoint.obn"))
    net = build(spec_from_state(state), 0)
    load_state_dict(net, state)
    dev = np.mean([b.deviation() for _, b in net.bases()])
    cos = np.mean([m.mean_off_diagonal() for m in analyze.group_similarities(net).values()])
    print(f"lambda={lam:g}: ||W^T W - I||_F {dev:.3f}  mean |cos| {cos:.4f}  "
          f"test error {last['test_error']:.1f}%\n")
