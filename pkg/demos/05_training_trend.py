"""
Backprop vs greedy local training vs restricted back-flow
=========================================================

A small CNN on synthetic 8x8 images (CIFAR-10 binaries are used instead
when a path is given).  Pass ``--epochs 20`` for the full comparison.
"""

import argparse

from backlink.data import load_cifar_binary, synth_blobs
from backlink.layers import AuxClassifierSpec, tiny_cnn
from backlink.optim import LRSchedule
from backlink.pipeline import TrainJob, run_sequential
from backlink.router import BackLinkConfig, partition

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--cifar", nargs="*", help="CIFAR-10 data_batch files (32x32, much slower)")
args = parser.parse_args()

if args.cifar:
    train = load_cifar_binary(args.cifar).take(10_000, seed=0)
    test = None
    spec = tiny_cnn(input_shape=(3, 32, 32))
else:
    kw = dict(dims=(3, 8, 8), seed=0, clusters_per_class=4, noise=48)
    train, test = synth_blobs(10, 1000, **kw), synth_blobs(10, 200, split="test", **kw)
    spec = tiny_cnn()

head = AuxClassifierSpec("conv", 10)
runs = {"backprop (K=1)": (1, 0, 1.0), "greedy (K=4, l=0)": (4, 0, 1.0), "back-flow (K=4, l=2, alpha=0.25)": (4, 2, 0.25)}
for name, (K, l, alpha) in runs.items():
    job = TrainJob(spec, partition(8, K), BackLinkConfig(l, alpha, head), train, test, epochs=args.epochs,
                   batch_size=128, schedule=LRSchedule(0.05, (12, 16)), precision="standard")
    rec = run_sequential(job).records[-1]
    acc = rec.test_accuracy if rec.test_accuracy is not None else rec.train_accuracy[-1]
    print(f"{name:<34} final-head accuracy {acc:.3f}")
