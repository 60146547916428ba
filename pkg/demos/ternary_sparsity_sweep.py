"""Sweep the ternary penalty and watch the sparsity cliff.

Ternary weights take values in {-1, 0, +1}, and each nonzero entry pays a
per-step price lam. The update keeps an entry nonzero only while its
averaged coefficient matrix justifies the price, so lam is a direct knob
on how much of the network survives training.

The sweep trains the same 784-128-128-10 architecture (batch norm after
every dense layer, the output one included) at three penalties. At
lam=1e-7 roughly a fifth of the weights stay nonzero with train error on
par with the all-binary run; one order of magnitude more and the penalty
overwhelms the evidence, zeroing the network outright, which scores like
uniform guessing. The cliff is sharp because the surviving set is a
threshold set of the averaged coefficient matrix, and most of that
matrix's entries share a scale.

Expects MNIST idx files under data/mnist; trains three nets on 10000
images, about one minute total.
"""

from pathlib import Path

import numpy as np

import msanet as mn

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "mnist"
LAMBDAS = (1e-7, 1e-6, 1e-5)
TRAIN_LIMIT = 10000
EPOCHS = 30
BATCH = 100
SEED = 0


def idx_file(stem):
    for name in (stem, stem + ".gz"):
        p = DATA_DIR / name
        if p.is_file():
            return p
    return None


images = idx_file("train-images-idx3-ubyte")
labels = idx_file("train-labels-idx1-ubyte")
if images is None or labels is None:
    print(f"MNIST idx files not found under {DATA_DIR}")
    print("place train-images-idx3-ubyte / train-labels-idx1-ubyte there, "
          "raw or gzipped, then rerun")
    raise SystemExit(0)
train_ds = mn.load_mnist_idx(images, labels, "train").subset(TRAIN_LIMIT)


def ternary_net(lam):
    rng = np.random.default_rng(SEED)

    def block(d_in, d_out):
        return [mn.TernaryDense.random(d_in, d_out, lam, rng),
                mn.BatchNorm.identity(d_out),
                mn.Activation("relu", d_out)]

    return mn.Network(block(784, 128) + block(128, 128)
                      + [mn.TernaryDense.random(128, 10, lam, rng),
                         mn.BatchNorm.identity(10)])


print(f"training three ternary nets on {len(train_ds)} images, "
      f"{EPOCHS} epochs each\n")
results = []
for lam in LAMBDAS:
    cfg = mn.TrainConfig(optimizer="ternary_msa", epochs=EPOCHS,
                         batch_size=BATCH, seed=SEED)
    net, records = mn.train(ternary_net(lam), train_ds, "squared_hinge", cfg)
    last = records[-1]
    results.append((lam, last.nonzero_fraction, last.train_error))
    per_layer = ", ".join(f"{s:.3f}" for s in last.sparsity_per_layer)
    print(f"lam={lam:.0e}  nonzero fraction {last.nonzero_fraction:.3f}  "
          f"train error {last.train_error:.4f}  per layer [{per_layer}]")

print("\nlam        nonzero   train error")
for lam, nz, err in results:
    print(f"{lam:.0e}    {nz:.3f}     {err:.4f}")
