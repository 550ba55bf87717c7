"""
Reading and writing IDX and CIFAR binary files
==============================================
"""

import tempfile
from pathlib import Path

import numpy as np

from backlink.data import BatchIterator, load_cifar_binary, load_idx, save_cifar_binary, save_idx, synth_blobs

blobs = synth_blobs(10, 4, dims=(3, 32, 32), seed=0)
with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    save_cifar_binary(blobs, tmp / "batch.bin")
    back = load_cifar_binary(tmp / "batch.bin")
    print("CIFAR record bytes:", (tmp / "batch.bin").stat().st_size // len(blobs), "round trip ok:",
          np.array_equal(back.images, blobs.images))

    gray = synth_blobs(3, 5, dims=(1, 6, 6), seed=1)
    save_idx(gray, tmp / "images.idx", tmp / "labels.idx")
    print("IDX header:", (tmp / "images.idx").read_bytes()[:4].hex())
    print("IDX round trip ok:", np.array_equal(load_idx(tmp / "images.idx", tmp / "labels.idx", 3).images, gray.images))

# normalized, shuffled, optionally augmented batches
it = BatchIterator(blobs, batch_size=16, seed=0, augment=True)
x, y = next(iter(it))
print("batch", x.shape, "channel means", np.round(x.mean(axis=(0, 2, 3)), 2))
