import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backlink.autodiff import Tensor
from backlink.data import (
    BATCH_PRESETS,
    BatchIterator,
    DatasetHandle,
    load_cifar_binary,
    load_idx,
    next_batch,
    read_idx,
    save_cifar_binary,
    save_idx,
    synth_blobs,
    write_idx,
)
from backlink.errors import DataError
from backlink.optim import SGD, softmax_xent


def idx_bytes(magic_ndim, dims, payload):
    return struct.pack(">HBB", 0, 0x08, magic_ndim) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_idx_fixture(tmp_path):
    pixels = [0, 1, 2, 3, 250, 251, 252, 253]
    (tmp_path / "img").write_bytes(idx_bytes(3, (2, 2, 2), pixels))
    (tmp_path / "lbl").write_bytes(idx_bytes(1, (2,), [7, 3]))
    # magic numbers as documented for the format
    assert (tmp_path / "img").read_bytes()[:4] == bytes.fromhex("00000803")
    assert (tmp_path / "lbl").read_bytes()[:4] == bytes.fromhex("00000801")
    h = load_idx(tmp_path / "img", tmp_path / "lbl", num_classes=10)
    assert h.images.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(h.images[0, 0], [[0, 1], [2, 3]])
    np.testing.assert_array_equal(h.images[1, 0], [[250, 251], [252, 253]])
    np.testing.assert_array_equal(h.labels, [7, 3])


def test_idx_empty_file(tmp_path):
    (tmp_path / "e").write_bytes(b"")
    with pytest.raises(DataError, match="truncated"):
        read_idx(tmp_path / "e")


def test_idx_truncated_payload(tmp_path):
    (tmp_path / "t").write_bytes(idx_bytes(3, (2, 2, 2), [1, 2, 3]))
    with pytest.raises(DataError, match="truncated"):
        read_idx(tmp_path / "t")


def test_idx_bad_magic(tmp_path):
    (tmp_path / "b").write_bytes(struct.pack(">HBB", 0, 0x0D, 1) + struct.pack(">I", 1) + b"\0" * 4)
    with pytest.raises(DataError, match="magic"):
        read_idx(tmp_path / "b")


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(3, (2, 1, 1), [1, 2]))
    (tmp_path / "lbl").write_bytes(idx_bytes(1, (3,), [0, 1, 2]))
    with pytest.raises(DataError, match="mismatch"):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def cifar_record(label, pixels):
    return bytes([label]) + bytes(pixels)


def test_cifar_fixture(tmp_path):
    pixels = [i % 256 for i in range(3072)]
    (tmp_path / "c.bin").write_bytes(cifar_record(7, pixels))
    h = load_cifar_binary(tmp_path / "c.bin")
    assert len(h) == 1 and h.labels[0] == 7
    np.testing.assert_array_equal(h.images.reshape(-1), pixels)
    assert h.images[0, 1, 0, 0] == 1024 % 256  # channel-major layout
    assert h.images[0, 0, 1, 0] == 32


def test_cifar_empty(tmp_path):
    (tmp_path / "z.bin").write_bytes(b"")
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path / "z.bin")


def test_cifar_bad_length(tmp_path):
    (tmp_path / "z.bin").write_bytes(b"\0" * 3074)
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path / "z.bin")


def test_cifar_two_records(tmp_path):
    (tmp_path / "c.bin").write_bytes(cifar_record(1, [0] * 3072) + cifar_record(2, [9] * 3072))
    h = load_cifar_binary(tmp_path / "c.bin")
    assert len(h) == 2
    np.testing.assert_array_equal(h.labels, [1, 2])


def test_cifar100_fine_label(tmp_path):
    (tmp_path / "c.bin").write_bytes(bytes([3, 42]) + bytes(3072))
    h = load_cifar_binary(tmp_path / "c.bin", num_classes=100, label_bytes=2)
    assert h.labels[0] == 42


def test_idx_roundtrip(tmp_path):
    h = synth_blobs(4, 5, dims=(3, 6, 6), seed=2)
    save_idx(h, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l", num_classes=4)
    assert back.images.tobytes() == h.images.tobytes() and np.array_equal(back.labels, h.labels)
    mono = DatasetHandle(h.images[:, :1], h.labels, 4)
    save_idx(mono, tmp_path / "i1", tmp_path / "l1")
    assert read_idx(tmp_path / "i1").shape == (20, 1, 6, 6)
    write_idx(tmp_path / "i3", mono.images[:, 0])
    assert load_idx(tmp_path / "i3", tmp_path / "l1", 4).images.tobytes() == mono.images.tobytes()


def test_cifar_roundtrip(tmp_path):
    h = synth_blobs(10, 3, dims=(3, 32, 32), seed=5)
    save_cifar_binary(h, tmp_path / "c.bin")
    back = load_cifar_binary(tmp_path / "c.bin")
    assert back.images.tobytes() == h.images.tobytes() and np.array_equal(back.labels, h.labels)


def test_handle_invariants():
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((2, 1, 2, 2), np.uint8), np.array([0, 5]), 3)
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((2, 1, 2, 2), np.uint8), np.array([0]), 3)
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((1, 1, 2, 2)), np.array([0]), 3)


def test_blobs_deterministic():
    a, b = synth_blobs(3, 20, seed=4), synth_blobs(3, 20, seed=4)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert synth_blobs(3, 20, seed=5).images.tobytes() != a.images.tobytes()


def test_blobs_balanced_labels():
    h = synth_blobs(7, 13, dims=(2,), seed=0)
    np.testing.assert_array_equal(np.bincount(h.labels), [13] * 7)


def test_blobs_reject_nonpositive():
    with pytest.raises(DataError):
        synth_blobs(0, 5)


def test_blobs_linear_model_separates_two_classes():
    """Train softmax regression on two well-separated blobs; held-out accuracy >= 99%."""
    train = synth_blobs(2, 300, dims=(8,), seed=1, separation=80.0, noise=16.0)
    test = synth_blobs(2, 300, dims=(8,), seed=1, split="test", separation=80.0, noise=16.0)
    it = BatchIterator(train, batch_size=32, seed=0)
    W = Tensor(np.zeros((8, 2)), requires_grad=True, name="w.weight")
    b = Tensor(np.zeros(2), requires_grad=True, name="w.bias")
    opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.0)
    for epoch in range(5):
        it.reset(epoch)
        for x, y in it:
            _, d = softmax_xent(x @ W.data + b.data, y)
            opt.step([W, b], [x.T @ d, d.sum(axis=0)])
    xt, yt = next(iter(BatchIterator(test, batch_size=len(test), mean=it.mean, std=it.std, shuffle=False)))
    acc = np.mean(np.argmax(xt @ W.data + b.data, axis=1) == yt)
    assert acc >= 0.99


def test_single_batch_epoch():
    h = synth_blobs(2, 5, dims=(3, 4, 4))
    it = BatchIterator(h, batch_size=len(h))
    batches = list(it)
    assert len(batches) == 1 and batches[0][0].shape == (10, 3, 4, 4)


def test_exhausted_iterator_signals_epoch_end():
    it = BatchIterator(synth_blobs(2, 3, dims=(2,)), batch_size=4)
    next_batch(it)
    x, _ = next_batch(it)
    assert len(x) == 2  # last batch may be smaller
    with pytest.raises(StopIteration):
        next_batch(it)
    it.reset(1)
    assert len(next_batch(it)[0]) == 4


def test_same_seed_same_batches():
    h = synth_blobs(3, 10, dims=(3, 4, 4))
    a = [x.tobytes() for x, _ in BatchIterator(h, 7, seed=3)]
    b = [x.tobytes() for x, _ in BatchIterator(h, 7, seed=3)]
    assert a == b


def test_normalized_channel_means():
    h = synth_blobs(4, 50, dims=(3, 5, 5), seed=9)
    xs = np.concatenate([x for x, _ in BatchIterator(h, 32, seed=0)])
    np.testing.assert_allclose(xs.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(xs.std(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_augmentation_only_in_train_mode():
    h = synth_blobs(2, 8, dims=(3, 6, 6), seed=0)
    plain = [x for x, _ in BatchIterator(h, 16, augment=False)]
    train = [x for x, _ in BatchIterator(h, 16, augment=True)]
    evals = [x for x, _ in BatchIterator(h, 16, augment=True, train=False)]
    assert not np.array_equal(plain[0], train[0])
    np.testing.assert_array_equal(plain[0], evals[0])
    assert train[0].shape == plain[0].shape


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 1000), st.integers(0, 5))
def test_epoch_partition(n, batch, seed, epoch):
    # labels double as sample ids
    h = DatasetHandle(np.zeros((n, 1), dtype=np.uint8), np.arange(n), n)
    it = BatchIterator(h, batch, seed=seed)
    it.reset(epoch)
    ids = [y for _, y in it]
    flat = np.concatenate(ids)
    assert sorted(flat.tolist()) == list(range(n))
    assert all(len(b) == batch for b in ids[:-1]) and 1 <= len(ids[-1]) <= batch


def test_subset_and_split():
    h = synth_blobs(5, 40, dims=(2,), seed=0)
    assert len(h.take(50, seed=1)) == 50
    rest, held = h.split_off(0.2, seed=0)
    assert len(rest) == 160 and len(held) == 40 and held.split == "val"


def test_batch_presets():
    assert BATCH_PRESETS == {"desk": 128, "benchmark": 512}
    assert BatchIterator(synth_blobs(2, 3, dims=(2,))).batch_size == BATCH_PRESETS["desk"]
