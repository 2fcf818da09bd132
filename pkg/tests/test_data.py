import gzip
import struct

import numpy as np
import pytest

from obn import data
from obn.errors import FormatError

REC = 1 + 3 * 32 * 32


def write_cifar10(d, n_train=20, n_test=30, seed=0):
    rng = np.random.default_rng(seed)
    for name, n in [(f"data_batch_{i}.bin", n_train) for i in range(1, 6)] + [("test_batch.bin", n_test)]:
        labels = np.arange(n) % 10
        pix = rng.integers(0, 256, (n, 3 * 32 * 32), dtype=np.uint8)
        (d / name).write_bytes(np.concatenate([labels[:, None].astype(np.uint8), pix], axis=1).tobytes())


def test_cifar10_counts_and_histogram(tmp_path):
    write_cifar10(tmp_path)
    imgs, labels = data.parse_cifar(tmp_path / "test_batch.bin", expected=None)
    assert imgs.shape == (30, 3, 32, 32)
    assert np.bincount(labels).tolist() == [3] * 10
    with pytest.raises(FormatError, match="expected 30730000 bytes"):
        data.parse_cifar(tmp_path / "test_batch.bin")  # 10000 records expected by default


def test_cifar10_pixel_layout(tmp_path):
    rec = np.zeros(REC, dtype=np.uint8)
    rec[0] = 7
    rec[1 + 1024 + 32 * 2 + 5] = 200  # green channel, row 2, column 5
    (tmp_path / "one.bin").write_bytes(rec.tobytes())
    imgs, labels = data.parse_cifar(tmp_path / "one.bin", expected=1)
    assert labels[0] == 7 and imgs[0, 1, 2, 5] == 200 and imgs.sum() == 200


def test_truncated_file_reports_offset(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\0" * (2 * REC + 100))
    with pytest.raises(FormatError, match=f"byte offset {2 * REC}"):
        data.parse_cifar(tmp_path / "bad.bin", expected=None)


def test_load_cifar10_full_layout(tmp_path, monkeypatch):
    monkeypatch.setattr(data, "CIFAR_RECORDS_PER_BATCH", 20)
    monkeypatch.setattr(data.parse_cifar, "__defaults__", (1, 20))
    sub = tmp_path / "cifar-10-batches-bin"
    sub.mkdir()
    write_cifar10(sub, 20, 20)
    train, test = data.load_cifar10(tmp_path)
    assert len(train) == 100 and len(test) == 20 and train.num_classes == 10
    assert train.images.dtype == np.float32 and train.images.shape[1:] == (3, 32, 32)
    monkeypatch.setenv("OBN_DATA_DIR", str(tmp_path))
    train2, _ = data.load("cifar10")
    assert np.array_equal(train.images, train2.images)


def test_cifar100_uses_fine_label(tmp_path):
    rng = np.random.default_rng(1)
    n = 5
    coarse = rng.integers(0, 20, n)
    fine = rng.integers(0, 100, n)
    pix = rng.integers(0, 256, (n, 3072), dtype=np.uint8)
    buf = b"".join(bytes([c, f]) + p.tobytes() for c, f, p in zip(coarse, fine, pix))
    (tmp_path / "x.bin").write_bytes(buf)
    _, labels = data.parse_cifar(tmp_path / "x.bin", label_bytes=2, expected=None)
    # independent byte-level read of each record's second byte
    assert labels.tolist() == [buf[i * 3074 + 1] for i in range(n)]
    assert labels.tolist() == fine.tolist()


def write_idx(path, arr, magic, gz=False):
    head = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    body = head + arr.astype(np.uint8).tobytes()
    if gz:
        with gzip.open(str(path) + ".gz", "wb") as f:
            f.write(body)
    else:
        path.write_bytes(body)


def test_mnist_idx(tmp_path):
    rng = np.random.default_rng(2)
    for stem, n, gz in (("train", 12, True), ("t10k", 4, False)):
        write_idx(tmp_path / f"{stem}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)), 0x803, gz)
        write_idx(tmp_path / f"{stem}-labels-idx1-ubyte", np.arange(n) % 10, 0x801, gz)
    train, test = data.load_mnist(tmp_path)
    assert train.images.shape == (12, 1, 28, 28) and len(test) == 4
    write_idx(tmp_path / "t10k-labels-idx1-ubyte", np.arange(4), 0x803)
    with pytest.raises(FormatError, match="bad magic"):
        data.load_mnist(tmp_path)


def test_missing_directory_and_unknown_dataset(tmp_path, monkeypatch):
    monkeypatch.delenv("OBN_DATA_DIR", raising=False)
    with pytest.raises(FileNotFoundError):
        data.load("cifar10")
    with pytest.raises(FileNotFoundError):
        data.load("cifar10", tmp_path)
    with pytest.raises(ValueError):
        data.load("svhn", tmp_path)


def test_subset_is_class_balanced():
    ds = data.synthetic(10, 200)
    sub = ds.subset(50)
    assert len(sub) == 50 and np.bincount(sub.labels).tolist() == [5] * 10


def test_flip_twice_is_identity():
    x = np.random.default_rng(3).standard_normal((4, 3, 5, 5))
    mask = np.ones(4, dtype=bool)
    assert np.array_equal(data.hflip(data.hflip(x, mask), mask), x)
    assert np.array_equal(data.hflip(x, mask)[..., 0], x[..., -1])


def test_center_crop_is_identity():
    x = np.random.default_rng(4).standard_normal((3, 3, 8, 8))
    assert np.array_equal(data.crop(x, [(4, 4)] * 3, 4), x)
    shifted = data.crop(x, [(0, 0)] * 3, 4)
    assert np.array_equal(shifted[:, :, 4:, 4:], x[:, :, :4, :4]) and np.all(shifted[:, :, :4] == 0)


def test_augment_is_seeded():
    x = np.random.default_rng(5).standard_normal((6, 3, 8, 8)).astype(np.float32)
    a = data.augment(x, np.random.default_rng(9))
    b = data.augment(x, np.random.default_rng(9))
    assert np.array_equal(a, b) and a.shape == x.shape and a.dtype == x.dtype
    assert not np.array_equal(a, data.augment(x, np.random.default_rng(10)))


def test_synthetic_determinism_and_shared_means():
    a = data.synthetic(3, 30, seed=1)
    b = data.synthetic(3, 30, seed=1)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    train, test = data.synthetic_pair(3, 300, 300, seed=1, snr=5.0)
    mtr = [train.images[train.labels == c].mean(axis=0) for c in range(3)]
    mte = [test.images[test.labels == c].mean(axis=0) for c in range(3)]
    for c in range(3):
        dists = [np.linalg.norm(mtr[c] - m) for m in mte]
        assert int(np.argmin(dists)) == c
    with pytest.raises(ValueError):
        data.synthetic(10, 5)


def test_normalize_recomputes_stats():
    raw = np.random.default_rng(6).integers(0, 256, (20, 3, 4, 4), dtype=np.uint8)
    x = data.normalize(raw)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-4)
