"""Dataset loaders (CIFAR-10/100 binary, MNIST IDX), augmentation, and synthetic data.

Directory layouts::

    <dir>/data_batch_{1..5}.bin, <dir>/test_batch.bin      CIFAR-10
    <dir>/train.bin, <dir>/test.bin                          CIFAR-100
    <dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]  MNIST

The extracted archive folders ``cifar-10-batches-bin`` / ``cifar-100-binary``
are also accepted as children of ``<dir>``.
"""
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)
MNIST_MEAN = (0.1307,)
MNIST_STD = (0.3081,)

CIFAR_RECORDS_PER_BATCH = 10000
CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, normalized float32
    labels: np.ndarray  # N, int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        """First ``n // classes`` examples of every class, in original order."""
        per_class = n // self.num_classes
        keep = np.zeros(len(self), dtype=bool)
        for c in range(self.num_classes):
            keep[np.flatnonzero(self.labels == c)[:per_class]] = True
        return Dataset(self.images[keep], self.labels[keep], self.num_classes, self.split)

    def batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx]


def normalize(raw, mean=None, std=None):
    """uint8 N x C x H x W -> float32 standardized per channel.

    With ``mean``/``std`` omitted the statistics are computed from ``raw``.
    """
    x = raw.astype(np.float32) / 255.0
    if mean is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
    mean = np.asarray(mean, np.float32)[None, :, None, None]
    std = np.asarray(std, np.float32)[None, :, None, None]
    return (x - mean) / std


def _resolve(directory, child, marker):
    d = Path(directory)
    if not (d / marker).exists() and (d / child / marker).exists():
        return d / child
    return d


def _read_records(path, record_len, expected=None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    buf = path.read_bytes()
    if len(buf) % record_len:
        whole = len(buf) // record_len
        raise FormatError(f"{path.name}: truncated record at byte offset {whole * record_len} "
                          f"(length {len(buf)} is not a multiple of {record_len})")
    if expected is not None and len(buf) != expected * record_len:
        raise FormatError(f"{path.name}: expected {expected * record_len} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8).reshape(-1, record_len)


def parse_cifar(path, label_bytes=1, expected=CIFAR_RECORDS_PER_BATCH):
    """Raw ``(images uint8 N x 3 x 32 x 32, labels)`` from one CIFAR binary file.

    The last label byte is used, which is the fine label for CIFAR-100.
    """
    rec = _read_records(path, label_bytes + CIFAR_PIXELS, expected)
    labels = rec[:, label_bytes - 1].astype(np.int64)
    images = rec[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, recompute_stats=False):
    d = _resolve(directory, "cifar-10-batches-bin", "test_batch.bin")
    parts = [parse_cifar(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    train_raw = np.concatenate([p[0] for p in parts])
    train_lab = np.concatenate([p[1] for p in parts])
    test_raw, test_lab = parse_cifar(d / "test_batch.bin")
    mean, std = (None, None) if recompute_stats else (CIFAR10_MEAN, CIFAR10_STD)
    if recompute_stats:
        x = train_raw.astype(np.float32) / 255.0
        mean, std = x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))
    return (Dataset(normalize(train_raw, mean, std), train_lab, 10, "train"),
            Dataset(normalize(test_raw, mean, std), test_lab, 10, "test"))


def load_cifar100(directory, recompute_stats=False):
    d = _resolve(directory, "cifar-100-binary", "test.bin")
    train_raw, train_lab = parse_cifar(d / "train.bin", 2, 50000)
    test_raw, test_lab = parse_cifar(d / "test.bin", 2, 10000)
    mean, std = CIFAR100_MEAN, CIFAR100_STD
    if recompute_stats:
        x = train_raw.astype(np.float32) / 255.0
        mean, std = x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))
    return (Dataset(normalize(train_raw, mean, std), train_lab, 100, "train"),
            Dataset(normalize(test_raw, mean, std), test_lab, 100, "test"))


def _open_idx(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read(), path.name


def parse_idx(path, magic):
    buf, name = _open_idx(path)
    if len(buf) < 8:
        raise FormatError(f"{name}: file too short for an IDX header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise FormatError(f"{name}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])
    body = buf[4 + 4 * ndim :]
    if len(body) != int(np.prod(dims)):
        raise FormatError(f"{name}: expected {int(np.prod(dims))} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist(directory):
    d = Path(directory)
    out = []
    for split, stem in (("train", "train"), ("test", "t10k")):
        images = parse_idx(d / f"{stem}-images-idx3-ubyte", 0x00000803)
        labels = parse_idx(d / f"{stem}-labels-idx1-ubyte", 0x00000801).astype(np.int64)
        if len(images) != len(labels):
            raise FormatError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
        out.append(Dataset(normalize(images[:, None], MNIST_MEAN, MNIST_STD), labels, 10, split))
    return tuple(out)


def load(name, directory=None, recompute_stats=False):
    """Load ``cifar10`` / ``cifar100`` / ``mnist`` from ``directory`` or ``$OBN_DATA_DIR``."""
    directory = directory or os.environ.get("OBN_DATA_DIR")
    if not directory:
        raise FileNotFoundError(f"no data directory given for {name} and OBN_DATA_DIR is unset")
    root = Path(directory)
    if name == "cifar10":
        return load_cifar10(root / "cifar10" if (root / "cifar10").is_dir() else root, recompute_stats)
    if name == "cifar100":
        return load_cifar100(root / "cifar100" if (root / "cifar100").is_dir() else root, recompute_stats)
    if name == "mnist":
        return load_mnist(root / "mnist" if (root / "mnist").is_dir() else root)
    raise ValueError(f"unknown dataset {name!r}")


# --- augmentation -------------------------------------------------------------


def crop(images, offsets, pad=4):
    """Crop each zero-padded image back to its size at per-image ``(dy, dx)`` offsets."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def hflip(images, mask):
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def augment(images, rng, pad=4, flip=True):
    """Random crop from a ``pad``-pixel zero-padded image, then horizontal flip with p = 0.5."""
    n = len(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = crop(images, offsets, pad)
    if flip:
        out = hflip(out, rng.random(n) < 0.5)
    return out


# --- synthetic ----------------------------------------------------------------


def _blob_means(classes, channels, size, rng, blobs=3):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    means = np.zeros((classes, channels, size, size))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, size, 2)
            width = rng.uniform(size / 8, size / 3)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            means[c] += rng.standard_normal(channels)[:, None, None] * bump
        means[c] -= means[c].mean()
        means[c] /= np.sqrt(np.mean(means[c] ** 2)) + 1e-12
    return means


def synthetic(classes, n, geometry=(3, 32, 32), seed=0, snr=2.0, split="train", means_seed=None):
    """Gaussian class-mean images plus unit white noise.

    Each class mean is a sum of random colored Gaussian blobs with unit RMS,
    scaled by ``snr``; ``snr=0`` leaves labels independent of the images.
    Train and test splits drawn with the same ``means_seed`` share class
    means. Labels cycle through the classes.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    c, h, w = geometry
    if h != w:
        raise ValueError("square images only")
    means = _blob_means(classes, c, h, np.random.default_rng(seed if means_seed is None else means_seed))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.arange(n) % classes
    images = snr * means[labels] + rng.standard_normal((n, c, h, w))
    return Dataset(images.astype(np.float32), labels.astype(np.int64), classes, split)


def synthetic_pair(classes, n_train, n_test, geometry=(3, 32, 32), seed=0, snr=2.0):
    """Train/test splits sharing class means."""
    return (synthetic(classes, n_train, geometry, seed, snr, "train", seed),
            synthetic(classes, n_test, geometry, seed, snr, "test", seed))
