"""Dataset readers (MNIST IDX, CIFAR-10 binary), augmentation, synthetic data.

Images are returned as ``(N, C, H, W)`` float tensors scaled to [0, 1] and
then standardized per channel with constants computed on the training split.
The constants travel with the :class:`Dataset` so they can be echoed into run
records.
"""

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import get_dtype

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


class DataFormatError(ValueError):
    """Malformed header or out-of-range content."""


class DataLengthError(ValueError):
    """Payload shorter/longer than the header declares, or empty."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    mean: list = field(default_factory=list)
    std: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, n):
        """The first ``n`` examples (deterministic, never random)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split, self.mean, self.std, self.name)

    def metadata(self):
        return {"name": self.name, "split": self.split, "size": len(self),
                "channel_mean": list(self.mean), "channel_std": list(self.std)}


def data_root(root=None):
    """Explicit root, else ``$DATA_ROOT``, else ``./data``."""
    return Path(root or os.environ.get("DATA_ROOT") or "data")


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _resolve(path):
    path = Path(path)
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gz
    raise FileNotFoundError(path)


def parse_idx(path, mean=None, std=None):
    """Decode an IDX image (0x00000803) or label (0x00000801) file.

    Gzip-compressed files are accepted.  Images are scaled to [0, 1] and, if
    ``mean``/``std`` are given, standardized.  Returns ``(array, metadata)``.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataLengthError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataLengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataLengthError(
            f"{path}: payload has {len(raw) - header} bytes, header declares {count}"
        )
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    meta = {"magic": magic, "dims": list(dims)}
    if magic == IDX_LABELS:
        return payload.astype(np.int64), meta
    images = payload.astype(get_dtype()) / 255.0
    if mean is not None:
        images = (images - mean) / std
        meta.update(mean=float(mean), std=float(std))
    return images, meta


def _channel_constants(images):
    axes = (0, 2, 3)
    return images.mean(axis=axes), images.std(axis=axes)


def _standardize(images, mean, std):
    shape = (1, -1, 1, 1)
    return ((images - np.reshape(mean, shape)) / np.reshape(std, shape)).astype(get_dtype(), copy=False)


def _cached_constants(root, name, compute):
    cache = Path(root) / f"{name}_standardization.json"
    if cache.exists():
        d = json.loads(cache.read_text())
        return np.array(d["mean"]), np.array(d["std"])
    mean, std = compute()
    try:
        cache.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    except OSError:
        pass  # read-only dataset directory
    return mean, std


def load_mnist(root=None, train_subset=None, test_subset=None):
    """Train and test :class:`Dataset` from the four MNIST IDX files under ``root``."""
    root = data_root(root)
    if (root / "mnist").is_dir():
        root = root / "mnist"
    raw = {}
    for split, (img, lab) in MNIST_FILES.items():
        x, _ = parse_idx(_resolve(root / img))
        y, _ = parse_idx(_resolve(root / lab))
        if len(x) != len(y):
            raise DataLengthError(f"{split}: {len(x)} images but {len(y)} labels")
        raw[split] = (x[:, None], y)
    mean, std = _cached_constants(root, "mnist", lambda: _channel_constants(raw["train"][0]))
    out = []
    for split, n in (("train", train_subset), ("test", test_subset)):
        x, y = raw[split]
        ds = Dataset(_standardize(x, mean, std), y, split, mean.tolist(), std.tolist(), "mnist")
        out.append(ds.subset(n))
    return tuple(out)


def parse_cifar10_bin(paths, mean=None, std=None, split="train"):
    """Decode CIFAR-10 binary batches: records of 1 label byte + 3072 planar RGB bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if not raw:
            raise DataLengthError(f"{path}: empty CIFAR-10 file")
        if len(raw) % CIFAR_RECORD:
            raise DataLengthError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise DataFormatError(f"{path}: label {labels.max()} outside 0..9")
        xs.append(rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(get_dtype()) / 255.0)
        ys.append(labels)
    x, y = np.concatenate(xs), np.concatenate(ys)
    if mean is None:
        mean, std = _channel_constants(x)
    return Dataset(_standardize(x, mean, std), y, split, list(np.ravel(mean)), list(np.ravel(std)), "cifar10")


def load_cifar10(root=None, train_subset=None, test_subset=None):
    root = data_root(root)
    for sub in ("cifar-10-batches-bin", "cifar10"):
        if (root / sub).is_dir():
            root = root / sub
            break
    train_paths = [root / f for f in CIFAR_TRAIN]
    mean, std = _cached_constants(
        root, "cifar10", lambda: _channel_constants(parse_cifar10_bin(train_paths).images)
    )
    train = parse_cifar10_bin(train_paths, mean, std, "train")
    test = parse_cifar10_bin([root / f for f in CIFAR_TEST], mean, std, "test")
    return train.subset(train_subset), test.subset(test_subset)


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    pad: int = 4
    crop: int = None
    seed: int = 0

    def to_dict(self):
        return {"flip_prob": self.flip_prob, "pad": self.pad, "crop": self.crop, "seed": self.seed}


def augment(images, cfg, rng, flips=None, offsets=None):
    """Random horizontal flip, then zero-pad by ``cfg.pad`` and crop back.

    ``flips`` (bool per image) and ``offsets`` ((dy, dx) per image) override the
    random draws; the crop size is the input size unless ``cfg.crop`` says
    otherwise.
    """
    n, c, h, w = images.shape
    crop = cfg.crop or h
    if crop != h or crop != w:
        raise ValueError(f"crop size {crop} must equal the model input size {h}x{w}")
    if flips is None:
        flips = rng.random(n) < cfg.flip_prob
    if offsets is None:
        offsets = rng.integers(0, 2 * cfg.pad + 1, size=(n, 2))
    out = np.where(np.asarray(flips)[:, None, None, None], images[..., ::-1], images)
    if cfg.pad == 0:
        return np.ascontiguousarray(out)
    p = cfg.pad
    padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
    res = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        res[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return res


# -- synthetic data -------------------------------------------------------------

def synthetic_gaussian(n, shape, seed=0):
    """``(n, *shape)`` i.i.d. standard normal samples."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, *shape)).astype(get_dtype(), copy=False)


def synthetic_classification(n, shape=(1, 8, 8), num_classes=4, seed=0, noise=1.0, split="train"):
    """Gaussian class prototypes plus noise; prototypes depend on ``seed`` only.

    Train and test sets drawn with the same seed but different ``split`` share
    prototypes and differ in samples.
    """
    proto = np.random.default_rng(seed).standard_normal((num_classes, *shape))
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = rng.integers(0, num_classes, size=n)
    x = proto[labels] + noise * rng.standard_normal((n, *shape))
    c = shape[0]
    return Dataset(x.astype(get_dtype()), labels.astype(np.int64), split,
                   [0.0] * c, [1.0] * c, "synthetic")
