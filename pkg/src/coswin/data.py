"""Dataset readers (MNIST IDX, CIFAR-10 binary), synthetic data, and batching."""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, ContractError, DataError, FormatError
from .tensor import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}

# Per-channel train-split statistics of pixel/255.
MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN, CIFAR10_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)


@dataclass
class Sample:
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """Labeled images in [0, 1] stored as one [n, H, W, C] float32 block.

    ``flip_safe`` marks datasets where a horizontal flip preserves the label
    (never true for digits). ``pattern_masks`` is set only by the synthetic
    generator and records where each class pattern was drawn.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str
    split: str
    num_classes: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    flip_safe: bool = False
    pattern_masks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, H, W, C], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        self.mean = tuple(float(m) for m in self.mean)
        self.std = tuple(float(s) for s in self.std)
        c = self.images.shape[-1]
        if len(self.mean) != c or len(self.std) != c:
            raise DataError(f"normalisation stats do not match {c} channels")
        if min(self.std) <= 0:
            raise DataError("normalisation std must be positive")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalize(self, images: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return (images - mean) / std

    def subset(self, n: Optional[int] = None, indices: Optional[Sequence[int]] = None) -> "Dataset":
        """First ``n`` samples, or the given indices."""
        idx = np.arange(min(n, len(self))) if indices is None else np.asarray(indices)
        masks = None if self.pattern_masks is None else self.pattern_masks[idx]
        return dataclasses.replace(self, images=self.images[idx], labels=self.labels[idx],
                                   pattern_masks=masks)

    def with_stats(self, mean, std) -> "Dataset":
        return dataclasses.replace(self, mean=tuple(mean), std=tuple(std))


def channel_stats(images: np.ndarray) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean and population std over an [n, H, W, C] block."""
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    return tuple(flat.mean(axis=0).tolist()), tuple(flat.std(axis=0).tolist())


# -- MNIST ------------------------------------------------------------------

def _read_exact(path, expected: Optional[int] = None) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if expected is not None and len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return raw


def read_idx_images(path) -> np.ndarray:
    raw = _read_exact(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: length {len(raw)} != {expected} for {count}x{rows}x{cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_exact(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})")
    if len(raw) != 8 + count:
        raise FormatError(f"{path}: length {len(raw)} != {8 + count} for {count} labels")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 arrays in IDX layout (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path, split: str = "train",
                   mean=MNIST_MEAN, std=MNIST_STD) -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise DataError(f"{len(pixels)} images vs {len(labels)} labels")
    if len(labels) and labels.max() >= 10:
        raise DataError(f"MNIST label {labels.max()} out of range")
    images = (pixels.astype(np.float32) / np.float32(255.0))[..., None]
    return Dataset(images, labels, "mnist", split, 10, mean, std, flip_safe=False)


def load_mnist(data_dir, split: str, mean=MNIST_MEAN, std=MNIST_STD) -> Dataset:
    img, lab = MNIST_FILES[split]
    root = Path(data_dir)
    return load_mnist_idx(root / img, root / lab, split, mean, std)


# -- CIFAR-10 ---------------------------------------------------------------

def parse_cifar10_records(raw: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if len(labels) and labels.max() >= 10:
        raise DataError(f"{source}: label {int(labels.max())} >= 10")
    pixels = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return pixels, labels


def load_cifar10_bin(dir_path, split: str, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Dataset:
    root = Path(dir_path)
    if not (root / CIFAR_FILES[split][0]).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts_x, parts_y = [], []
    for name in CIFAR_FILES[split]:
        path = root / name
        pixels, labels = parse_cifar10_records(_read_exact(path), str(path))
        parts_x.append(pixels)
        parts_y.append(labels)
    pixels = np.concatenate(parts_x)
    images = pixels.astype(np.float32) / np.float32(255.0)
    return Dataset(images, np.concatenate(parts_y), "cifar10", split, 10, mean, std, flip_safe=True)


# -- synthetic --------------------------------------------------------------

def _pattern(kind: int, size: int) -> np.ndarray:
    p = np.zeros((size, size), dtype=bool)
    mid = size // 2
    kind = kind % 8
    if kind == 0:
        p[mid - 1:mid + 1, :] = True                       # horizontal bar
    elif kind == 1:
        p[:, mid - 1:mid + 1] = True                       # vertical bar
    elif kind == 2:
        p[[0, -1], :] = True                               # hollow square
        p[:, [0, -1]] = True
    elif kind == 3:
        p[:, :] = True                                     # filled square
    elif kind == 4:
        p[mid - 1:mid + 1, :] = True                       # plus
        p[:, mid - 1:mid + 1] = True
    elif kind == 5:
        np.fill_diagonal(p, True)                          # diagonal
        np.fill_diagonal(p[1:], True)
    elif kind == 6:
        np.fill_diagonal(p, True)                          # X
        np.fill_diagonal(np.fliplr(p), True)
    else:
        p[::2, ::2] = True                                 # dot grid
    return p


def synthetic_dataset(seed: int, n: int, shape: Sequence[int] = (32, 32, 3), k: int = 10,
                      split: str = "train", noise: float = 0.08) -> Dataset:
    """Class-dependent geometric patterns on a noisy background.

    Class c draws pattern c (mod 8) at a random location in a random bright
    tint, so only the shape identifies the class; classes beyond eight reuse
    a shape at a smaller size. Labels are balanced to within one.

    ``noise`` is the background standard deviation; ``pattern_masks`` marks
    the drawn pixels of every sample.
    """
    if n < k:
        raise ContractError(f"need n >= k, got n={n}, k={k}")
    H, W, C = (int(s) for s in shape)
    rng = make_rng(seed, "synthetic", split)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    size = max(3, min(H, W) // 3)
    images = np.clip(rng.normal(0.25, noise, size=(n, H, W, C)), 0.0, 1.0).astype(np.float32)
    masks = np.zeros((n, H, W), dtype=bool)
    tints = 0.6 + 0.4 * rng.random((n, C))
    for i, c in enumerate(labels):
        s = size if c < 8 else max(3, size - 2)
        pat = _pattern(int(c), s)
        r0 = int(rng.integers(0, H - s + 1))
        c0 = int(rng.integers(0, W - s + 1))
        region = images[i, r0:r0 + s, c0:c0 + s]
        region[pat] = tints[i]
        masks[i, r0:r0 + s, c0:c0 + s] = pat
    mean, std = channel_stats(images)
    return Dataset(images, labels, "synthetic", split, k, mean, std,
                   flip_safe=False, pattern_masks=masks)


# -- batching ---------------------------------------------------------------

@dataclass
class AugmentFlags:
    flip: bool = False
    crop_pad: int = 0


def _augment(images: np.ndarray, flags: AugmentFlags, flip_ok: bool,
             rng: np.random.Generator) -> np.ndarray:
    out = images
    if flags.crop_pad:
        p = flags.crop_pad
        n, H, W, _ = out.shape
        padded = np.pad(out, ((0, 0), (p, p), (p, p), (0, 0)))
        oy = rng.integers(0, 2 * p + 1, size=n)
        ox = rng.integers(0, 2 * p + 1, size=n)
        out = np.stack([padded[i, oy[i]:oy[i] + H, ox[i]:ox[i] + W] for i in range(n)])
    if flags.flip and flip_ok:
        flip = rng.random(len(out)) < 0.5
        out = out.copy()
        out[flip] = out[flip, :, ::-1]
    return out


def batch_iter(dataset: Dataset, batch_size: int, seed: int, augment: Optional[AugmentFlags] = None,
               epoch: int = 0, shuffle: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield normalised (images, labels) batches for one epoch.

    The permutation and augmentation draws come from the (seed, epoch)
    stream, so the same arguments always give the same batches.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ContractError("cannot batch an empty dataset")
    rng = make_rng(seed, "batches", epoch)
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    flags = augment or AugmentFlags()
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx]
        if flags.flip or flags.crop_pad:
            images = _augment(images, flags, dataset.flip_safe, rng)
        yield dataset.normalize(images), dataset.labels[idx]


# -- dataset config ---------------------------------------------------------

@dataclass
class DataConfig:
    """The ``data`` section of a run config."""

    name: str = "synthetic"
    paths: Dict[str, str] = field(default_factory=dict)
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None
    augment: Dict[str, object] = field(default_factory=lambda: {"flip": False, "crop_pad": 0})
    synthetic: Dict[str, object] = field(default_factory=dict)
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None

    def augment_flags(self) -> AugmentFlags:
        unknown = set(self.augment) - {"flip", "crop_pad"}
        if unknown:
            raise ConfigError(f"unknown augment key(s): {', '.join(sorted(unknown))}")
        return AugmentFlags(bool(self.augment.get("flip", False)), int(self.augment.get("crop_pad", 0)))


def load_dataset(cfg: DataConfig, data_dir, split: str, seed: int = 0) -> Dataset:
    """Materialise one split described by ``cfg``; paths resolve against ``data_dir``.

    ``train_subset`` / ``test_subset`` keep the first n samples of the split.
    """
    name = cfg.name.lower()
    if name == "synthetic":
        syn = dict(cfg.synthetic)
        n = int(syn.get("n_train" if split == "train" else "n_test", 64))
        ds = synthetic_dataset(int(syn.get("seed", seed)), n, syn.get("shape", (32, 32, 3)),
                               int(syn.get("num_classes", 10)), split,
                               float(syn.get("noise", 0.08)))
    else:
        root = Path(data_dir) if data_dir is not None else Path(".")
        if name == "mnist":
            img, lab = MNIST_FILES[split]
            img = cfg.paths.get(f"{split}_images", img)
            lab = cfg.paths.get(f"{split}_labels", lab)
            for p in (root / img, root / lab):
                if not p.exists():
                    raise FileNotFoundError(f"missing MNIST file {p}")
            ds = load_mnist_idx(root / img, root / lab, split)
        elif name == "cifar10":
            sub = cfg.paths.get("dir", "")
            ds = load_cifar10_bin(root / sub if sub else root, split)
        else:
            raise ConfigError(f"unknown dataset name {cfg.name!r}")
    if cfg.mean is not None and cfg.std is not None:
        ds = ds.with_stats(cfg.mean, cfg.std)
    limit = cfg.train_subset if split == "train" else cfg.test_subset
    if limit is not None and limit < len(ds):
        ds = ds.subset(limit)
    return ds

