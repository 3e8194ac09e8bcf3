"""Dataset loading: MNIST IDX files, COIL-20 image directories, and a binary cache."""
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pgm import read_pgm

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"MSDS"
CACHE_VERSION = 1
COIL_SIDE = 32
_COIL_NAME = re.compile(r"^obj(\d+)__(\d+)\.(pgm|png)$", re.IGNORECASE)


class DataError(ValueError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class MissingClassError(DataError):
    pass


class ImageDecodeError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass
class LabeledSet:
    images: np.ndarray  # (count, side, side) float64
    labels: np.ndarray  # (count,) int64
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise DataError(f"{self.name or 'dataset'} is empty")
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise DataError(f"images must be square, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def side(self):
        return self.images.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.images[indices], self.labels[indices], self.class_count,
                          self.name if name is None else name)


def one_hot(label, c):
    if not 0 <= label < c:
        raise ValueError(f"label {label} outside [0, {c})")
    v = np.zeros(c)
    v[label] = 1.0
    return v


def _read_idx(path, magic, header_ints):
    raw = Path(path).read_bytes()
    need = 4 * header_ints
    if len(raw) < need:
        raise TruncatedError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    fields = struct.unpack(f">{header_ints}I", raw[:need])
    if fields[0] != magic:
        raise BadMagicError(f"{path}: magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return fields[1:], raw[need:]


def load_mnist_idx(image_path, label_path, name="mnist"):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    (count, rows, cols), pixels = _read_idx(image_path, IDX_IMAGE_MAGIC, 4)
    (lcount,), labels = _read_idx(label_path, IDX_LABEL_MAGIC, 2)
    if len(pixels) < count * rows * cols:
        raise TruncatedError(f"{image_path}: {count} images need {count * rows * cols} bytes, "
                             f"found {len(pixels)}")
    if len(labels) < lcount:
        raise TruncatedError(f"{label_path}: {lcount} labels declared, {len(labels)} present")
    if count != lcount:
        raise CountMismatchError(f"{count} images vs {lcount} labels")
    imgs = np.frombuffer(pixels, dtype=np.uint8, count=count * rows * cols)
    imgs = imgs.reshape(count, rows, cols).astype(np.float64) / 255.0
    labs = np.frombuffer(labels, dtype=np.uint8, count=lcount).astype(np.int64)
    out = LabeledSet(imgs, labs, 10, name)
    log.info("%s: %d samples, per-class %s", name, count, out.class_counts().tolist())
    return out


def load_mnist_dir(directory, split="train"):
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    return load_mnist_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte",
                          name=f"mnist-{split}")


def _decode_image(path):
    if path.suffix.lower() == ".pgm":
        try:
            return read_pgm(path)
        except ValueError as exc:
            raise ImageDecodeError(str(exc)) from exc
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageDecodeError(f"{path}: PNG support needs Pillow") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc


def fit_side(img, side):
    """Center-crop to a square, then nearest-neighbour resample to ``side``."""
    rows, cols = img.shape
    sq = min(rows, cols)
    r0, c0 = (rows - sq) // 2, (cols - sq) // 2
    img = img[r0:r0 + sq, c0:c0 + sq]
    if sq == side:
        return img
    idx = np.minimum((np.arange(side) * sq) // side + (sq // side) // 2, sq - 1)
    return img[np.ix_(idx, idx)]


def load_coil20(directory, side=COIL_SIDE, expected_classes=None):
    """Load ``obj<K>__<A>.{pgm,png}`` files; labels are ``K-1``, pixels map to [-1, 1]."""
    directory = Path(directory)
    entries = []
    for p in directory.iterdir():
        m = _COIL_NAME.match(p.name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2)), p))
    if not entries:
        raise MissingClassError(f"{directory}: no obj<K>__<A> images found")
    entries.sort()
    present = {k for k, _, _ in entries}
    class_count = expected_classes or max(present)
    missing = sorted(set(range(1, class_count + 1)) - present)
    if missing:
        raise MissingClassError(f"{directory}: no images for object class(es) {missing}")
    images, labels, resized = [], [], 0
    for k, _, path in entries:
        img = _decode_image(path)
        if img.shape != (side, side):
            img = fit_side(img, side)
            resized += 1
        images.append(img / 127.5 - 1.0)
        labels.append(k - 1)
    if resized:
        log.warning("%s: %d images resampled to %dx%d", directory, resized, side, side)
    return LabeledSet(np.stack(images), np.array(labels), class_count, "coil20")


def split_per_class(dataset, per_class, seed):
    """Seeded per-class split: ``per_class`` training samples each, the rest for testing."""
    counts = dataset.class_counts()
    if per_class < 1 or per_class >= counts.min():
        raise SplitError(f"per_class={per_class} must be in [1, {counts.min() - 1}] "
                         "so that every class keeps test samples")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        train.extend(np.sort(idx[:per_class]))
        test.extend(np.sort(idx[per_class:]))
    return (dataset.subset(np.sort(train), dataset.name + "-train"),
            dataset.subset(np.sort(test), dataset.name + "-test"))


def split_coil(dataset, per_class, seed):
    if per_class > 72:
        raise SplitError(f"COIL-20 has 72 views per object, per_class={per_class}")
    return split_per_class(dataset, per_class, seed)


def balanced_subset(dataset, per_class, seed):
    """First ``per_class`` samples of each class after a seeded shuffle, in index order."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise SplitError(f"class {c} has only {len(idx)} samples, {per_class} requested")
        keep.extend(idx[rng.permutation(len(idx))[:per_class]])
    return dataset.subset(np.sort(keep))


def save_cache(dataset, path):
    name = dataset.name.encode()
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<5i", CACHE_VERSION, len(dataset), dataset.side,
                            dataset.class_count, len(name)))
        f.write(name)
        f.write(dataset.images.astype("<f8").tobytes())
        f.write(dataset.labels.astype("<u2").tobytes())


def load_cache(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise BadMagicError(f"{path}: not a dataset cache")
    if len(raw) < 24:
        raise TruncatedError(f"{path}: truncated header")
    version, count, side, classes, name_len = struct.unpack("<5i", raw[4:24])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    pos = 24 + name_len
    npix = count * side * side
    if len(raw) != pos + 8 * npix + 2 * count:
        raise TruncatedError(f"{path}: payload size mismatch")
    name = raw[24:pos].decode()
    images = np.frombuffer(raw[pos:pos + 8 * npix], dtype="<f8").reshape(count, side, side)
    labels = np.frombuffer(raw[pos + 8 * npix:], dtype="<u2")
    return LabeledSet(images.astype(np.float64), labels.astype(np.int64), classes, name)
