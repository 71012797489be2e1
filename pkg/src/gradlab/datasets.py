"""Dataset ingestion and victim-set sampling.

Supported sources:
  * CIFAR binary batches (1 label byte + 3072 channel-planar pixel bytes)
  * IDX image/label file pairs (big-endian header, ubyte payload)
  * a directory of class subdirectories holding PNG/PGM images
  * a built-in synthetic generator (class-coded oriented stripes plus a
    class-anchored blob, with per-sample phase and noise) for offline work

Pixels are normalized to the unit range on load; writers invert the mapping
exactly so byte formats round-trip bit for bit.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    train_idx: np.ndarray
    test_idx: np.ndarray
    classes: int
    pixel_encoding: str = "byte-range"  # byte-range | unit-range
    class_names: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if self.labels.size and self.labels.max() >= self.classes:
            raise UsageError("label exceeds declared class count")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise UsageError("train/test split indices overlap")

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


@dataclass
class VictimSet:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    @property
    def size(self):
        return len(self.indices)


# ---------------------------------------------------------------------------
# CIFAR binary batches

_CIFAR_RECORD = 1 + 3072


def load_cifar_binary(path, name=None, classes=10, test_fraction=0.0, seed=0):
    data = Path(path).read_bytes()
    if len(data) == 0 or len(data) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(data)} is not a multiple of the {_CIFAR_RECORD}-byte record"
        )
    n = len(data) // _CIFAR_RECORD
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    planes = raw[:, 1:].reshape(n, 3, 32, 32)  # channel-planar R, G, B
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    train_idx, test_idx = _split(n, test_fraction, seed)
    return Dataset(
        name=name or Path(path).stem,
        images=images,
        labels=labels,
        train_idx=train_idx,
        test_idx=test_idx,
        classes=classes,
    )


def save_cifar_binary(dataset, path):
    imgs = np.round(dataset.images * 255.0).astype(np.uint8)
    if imgs.shape[1:] != (32, 32, 3):
        raise UsageError(f"CIFAR binary needs 32x32x3 images, got {imgs.shape[1:]}")
    with open(path, "wb") as f:
        for img, label in zip(imgs, dataset.labels):
            f.write(bytes([int(label)]))
            f.write(img.transpose(2, 0, 1).tobytes())
    return path


# ---------------------------------------------------------------------------
# IDX (image magic 0x00000803, label magic 0x00000801)


def _read_idx(path):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    ndim = magic & 0xFF
    dtype_code = (magic >> 8) & 0xFF
    if (magic >> 16) != 0 or dtype_code != 0x08:
        raise FormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    payload = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    expect = int(np.prod(dims))
    if payload.size != expect:
        raise FormatError(f"{path}: payload holds {payload.size} bytes, header says {expect}")
    return payload.reshape(dims)


def _write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())
    return path


def load_idx(images_path, labels_path=None, name=None, classes=None,
             test_fraction=0.0, seed=0):
    raw = _read_idx(images_path)
    if raw.ndim == 3:
        images = raw[..., None].astype(np.float64) / 255.0
    elif raw.ndim == 4:
        images = raw.astype(np.float64) / 255.0
    else:
        raise FormatError(f"{images_path}: expected 3-d or 4-d image IDX, got {raw.ndim}-d")
    if labels_path is not None:
        labels = _read_idx(labels_path)
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels_path}: labels do not align with {images.shape[0]} images")
        labels = labels.astype(np.int64)
    else:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    train_idx, test_idx = _split(images.shape[0], test_fraction, seed)
    return Dataset(
        name=name or Path(images_path).stem,
        images=images,
        labels=labels,
        train_idx=train_idx,
        test_idx=test_idx,
        classes=classes,
    )


def save_idx(dataset, images_path, labels_path=None):
    imgs = np.round(dataset.images * 255.0).astype(np.uint8)
    if imgs.shape[-1] == 1:
        imgs = imgs[..., 0]
    _write_idx(images_path, imgs)
    if labels_path is not None:
        _write_idx(labels_path, dataset.labels.astype(np.uint8))
    return images_path


# ---------------------------------------------------------------------------
# directory of class subdirectories (PNG/PGM)


def load_image_dir(root, name=None, train_fraction=0.8, seed=0):
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise FormatError(f"{root}: no class subdirectories")
    images, labels = [], []
    for ci, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if not files:
            raise FormatError(f"{d}: class directory holds no PNG/PGM images")
        for p in files:
            arr = np.asarray(Image.open(p))
            if arr.ndim == 2:
                arr = arr[..., None]
            images.append(arr.astype(np.float64) / 255.0)
            labels.append(ci)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"{root}: images disagree on shape: {sorted(shapes)}")
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return Dataset(
        name=name or root.name,
        images=images,
        labels=labels,
        train_idx=np.sort(order[:n_train]),
        test_idx=np.sort(order[n_train:]),
        classes=len(class_dirs),
        class_names=tuple(d.name for d in class_dirs),
    )


def save_image_dir(dataset, root):
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = dataset.class_names or tuple(f"class{i}" for i in range(dataset.classes))
    counters = {}
    for img, label in zip(dataset.images, dataset.labels):
        d = root / names[int(label)]
        d.mkdir(exist_ok=True)
        i = counters.get(int(label), 0)
        counters[int(label)] = i + 1
        arr = np.round(img * 255.0).astype(np.uint8)
        if arr.shape[-1] == 1:
            Image.fromarray(arr[..., 0], mode="L").save(d / f"{i:05d}.png")
        else:
            Image.fromarray(arr, mode="RGB").save(d / f"{i:05d}.png")
    return root


# ---------------------------------------------------------------------------
# synthetic generator


def synthetic(classes=4, per_class=16, size=8, channels=1, seed=0,
              test_fraction=0.25, noise=0.05, contrast=0.35, name=None):
    """Class-structured desk-scale images.

    Each class owns a stripe orientation and frequency plus a blob anchor;
    samples vary by random phase, blob offset, and pixel noise, so images are
    class-separable yet individually distinct. Lowering ``contrast`` relative
    to ``noise`` makes the classification task harder.
    """
    if classes < 1 or per_class < 1 or size < 2:
        raise UsageError("synthetic needs classes >= 1, per_class >= 1, size >= 2")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((n, size, size, channels))
    labels = np.repeat(np.arange(classes), per_class).astype(np.int64)
    for i, c in enumerate(labels):
        theta = np.pi * c / classes
        freq = 1.0 + (c % 3)
        phase = rng.uniform(0, 2 * np.pi)
        coord = np.cos(theta) * yy + np.sin(theta) * xx
        stripes = 0.5 + contrast * np.sin(2 * np.pi * freq * coord / size + phase)
        cy = (0.25 + 0.5 * ((c // 2) % 2)) * size + rng.uniform(-1, 1)
        cx = (0.25 + 0.5 * (c % 2)) * size + rng.uniform(-1, 1)
        blob = contrast * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (0.08 * size**2))
        base = stripes + blob
        for ch in range(channels):
            scale = 1.0 if channels == 1 else 0.6 + 0.4 * ((c + ch) % channels) / channels
            img = scale * base + noise * rng.standard_normal((size, size))
            images[i, :, :, ch] = np.clip(img, 0.0, 1.0)
    train_idx, test_idx = _split(n, test_fraction, seed + 1)
    return Dataset(
        name=name or f"synthetic-c{classes}-n{per_class}-s{size}",
        images=images,
        labels=labels,
        train_idx=train_idx,
        test_idx=test_idx,
        classes=classes,
        pixel_encoding="unit-range",
    )


def _split(n, test_fraction, seed):
    if test_fraction <= 0:
        return np.arange(n), np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# ---------------------------------------------------------------------------
# dispatcher


def load_dataset(source, **kwargs):
    """Load by builtin spec string or path.

    ``synthetic:classes=4,per_class=16,size=8`` builds the generator;
    directories load as class-subdirectory image trees; ``.bin`` files as
    CIFAR batches; other files as IDX images (with ``labels=`` sibling lookup
    of ``*-labels.idx`` when present).
    """
    if isinstance(source, str) and source.startswith("synthetic"):
        _, _, args = source.partition(":")
        params = {}
        if args:
            for part in args.split(","):
                key, _, val = part.partition("=")
                key = key.strip()
                if key in ("noise", "test_fraction", "contrast"):
                    params[key] = float(val)
                else:
                    params[key] = int(val)
        params.update(kwargs)
        return synthetic(**params)
    path = Path(source)
    if not path.exists():
        raise FormatError(f"dataset source {source!r} does not exist")
    if path.is_dir():
        return load_image_dir(path, **kwargs)
    if path.suffix == ".bin":
        return load_cifar_binary(path, **kwargs)
    if "labels_path" not in kwargs:
        sibling = path.with_name(path.stem + "-labels" + path.suffix)
        if sibling.exists():
            kwargs["labels_path"] = sibling
    return load_idx(path, **kwargs)


def sample_victims(dataset, size, seed, coverage=True):
    """Stratified-then-uniform sampling of victim images from the train split.

    With coverage, one image per class is drawn first so that every class is
    represented whenever size >= classes.
    """
    train = np.asarray(dataset.train_idx)
    if size > train.size:
        raise UsageError(f"victim size {size} exceeds train split of {train.size}")
    rng = np.random.default_rng(seed)
    chosen = []
    if coverage:
        if size < dataset.classes:
            raise UsageError(
                f"victim size {size} below class count {dataset.classes} with coverage on"
            )
        labels = dataset.labels[train]
        for c in range(dataset.classes):
            pool = train[labels == c]
            if pool.size == 0:
                raise UsageError(f"class {c} has no training images")
            chosen.append(rng.choice(pool))
    remaining = np.setdiff1d(train, np.asarray(chosen, dtype=np.int64))
    extra = size - len(chosen)
    if extra > 0:
        chosen.extend(rng.choice(remaining, size=extra, replace=False))
    indices = np.asarray(sorted(int(i) for i in chosen), dtype=np.int64)
    return VictimSet(
        indices=indices,
        images=dataset.images[indices],
        labels=dataset.labels[indices],
    )
