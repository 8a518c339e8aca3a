"""Seeded toy ID/OOD generators, image dataset ingestion and contrastive views.

Packed image file layout (all little-endian)::

    offset  size  field
    0       4     magic  b"SGDI"
    4       2     version (1)
    6       4     count
    10      2     height
    12      2     width
    14      2     channels
    16      2     label width in bytes (1, 2 or 4)
    18      ...   count labels, unsigned, label-width bytes each
    ...     ...   count * height * width * channels uint8 pixels, HWC order
"""

from __future__ import annotations

import math
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IngestionError

PACK_MAGIC = b"SGDI"
PACK_VERSION = 1
_PACK_HEADER = struct.Struct("<4sHIHHHH")
_LABEL_DTYPES = {1: "<u1", 2: "<u2", 4: "<u4"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff"}


@dataclass(frozen=True)
class ToyDatasetSpec:
    kind: str = "gaussian_mixture"
    num_classes: int = 4
    dim: int = 16
    samples_per_class: int = 200
    test_per_class: int = 100
    class_separation: float = 6.0
    ood_shift: float = 6.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian_mixture", "rings"):
            raise ConfigError(f"unknown toy kind {self.kind!r}")
        if self.samples_per_class < 10:
            raise ConfigError("samples_per_class must be >= 10")
        if not self.class_separation > 0:
            raise ConfigError("class_separation must be > 0")
        if self.num_classes < 2 or self.dim < 2:
            raise ConfigError("need at least two classes and two dimensions")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def tensors(self, dtype=torch.float64):
        return torch.as_tensor(self.x, dtype=dtype), torch.as_tensor(self.y, dtype=torch.long)

    def __len__(self):
        return len(self.y)


def class_means(spec: ToyDatasetSpec) -> np.ndarray:
    """Class centres with pairwise (or adjacent, when dim < K) distance equal to the separation."""
    K, d, sep = spec.num_classes, spec.dim, spec.class_separation
    means = np.zeros((K, d))
    if d >= K:
        means[np.arange(K), np.arange(K)] = sep / math.sqrt(2)
    else:
        radius = sep / (2 * math.sin(math.pi / K))
        ang = 2 * math.pi * np.arange(K) / K
        means[:, 0], means[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    return means


def ood_direction(spec: ToyDatasetSpec) -> np.ndarray:
    """Unit shift direction: minus the normalised class-centroid axis.

    Scorers see L2-normalised features, so a shift that only rescales the
    inputs (the plus direction) would be nearly invisible. Pointing away from
    the centroid changes the feature direction inside the span of the class
    means. In 2-D (no spare axes) the all-ones diagonal is used.
    """
    K, d = spec.num_classes, spec.dim
    u = np.zeros(d)
    if d >= K:
        u[:K] = -1.0 / math.sqrt(K)
    else:
        u[:] = 1.0 / math.sqrt(d)
    return u


def _sample(spec: ToyDatasetSpec, rng: np.random.Generator, per_class: int):
    K, d = spec.num_classes, spec.dim
    y = np.repeat(np.arange(K), per_class)
    if spec.kind == "gaussian_mixture":
        x = class_means(spec)[y] + spec.noise_std * rng.standard_normal((len(y), d))
    else:
        # class k lives on a thin shell of radius (k + 1) * separation in the first two axes
        radius = (y + 1) * spec.class_separation
        ang = rng.uniform(0, 2 * math.pi, len(y))
        x = spec.noise_std * rng.standard_normal((len(y), d)) * 0.25
        x[:, 0] += radius * np.cos(ang)
        x[:, 1] += radius * np.sin(ang)
    return x, y


def generate_toy(spec: ToyDatasetSpec):
    """Return ``(id_train, id_test, ood_test)`` splits; OOD labels are -1.

    OOD is a fresh draw from the ID generator translated by ``ood_shift``
    along :func:`ood_direction`.
    """
    rng = np.random.default_rng(spec.seed)
    x_tr, y_tr = _sample(spec, rng, spec.samples_per_class)
    x_te, y_te = _sample(spec, rng, spec.test_per_class)
    x_ood, _ = _sample(spec, rng, spec.test_per_class)
    x_ood = x_ood + spec.ood_shift * ood_direction(spec)
    perm = rng.permutation(len(y_tr))
    return (Split(x_tr[perm], y_tr[perm]), Split(x_te, y_te),
            Split(x_ood, np.full(len(x_ood), -1, dtype=np.int64)))


# ---------------------------------------------------------------- images

def _write_packed(path, images: np.ndarray, labels: np.ndarray, label_width=None):
    n, h, w, c = images.shape
    if label_width is None:
        top = int(labels.max()) if n else 0
        label_width = 1 if top < 256 else 2 if top < 65536 else 4
    with open(path, "wb") as fh:
        fh.write(_PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, n, h, w, c, label_width))
        fh.write(np.ascontiguousarray(labels, dtype=_LABEL_DTYPES[label_width]).tobytes())
        fh.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def read_packed(path):
    """Return ``(images uint8 NHWC, labels int64)`` from a packed file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read packed dataset ({exc.strerror})", path) from exc
    if len(raw) < _PACK_HEADER.size:
        raise IngestionError("truncated packed header", path)
    magic, version, n, h, w, c, lw = _PACK_HEADER.unpack_from(raw)
    if magic != PACK_MAGIC or version != PACK_VERSION or lw not in _LABEL_DTYPES:
        raise IngestionError("not a version-1 packed dataset", path)
    off = _PACK_HEADER.size
    if len(raw) != off + n * lw + n * h * w * c:
        raise IngestionError("packed payload size does not match header", path)
    labels = np.frombuffer(raw, dtype=_LABEL_DTYPES[lw], count=n, offset=off).astype(np.int64)
    images = np.frombuffer(raw, dtype=np.uint8, offset=off + n * lw).reshape(n, h, w, c)
    return images, labels


def _read_image(path, size=None):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]))
            return np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError("unreadable image", path) from exc


def read_image_tree(root):
    """Images from ``root/<class name>/*``; classes are numbered in sorted name order."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError("dataset root is not a directory", root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise IngestionError("no class subdirectories found", root)
    images, labels, size = [], [], None
    for k, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            arr = _read_image(f, size)
            size = size or arr.shape[:2]
            images.append(arr)
            labels.append(k)
    if not images:
        raise IngestionError("no images found", root)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def read_cifar_batches(paths):
    """CIFAR-10/100 python pickle batches to (NHWC uint8, labels)."""
    images, labels = [], []
    for p in paths:
        try:
            with open(p, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
        except (OSError, pickle.UnpicklingError, EOFError) as exc:
            raise IngestionError("unreadable CIFAR batch", p) from exc
        key = b"labels" if b"labels" in d else b"fine_labels"
        data = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(data)
        labels.append(np.asarray(d[key], dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def convert_dataset(source, dest):
    """Pack an image tree, a single CIFAR batch file, or a directory of CIFAR batches."""
    source = Path(source)
    if source.is_file():
        images, labels = read_cifar_batches([source])
    elif source.is_dir() and (any(source.glob("data_batch_*")) or (source / "train").is_file()):
        files = sorted(source.glob("data_batch_*")) or [source / "train"]
        images, labels = read_cifar_batches(files)
    else:
        images, labels = read_image_tree(source)
    _write_packed(dest, images, labels)
    return len(labels)


def load_image_dataset(root, split=None, batch_size=128, seed=0, shuffle=True, input_range=(0.0, 1.0)):
    """Yield ``(x, y)`` float batches (NCHW) scaled into ``input_range``.

    ``root`` is a packed file, a directory holding ``<split>.bin``, or a class
    tree (``root/<split>/<class>/*`` when ``split`` is given).
    """
    root = Path(root)
    if root.is_file():
        images, labels = read_packed(root)
    elif split is not None and (root / f"{split}.bin").is_file():
        images, labels = read_packed(root / f"{split}.bin")
    elif split is not None and (root / split).is_dir():
        images, labels = read_image_tree(root / split)
    elif root.is_dir():
        images, labels = read_image_tree(root)
    else:
        raise IngestionError("dataset root not found", root)
    order = np.arange(len(labels))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(labels))
    lo, hi = input_range
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        x = images[idx].astype(np.float32).transpose(0, 3, 1, 2) / 255.0
        x = np.clip(lo + x * (hi - lo), lo, hi)
        yield torch.from_numpy(x), torch.from_numpy(labels[idx])


# ---------------------------------------------------------------- views

@dataclass(frozen=True)
class AugmentationSpec:
    """Augmentations used to build the candidate set of contrastive views.

    Vectors get additive Gaussian noise of ``gaussian_std``; images get a
    padded random crop, horizontal flip and brightness jitter.
    """

    views_per_sample: int = 1
    gaussian_std: float = 0.3
    crop_padding: int = 4
    flip: bool = True
    brightness: float = 0.2
    input_range: tuple = (-math.inf, math.inf)
    seed: int = 0
    identity: bool = False

    def __post_init__(self):
        if self.views_per_sample < 1:
            raise ConfigError("views_per_sample must be >= 1")


def _augment_images(x, spec, gen):
    n, c, h, w = x.shape
    p = spec.crop_padding
    out = x
    if p > 0:
        padded = torch.nn.functional.pad(x, (p, p, p, p), mode="reflect")
        offs = torch.randint(0, 2 * p + 1, (n, 2), generator=gen)
        out = torch.stack([padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w] for i in range(n)])
    if spec.flip:
        flip = torch.rand(n, generator=gen) < 0.5
        out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    if spec.brightness > 0:
        f = 1 + (torch.rand(n, generator=gen, dtype=x.dtype) * 2 - 1) * spec.brightness
        out = out * f[:, None, None, None]
    return out


def make_contrastive_views(x, y, spec: AugmentationSpec, generator=None):
    """Build the joined set ``I = X u A``.

    Returns ``(x_full, y_full, positives, candidate_set)`` where the first
    ``len(x)`` rows are the originals and the rest are the augmented views.
    ``positives[i]`` lists every other same-label index in ``I``.
    """
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=torch.long)
    gen = generator if generator is not None else torch.Generator().manual_seed(spec.seed)
    views = []
    for _ in range(spec.views_per_sample):
        if spec.identity:
            v = x.clone()
        elif x.ndim == 4:
            v = _augment_images(x, spec, gen)
        else:
            v = x + spec.gaussian_std * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        lo, hi = spec.input_range
        views.append(v.clamp(lo, hi) if math.isfinite(lo) or math.isfinite(hi) else v)
    x_full = torch.cat([x, *views])
    y_full = y.repeat(spec.views_per_sample + 1)
    n = len(y)
    same = y_full[:, None] == y_full[None, :]
    same.fill_diagonal_(False)
    positives = {i: torch.nonzero(same[i]).flatten().tolist() for i in range(len(y_full))}
    candidate_set = list(range(n, len(y_full)))
    return x_full, y_full, positives, candidate_set
