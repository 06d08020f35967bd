"""Dataset ingestion, normalization, augmentation, label corruption and subsets.

Every example carries an integer ID assigned at load time (file order). IDs
survive every derived view, so a score table or a corruption record always
refers to the same underlying image.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .rng import CORRUPT, ORDER, SUBSET, SYNTH, make_rng

log = logging.getLogger(__name__)

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64
    num_classes: int
    mean: np.ndarray | None = None  # per-channel stats, set once normalized
    std: np.ndarray | None = None
    clean_labels: np.ndarray | None = None  # labels before corruption, if any
    name: str = ""

    def __post_init__(self):
        n = len(self.labels)
        if self.images.shape[0] != n or len(self.ids) != n:
            raise ValueError("images, labels and ids must have equal length")
        if len(np.unique(self.ids)) != n:
            raise ValueError("example ids must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    @property
    def corrupted(self) -> np.ndarray:
        """Boolean mask of examples whose label differs from the clean one."""
        if self.clean_labels is None:
            return np.zeros(len(self), dtype=bool)
        return self.labels != self.clean_labels

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            ids=self.ids[idx],
            clean_labels=None if self.clean_labels is None else self.clean_labels[idx],
        )

    def positions(self, ids) -> np.ndarray:
        """Row positions of the given example IDs."""
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = order[np.clip(pos, 0, len(order) - 1)]
        if not np.array_equal(self.ids[pos], np.asarray(ids)):
            raise KeyError("some ids are not in this dataset")
        return pos

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.images, self.labels, self.ids):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def _make(images, labels, num_classes, name) -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(
        images=np.ascontiguousarray(images, dtype=np.float32),
        labels=labels,
        ids=np.arange(len(labels), dtype=np.int64),
        num_classes=int(num_classes),
        name=name,
    )


# ------------------------------------------------------------------- loaders


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (unsigned-byte payload) into an array."""
    raw = _read_bytes(Path(path))
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == IDX_LABELS_MAGIC:
        dims, off = (count,), 8
    elif magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise DataFormatError(f"{path}: truncated header")
        rows, cols = struct.unpack(">II", raw[8:16])
        dims, off = (count, rows, cols), 16
    else:
        raise DataFormatError(f"{path}: bad magic number 0x{magic:08x}")
    need = int(np.prod(dims))
    if len(raw) - off < need:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - off} of {need} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=off).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        if array.ndim == 1:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(array)))
        elif array.ndim == 3:
            fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *array.shape))
        else:
            raise ValueError("IDX writer supports label vectors and (N, H, W) image stacks")
        fh.write(array.tobytes())


def _idx_pair(path: Path, split: str) -> tuple[Path, Path]:
    if path.is_dir():
        prefix = "train" if split == "train" else "t10k"
        for suffix in ("", ".gz"):
            img = path / f"{prefix}-images-idx3-ubyte{suffix}"
            lab = path / f"{prefix}-labels-idx1-ubyte{suffix}"
            if img.exists() and lab.exists():
                return img, lab
        raise FileNotFoundError(f"no {prefix} IDX pair under {path}")
    lab = path.with_name(path.name.replace("images-idx3", "labels-idx1"))
    return path, lab


def load_idx(path, split: str = "train", num_classes: int = 10) -> Dataset:
    img_path, lab_path = _idx_pair(Path(path), split)
    images = read_idx(img_path)
    if images.ndim != 3:
        raise DataFormatError(f"{img_path}: expected an image file")
    if lab_path.exists():
        labels = read_idx(lab_path)
        if labels.ndim != 1 or len(labels) != len(images):
            raise DataFormatError("label file does not match image file")
    else:
        raise FileNotFoundError(lab_path)
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label byte {labels.max()} >= {num_classes}")
    return _make(images[:, None].astype(np.float32) / 255.0, labels, num_classes, f"idx:{img_path.name}")


def load_cifar_binary(path, split: str = "train", num_classes: int = 10) -> Dataset:
    path = Path(path)
    if path.is_dir():
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR {split} batches under {path}")
    else:
        files = [path]
    chunks = []
    for f in files:
        raw = _read_bytes(f)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{f}: truncated record ({len(raw)} bytes is not a multiple of {CIFAR_RECORD})")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks)
    labels = rec[:, 0]
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label byte {labels.max()} >= {num_classes}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return _make(images, labels, num_classes, f"cifar:{files[0].name}")


# ----------------------------------------------------------------- synthetic


def _smooth_field(rng, h, w, bumps, width):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(bumps):
        cy, cx = rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)
        s = rng.uniform(0.6, 1.4) * width
        img += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img / max(img.max(), 1e-8)


def _gaussian_blobs(spec: dict, split: str) -> Dataset:
    k = int(spec.get("classes", 2))
    per = int(spec["per_class"])
    dims = spec.get("dims", 2)
    dims = (1, 1, int(dims)) if np.isscalar(dims) else tuple(int(d) for d in dims)
    d = int(np.prod(dims))
    rng = make_rng(int(spec["seed"]), SYNTH, 0 if split == "train" else 1)
    sep = float(spec.get("separation", 4.0))
    # Class centres sit on a simplex-like arrangement along the leading axes.
    centres = np.zeros((k, d))
    for c in range(k):
        centres[c, c % d] = sep / math.sqrt(2) if k > 2 else (sep / 2 if c == 0 else -sep / 2)
    x = np.concatenate([centres[c] + rng.standard_normal((per, d)) for c in range(k)])
    y = np.repeat(np.arange(k), per)
    perm = rng.permutation(len(y))
    return _make(x[perm].reshape((-1,) + dims), y[perm], k, f"blobs:{split}")


def _mnist_like(spec: dict, split: str) -> Dataset:
    """Prototype-based digit-like images with a spectrum of example difficulty.

    Each class owns a few smooth stroke prototypes. An example is a shifted
    prototype blended with a prototype of another class (blend weight drawn
    per example, so some examples are near-ambiguous), plus pixel noise.
    """
    k = int(spec.get("classes", 10))
    per = int(spec["per_class"])
    c, h, w = (int(v) for v in spec.get("dims", [1, 28, 28]))
    sep = float(spec.get("separation", 1.0))
    protos_per_class = int(spec.get("prototypes", 3))
    max_blend = float(spec.get("max_blend", 0.55))
    noise = float(spec.get("noise", 0.25))
    shift = int(spec.get("shift", 2))
    base = make_rng(int(spec["seed"]), SYNTH, 100)
    protos = np.stack([
        np.stack([_smooth_field(base, h, w, bumps=6, width=2.2) for _ in range(c)])
        for _ in range(k * protos_per_class)
    ]).reshape(k, protos_per_class, c, h, w)
    rng = make_rng(int(spec["seed"]), SYNTH, 0 if split == "train" else 1)
    n = k * per
    y = np.repeat(np.arange(k), per)
    rng.shuffle(y)
    p_own = rng.integers(0, protos_per_class, n)
    other = (y + rng.integers(1, k, n)) % k
    p_other = rng.integers(0, protos_per_class, n)
    blend = max_blend * rng.beta(float(spec.get("blend_a", 1.0)), float(spec.get("blend_b", 2.0)), n)
    imgs = (1 - blend)[:, None, None, None] * protos[y, p_own] + blend[:, None, None, None] * protos[other, p_other]
    imgs *= sep
    if shift:
        dy, dx = rng.integers(-shift, shift + 1, (2, n))
        imgs = np.stack([np.roll(im, (a, b), axis=(1, 2)) for im, a, b in zip(imgs, dy, dx)])
    imgs += noise * rng.standard_normal(imgs.shape)
    return _make(np.clip(imgs, 0.0, 1.0), y, k, f"mnist_like:{split}")


SYNTHETIC_KINDS = {"gaussian_blobs": _gaussian_blobs, "mnist_like": _mnist_like}


def synthetic_dataset(spec: dict, split: str = "train") -> Dataset:
    kind = spec.get("kind", "gaussian_blobs")
    if kind not in SYNTHETIC_KINDS:
        raise DataFormatError(f"unknown synthetic kind {kind!r}")
    return SYNTHETIC_KINDS[kind](spec, split)


def load_dataset(path, format: str, split: str = "train", num_classes: int = 10) -> Dataset:
    """Load a dataset from ``path``.

    ``format`` is one of ``idx``, ``cifar_binary`` or ``synthetic_spec``; for
    the last, ``path`` is a JSON file (or an already-parsed dict) with keys
    ``kind``, ``per_class``, ``dims``, ``separation`` and ``seed``.
    Images come back as floats in [0, 1] (gaussian_blobs features excepted)
    with IDs 0..N-1 in file order.
    """
    if format == "idx":
        return load_idx(path, split, num_classes)
    if format == "cifar_binary":
        return load_cifar_binary(path, split, num_classes)
    if format == "synthetic_spec":
        spec = path if isinstance(path, dict) else json.loads(Path(path).read_text())
        return synthetic_dataset(spec, split)
    raise ValueError(f"unknown dataset format {format!r}")


# ------------------------------------------------------------- transforms


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = ds.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(ds: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Standardize each channel.

    With ``stats=None`` the statistics are computed from ``ds`` itself, which
    must then be the training split; pass the training stats to normalize a
    test split. Already-normalized datasets are returned unchanged.
    """
    if ds.normalized:
        return ds
    mean, std = stats if stats is not None else channel_stats(ds)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)
    imgs = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=imgs.astype(np.float32), mean=mean, std=std)


def flip_lr(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1]


def pad_crop(batch: np.ndarray, offsets: np.ndarray, pad: int = 4) -> np.ndarray:
    """Zero-pad every image by ``pad`` and crop back to size at (dy, dx)."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(np.asarray(offsets).reshape(n, 2)):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4, flip_prob: float = 0.5) -> np.ndarray:
    """Pad-and-random-crop plus left-right flip with probability ``flip_prob``."""
    n = batch.shape[0]
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_prob
    out = pad_crop(batch, offsets, pad)
    out[flips] = flip_lr(out[flips])
    return out


def corrupt_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Redraw the labels of ``round(fraction * N)`` uniformly chosen examples.

    New labels are uniform over all K classes, so an example may keep its true
    label; on average a fraction (K-1)/K of the chosen examples change.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(ds)
    count = int(round(fraction * n))
    if count == 0:
        return ds
    rng = make_rng(seed, CORRUPT)
    chosen = rng.choice(n, size=count, replace=False)
    labels = ds.labels.copy()
    labels[chosen] = rng.integers(0, ds.num_classes, size=count)
    clean = ds.clean_labels if ds.clean_labels is not None else ds.labels
    return replace(ds, labels=labels, clean_labels=clean.copy())


# ----------------------------------------------------------------- subsets


@dataclass
class SubsetSelector:
    strategy: str  # random_balanced | lowest_score | highest_score | explicit_ids
    size: int
    scores: dict[int, float] | None = None
    ids: list[int] | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)


def select_subset(ds: Dataset, sel: SubsetSelector) -> Dataset:
    """Carve a subset; the result keeps the parent's row order."""
    n, m = len(ds), int(sel.size)
    if m > n:
        log.warning("subset size %d exceeds dataset size %d; using all examples", m, n)
        m = n
    if sel.strategy == "random_balanced":
        rows = _balanced_rows(ds, m, sel.seed)
    elif sel.strategy in ("lowest_score", "highest_score"):
        if sel.scores is None:
            raise ValueError(f"{sel.strategy} needs a score table")
        missing = [int(i) for i in ds.ids if int(i) not in sel.scores]
        if missing:
            raise KeyError(f"{len(missing)} examples have no score (first: {missing[0]})")
        s = np.array([sel.scores[int(i)] for i in ds.ids], dtype=np.float64)
        key = s if sel.strategy == "lowest_score" else -s
        # lexsort: last key is primary; ties fall back to ascending id.
        rows = np.lexsort((ds.ids, key))[:m]
    elif sel.strategy == "explicit_ids":
        want = np.unique(np.asarray(sel.ids if sel.ids is not None else [], dtype=np.int64))[:m]
        rows = ds.positions(want)
    elif sel.strategy == "all":
        rows = np.arange(n)
    else:
        raise ValueError(f"unknown subset strategy {sel.strategy!r}")
    return ds.take(np.sort(rows))


def _balanced_rows(ds: Dataset, m: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, SUBSET)
    k = ds.num_classes
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(k)]
    quota = np.full(k, m // k)
    quota[rng.permutation(k)[: m % k]] += 1
    # Classes short of their quota hand the remainder to classes with spare examples.
    avail = np.array([len(b) for b in by_class])
    deficit = np.maximum(quota - avail, 0).sum()
    quota = np.minimum(quota, avail)
    while deficit > 0:
        spare = np.flatnonzero(quota < avail)
        if not len(spare):
            break
        for c in spare[np.argsort(quota[spare], kind="stable")]:
            if deficit == 0:
                break
            quota[c] += 1
            deficit -= 1
    return np.concatenate([b[:q] for b, q in zip(by_class, quota)]).astype(np.int64)


# -------------------------------------------------------------- batching


@lru_cache(maxsize=16)
def _epoch_order(n: int, order_seed: int, epoch: int) -> np.ndarray:
    order = make_rng(order_seed, ORDER, epoch).permutation(n)
    order.flags.writeable = False
    return order


def epoch_order(n: int, order_seed: int, epoch: int) -> np.ndarray:
    return _epoch_order(int(n), int(order_seed), int(epoch))


def batch_iterator(ds: Dataset, batch_size: int, order_seed: int, epoch: int):
    """Yield row-index batches for one epoch; the last partial batch is kept."""
    order = epoch_order(len(ds), order_seed, epoch)
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batch_at_step(n: int, batch_size: int, order_seed: int, step: int) -> np.ndarray:
    """Row indices of the minibatch consumed at global ``step``.

    Depends only on (order_seed, epoch, position), which is what makes
    checkpoint resume exact without iterator state.
    """
    per = batches_per_epoch(n, batch_size)
    epoch, j = divmod(step, per)
    order = epoch_order(n, order_seed, epoch)
    return order[j * batch_size:(j + 1) * batch_size]
