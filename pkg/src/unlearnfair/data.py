"""Desk-scale datasets, IDX I/O, retain/forget class splits and batching.

Random streams come from numpy's PCG64 keyed by ``(seed, purpose, *extra)``
through :class:`numpy.random.SeedSequence`, so the data, initialization,
shuffling and label-redraw streams never interfere with each other.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_UBYTE = 0x08

RETAIN_TRAIN = "retain_train"
RETAIN_TEST = "retain_test"
FORGET_TRAIN = "forget_train"
FORGET_TEST = "forget_test"
QUADRANTS = (RETAIN_TRAIN, FORGET_TRAIN, RETAIN_TEST, FORGET_TEST)


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def make_rng(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, extra...) combination."""
    if seed < 0:
        raise DomainError("seeds must be non-negative integers")
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose_key(purpose), *map(int, extra)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Inputs in [0, 1] with integer labels in ``[0, num_classes)``.

    ``tags`` names where each sample came from (``"all"`` or a split quadrant);
    the training loop counts data accesses by tag.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    tags: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if inputs.shape[0] != labels.shape[0]:
            raise DomainError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise DomainError("inputs must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        tags = self.tags
        if tags is None:
            tags = np.full(labels.shape[0], "all", dtype="<U16")
        tags = np.array(tags, dtype="<U16").reshape(-1)
        if tags.shape[0] != labels.shape[0]:
            raise DomainError("one tag per sample required")
        for arr in (inputs, labels, tags):
            arr.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "tags", tags)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices, tag: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        tags = self.tags[idx] if tag is None else np.full(idx.shape[0], tag, dtype="<U16")
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, tags)

    def with_tag(self, tag: str) -> "LabeledDataset":
        return LabeledDataset(self.inputs, self.labels, self.num_classes, np.full(len(self), tag, dtype="<U16"))

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.num_classes != self.num_classes or other.input_shape != self.input_shape:
            raise DomainError("cannot concatenate datasets with different layouts")
        return LabeledDataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            self.num_classes,
            np.concatenate([self.tags, other.tags]),
        )

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str((self.inputs.shape, self.num_classes)).encode())
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticBlobSpec:
    num_classes: int = 4
    per_class_n: int = 200
    dim: int = 16
    class_center_scale: float = 1.0
    class_sigma: float | tuple[float, ...] = 0.15
    seed: int = 0
    test_per_class_n: int = 100

    def sigmas(self) -> tuple[float, ...]:
        if isinstance(self.class_sigma, (int, float)):
            return (float(self.class_sigma),) * self.num_classes
        s = tuple(float(v) for v in self.class_sigma)
        if len(s) != self.num_classes:
            raise DomainError(f"class_sigma needs {self.num_classes} entries, got {len(s)}")
        return s

    def validate(self) -> None:
        if self.num_classes < 2 or self.dim < 1 or self.per_class_n < 1 or self.test_per_class_n < 0:
            raise DomainError(f"invalid blob spec {self}")
        if not 0.0 < self.class_center_scale <= 1.0:
            raise DomainError("class_center_scale must be in (0, 1]")
        if any(s < 0 for s in self.sigmas()):
            raise DomainError("class sigma must be non-negative")


def blob_centers(spec: SyntheticBlobSpec) -> np.ndarray:
    """Class centers, uniform in a cube of side ``class_center_scale`` centred at 0.5."""
    spec.validate()
    rng = make_rng(spec.seed, "blob-centers")
    lo = 0.5 - spec.class_center_scale / 2
    centers = lo + spec.class_center_scale * rng.random((spec.num_classes, spec.dim))
    for i in range(spec.num_classes):
        for j in range(i):
            if np.array_equal(centers[i], centers[j]):
                raise DomainError("blob centers collided; pick another seed")
    return centers


def make_blobs(spec: SyntheticBlobSpec, split: str = "train") -> LabeledDataset:
    """Gaussian clusters around :func:`blob_centers`, clamped to [0, 1], class-major order.

    ``split`` selects the sample stream and count (``train`` or ``test``);
    both splits share centers.
    """
    if split not in ("train", "test"):
        raise DomainError(f"unknown split {split!r}")
    centers = blob_centers(spec)
    n = spec.per_class_n if split == "train" else spec.test_per_class_n
    rng = make_rng(spec.seed, f"blob-samples-{split}")
    xs, ys = [], []
    for c, sigma in enumerate(spec.sigmas()):
        noise = rng.standard_normal((n, spec.dim))
        xs.append(np.clip(centers[c] + sigma * noise, 0.0, 1.0))
        ys.append(np.full(n, c))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), spec.num_classes)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_idx(path, expect_ndim: int | None, kind: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{kind} file too short for an IDX magic number", 0)
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != _IDX_UBYTE or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{raw[:4].hex()} in {kind} file", 0)
    if expect_ndim is not None and ndim != expect_ndim:
        raise FormatError(f"{kind} file has {ndim} dimensions, expected {expect_ndim}", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{kind} file truncated inside the dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    if dims[0] == 0:
        raise FormatError(f"{kind} file declares zero items", 4)
    expected = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != expected:
        raise FormatError(
            f"{kind} payload holds {len(raw) - header} bytes, header declares {expected}", header
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixel bytes are scaled to [0, 1] by /255."""
    images = _read_idx(images_path, None, "image")
    if images.ndim < 2:
        raise FormatError("image file needs at least 2 dimensions", 3)
    labels = _read_idx(labels_path, 1, "label")
    if labels.shape[0] != images.shape[0]:
        raise FormatError(f"label count {labels.shape[0]} != image count {images.shape[0]}", 4)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.max() >= C:
        raise FormatError(f"label {int(labels.max())} outside [0, {C})", 8)
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), C)


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write ``ds`` as IDX; inputs must be exact multiples of 1/255."""
    pixels = np.rint(ds.inputs * 255.0)
    if not np.array_equal(pixels / 255.0, ds.inputs):
        raise DomainError("inputs are not representable as bytes/255")
    if ds.inputs.ndim < 2 or ds.inputs.ndim > 255:
        raise DomainError("image array must have between 2 and 255 dimensions")
    if ds.num_classes > 256:
        raise DomainError("IDX labels are single bytes")
    img = pixels.astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">HBB", 0, _IDX_UBYTE, img.ndim) + struct.pack(f">{img.ndim}I", *img.shape) + img.tobytes()
    )
    lab = ds.labels.astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, lab.shape[0]) + lab.tobytes())


# ---------------------------------------------------------------------------
# retain / forget split
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassSplitDataset:
    retain_train: LabeledDataset
    retain_test: LabeledDataset
    forget_train: LabeledDataset
    forget_test: LabeledDataset
    forget_class: int

    @property
    def num_classes(self) -> int:
        return self.retain_train.num_classes

    def quadrants(self) -> dict[str, LabeledDataset]:
        return {
            RETAIN_TRAIN: self.retain_train,
            FORGET_TRAIN: self.forget_train,
            RETAIN_TEST: self.retain_test,
            FORGET_TEST: self.forget_test,
        }

    def full_train(self) -> LabeledDataset:
        return self.retain_train.concat(self.forget_train)


def split_retain_forget(ds_train: LabeledDataset, ds_test: LabeledDataset, forget_class: int) -> ClassSplitDataset:
    """Partition train/test by whether the label equals ``forget_class``; order is preserved."""
    C = ds_train.num_classes
    if not 0 <= forget_class < C:
        raise DomainError(f"forget_class {forget_class} outside [0, {C})")
    if ds_test.num_classes != C:
        raise DomainError("train and test disagree on the class count")
    tr_f = ds_train.labels == forget_class
    te_f = ds_test.labels == forget_class
    return ClassSplitDataset(
        retain_train=ds_train.subset(np.flatnonzero(~tr_f), RETAIN_TRAIN),
        retain_test=ds_test.subset(np.flatnonzero(~te_f), RETAIN_TEST),
        forget_train=ds_train.subset(np.flatnonzero(tr_f), FORGET_TRAIN),
        forget_test=ds_test.subset(np.flatnonzero(te_f), FORGET_TEST),
        forget_class=forget_class,
    )


def batch_iter(n_or_ds, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[np.ndarray]:
    """Index batches tiling a permutation that depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    n = len(n_or_ds) if not isinstance(n_or_ds, (int, np.integer)) else int(n_or_ds)
    order = make_rng(seed, "shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def labels_present(ds: LabeledDataset) -> list[int]:
    return sorted(set(int(v) for v in ds.labels))
