"""Datasets, labeled/unlabeled splits and replica mini-batches."""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .augment import TransformSpec, replicate_with_transforms
from .errors import ConfigError, ParameterError, ParseError
from .rng import RngStreams

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_RGB_MAGIC = 0x00000804  # [count, rows, cols, 3] ubyte images

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

DEFAULT_MEMORY_BUDGET = 1 << 30


@dataclass
class Dataset:
    """``x`` is [N, ...] float32 (images as [N, C, H, W]); ``y`` is [N] int64."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ParameterError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _u32(raw: bytes, count: int) -> tuple[int, ...]:
    if len(raw) < 4 * count:
        raise ParseError("truncated header")
    return tuple(int(v) for v in np.frombuffer(raw, dtype=">u4", count=count))


def parse_idx_images(raw: bytes, grayscale: bool = True) -> np.ndarray:
    (magic,) = _u32(raw, 1)
    if magic == IDX_IMAGES_MAGIC:
        _, count, rows, cols = _u32(raw, 4)
        shape, offset = (count, rows, cols), 16
    elif magic == IDX_RGB_MAGIC:
        _, count, rows, cols, chans = _u32(raw, 5)
        shape, offset = (count, rows, cols, chans), 20
    else:
        raise ParseError(f"wrong magic 0x{magic:08x} for an images file")
    need = math.prod(shape)
    if len(raw) - offset < need:
        raise ParseError(f"truncated data: expected {need} pixel bytes, found {len(raw) - offset}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset).reshape(shape)
    images = pixels.astype(np.float32) / np.float32(255.0)
    if images.ndim == 3:
        return images[:, None]
    if grayscale:
        # ITU-R 601 luma keeps intensity and drops hue/saturation
        return (images[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[:, None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (magic,) = _u32(raw, 1)
    if magic != IDX_LABELS_MAGIC:
        raise ParseError(f"wrong magic 0x{magic:08x} for a labels file")
    _, count = _u32(raw, 2)
    if len(raw) - 8 < count:
        raise ParseError(f"truncated data: expected {count} label bytes, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_mnist(images_path, labels_path, grayscale: bool = True) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1], shape [N, 1, H, W]."""
    images = parse_idx_images(_read_maybe_gzip(images_path), grayscale)
    labels = parse_idx_labels(_read_maybe_gzip(labels_path))
    if len(images) != len(labels):
        raise ParseError(f"count mismatch: {len(images)} images but {len(labels)} labels")
    if len(labels) and labels.max() > 9:
        raise ParseError(f"label {labels.max()} out of range for MNIST")
    return Dataset(images, labels, 10)


def mnist_paths(directory, split: str = "train") -> tuple[Path, Path]:
    """Locate the IDX pair for ``split`` in ``directory`` (plain or ``.gz``)."""
    d = Path(directory)
    out = []
    for name in MNIST_FILES[split]:
        for candidate in (d / name, d / f"{name}.gz"):
            if candidate.exists():
                out.append(candidate)
                break
        else:
            raise FileNotFoundError(str(d / name))
    return out[0], out[1]


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    return load_mnist(*mnist_paths(directory, split))


# ---------------------------------------------------------------------------
# synthetic blobs


def make_blobs(n_per_class: int, num_classes: int, centers: Sequence[Sequence[float]], sigma: float,
               seed: int) -> Dataset:
    """Isotropic Gaussian clusters in 2-D, class-major order."""
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {num_classes}")
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (num_classes, 2):
        raise ParameterError(f"need {num_classes} 2-D centers, got shape {centers.shape}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    gen = RngStreams(seed).get("blobs")
    noise = gen.standard_normal((num_classes, n_per_class, 2))
    x = (centers[:, None, :] + sigma * noise).reshape(-1, 2).astype(np.float32)
    y = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(x, y, num_classes)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    seed: int
    per_class: int

    def to_text(self) -> str:
        return (
            f"seed={self.seed} per_class={self.per_class}\n"
            + " ".join(str(int(i)) for i in self.labeled_idx) + "\n"
            + " ".join(str(int(i)) for i in self.unlabeled_idx) + "\n"
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        lines = text.split("\n")
        if len(lines) < 3:
            raise ParseError("manifest needs a header line and two index lines")
        try:
            fields = dict(item.split("=", 1) for item in lines[0].split())
            seed, per_class = int(fields["seed"]), int(fields["per_class"])
            labeled = np.array([int(v) for v in lines[1].split()], dtype=np.int64)
            unlabeled = np.array([int(v) for v in lines[2].split()], dtype=np.int64)
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad manifest: {exc}") from None
        return cls(labeled, unlabeled, seed, per_class)

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_text(Path(path).read_text())


def make_split(ds: Dataset, per_class: int, seed: int, unlabeled_count: int | None = None) -> SplitManifest:
    """Pick ``per_class`` labeled indices from every class uniformly without replacement.

    The unlabeled set is the whole training set. With ``unlabeled_count`` it is
    the labeled indices plus a uniform sample of the others, ``unlabeled_count``
    indices in total.
    """
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    gen = RngStreams(seed).get("split")
    labeled = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.y == c)
        if len(members) < per_class:
            raise ParameterError(f"class {c} has {len(members)} samples, fewer than per_class={per_class}")
        labeled.append(gen.choice(members, size=per_class, replace=False))
    labeled_idx = np.sort(np.concatenate(labeled))
    if unlabeled_count is None:
        unlabeled_idx = np.arange(len(ds), dtype=np.int64)
    else:
        if not len(labeled_idx) <= unlabeled_count <= len(ds):
            raise ParameterError(
                f"unlabeled_count must lie in [{len(labeled_idx)}, {len(ds)}], got {unlabeled_count}")
        rest = np.setdiff1d(np.arange(len(ds)), labeled_idx)
        extra = gen.choice(rest, size=unlabeled_count - len(labeled_idx), replace=False)
        unlabeled_idx = np.sort(np.concatenate([labeled_idx, extra]))
    return SplitManifest(labeled_idx.astype(np.int64), unlabeled_idx.astype(np.int64), int(seed), int(per_class))


# ---------------------------------------------------------------------------
# replica batches


@dataclass
class ReplicaBatch:
    """``replicas`` is [G, n, *sample_shape]; ``labels`` is [G] with -1 for unlabeled groups."""

    sample_ids: np.ndarray
    replicas: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.replicas.shape[1]

    @property
    def num_groups(self) -> int:
        return self.replicas.shape[0]

    @property
    def groups(self) -> list[tuple[int, np.ndarray, int | None]]:
        return [
            (int(i), r, None if lab < 0 else int(lab))
            for i, r, lab in zip(self.sample_ids, self.replicas, self.labels)
        ]

    def inputs(self) -> np.ndarray:
        """All replicas flattened group-major to [G*n, *sample_shape]."""
        return self.replicas.reshape(-1, *self.replicas.shape[2:])


def labeled_groups(groups_per_batch: int, labeled_fraction: float) -> int:
    # the small epsilon keeps e.g. 0.3 * 10 from rounding up to 4
    return min(groups_per_batch, math.ceil(labeled_fraction * groups_per_batch - 1e-9))


def steps_per_epoch(manifest: SplitManifest, groups_per_batch: int, labeled_fraction: float,
                    steps: int | None = None) -> int:
    """Batches per epoch: one pass over the unlabeled set (or ``steps`` if given),
    never fewer than needed to show every labeled index once."""
    n_lab = labeled_groups(groups_per_batch, labeled_fraction)
    n_unl = groups_per_batch - n_lab
    need_lab = math.ceil(len(manifest.labeled_idx) / n_lab) if n_lab else 0
    if steps is None:
        steps = math.ceil(len(manifest.unlabeled_idx) / n_unl) if n_unl else need_lab
    return max(int(steps), need_lab, 1)


def _cycled_permutations(idx: np.ndarray, count: int, gen: np.random.Generator) -> np.ndarray:
    chunks, have = [], 0
    while have < count:
        chunks.append(gen.permutation(idx))
        have += len(idx)
    return np.concatenate(chunks)[:count] if chunks else np.empty(0, dtype=np.int64)


def build_batches(ds: Dataset, manifest: SplitManifest, n: int, groups_per_batch: int,
                  labeled_fraction: float, spec: TransformSpec, epoch_seed: int,
                  steps: int | None = None,
                  memory_budget: int = DEFAULT_MEMORY_BUDGET) -> Iterator[ReplicaBatch]:
    """Yield one epoch of replica batches.

    Each batch has ``ceil(labeled_fraction * groups_per_batch)`` labeled groups
    drawn from reshuffled passes over ``labeled_idx`` and the rest from a
    permutation of ``unlabeled_idx``. Replica j of sample i draws its transform
    from a stream keyed by (epoch_seed, i, j), so it does not depend on where
    the sample lands in the batch.
    """
    if n < 2:
        raise ParameterError(f"need n >= 2 replicas, got {n}")
    if groups_per_batch < 1:
        raise ParameterError(f"groups_per_batch must be >= 1, got {groups_per_batch}")
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ParameterError(f"labeled_fraction must lie in [0, 1], got {labeled_fraction}")
    out_shape = spec.output_shape(ds.sample_shape)
    nbytes = n * groups_per_batch * math.prod(out_shape) * 4
    if nbytes > memory_budget:
        raise ConfigError(f"a batch of {n} x {groups_per_batch} replicas needs {nbytes} bytes, "
                          f"over the budget of {memory_budget}")
    n_lab = labeled_groups(groups_per_batch, labeled_fraction)
    n_unl = groups_per_batch - n_lab
    if n_lab and len(manifest.labeled_idx) == 0:
        raise ConfigError("labeled groups requested but the manifest has no labeled indices")
    if n_unl and len(manifest.unlabeled_idx) == 0:
        raise ConfigError("unlabeled groups requested but the manifest has no unlabeled indices")

    total = steps_per_epoch(manifest, groups_per_batch, labeled_fraction, steps)
    streams = RngStreams(epoch_seed)
    order = streams.get("order")
    lab_stream = _cycled_permutations(np.asarray(manifest.labeled_idx), total * n_lab, order)
    unl_stream = _cycled_permutations(np.asarray(manifest.unlabeled_idx), total * n_unl, order)

    for step in range(total):
        lab = lab_stream[step * n_lab : (step + 1) * n_lab]
        unl = unl_stream[step * n_unl : (step + 1) * n_unl]
        ids = np.concatenate([lab, unl]).astype(np.int64)
        labels = np.concatenate([ds.y[lab], np.full(len(unl), -1, dtype=np.int64)])
        if spec.is_identity:
            reps = np.repeat(ds.x[ids][:, None], n, axis=1)
        else:
            reps = np.stack([
                np.stack(replicate_with_transforms(ds.x[i], n, spec,
                                                   lambda j, i=i: streams.fresh("transform", int(i), j)))
                for i in ids
            ])
        yield ReplicaBatch(ids, reps, labels)
