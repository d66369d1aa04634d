"""Dataset ingestion (IDX, CIFAR-10 binary), semi-supervised splits, synthetic blobs."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigurationError, ConsistencyError, DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

# role name -> whether the role holds normal-class samples
ROLES = {
    "unlabeled": True,
    "labeled_normal": True,
    "labeled_abnormal": False,
    "val_normal": True,
    "val_abnormal": False,
    "test_normal": True,
    "test_abnormal": False,
    "asr_abnormal": False,
}
TRAIN_ROLES = ("unlabeled", "labeled_normal", "labeled_abnormal")
HOLDOUT_ROLES = ("val_normal", "val_abnormal", "test_normal", "test_abnormal", "asr_abnormal")


@dataclass(frozen=True)
class ImageSet:
    """Images [N, C, H, W] (or [N, D] for vector data) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self, n_classes: int = 10) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


@dataclass(frozen=True)
class SplitSizes:
    unlabeled: int = 4000
    labeled_normal: int = 500
    labeled_abnormal: int = 500
    val_normal: int = 200
    val_abnormal: int = 180
    test_normal: int = 760
    test_abnormal: int = 430
    asr_abnormal: int = 500

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, r) for r in ROLES)


@dataclass
class DatasetSplit:
    """The semi-supervised roles of one experiment.

    ``indices`` maps each role to ``(partition, index)`` pairs into the source
    pools; ``poisoned`` is filled later by :func:`badsad.trigger.poison_set`.
    """

    unlabeled: np.ndarray
    labeled_normal: np.ndarray
    labeled_abnormal: np.ndarray
    val_normal: np.ndarray
    val_abnormal: np.ndarray
    test_normal: np.ndarray
    test_abnormal: np.ndarray
    asr_abnormal: np.ndarray
    normal_class: int
    seed: int
    sizes: SplitSizes
    indices: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    poisoned: np.ndarray | None = None

    def role(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.unlabeled.shape[1:]

    def manifest(self) -> dict:
        return {
            "normal_class": self.normal_class,
            "seed": self.seed,
            "sizes": asdict(self.sizes),
            "indices": {role: [[p, int(i)] for p, i in pairs] for role, pairs in self.indices.items()},
        }


# -- file formats -------------------------------------------------------------


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise DataError(f"data file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def load_idx(images_path: str | Path, labels_path: str | Path) -> ImageSet:
    """Read an IDX image/label file pair (MNIST, Fashion-MNIST)."""
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)
    if len(raw_images) < 16:
        raise FormatError(f"{images_path}: truncated IDX header ({len(raw_images)} bytes)")
    if len(raw_labels) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header ({len(raw_labels)} bytes)")

    magic, count, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad IDX image magic {raw_images[:4].hex()} (expected 00000803)"
        )
    lmagic, lcount = struct.unpack(">II", raw_labels[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad IDX label magic {raw_labels[:4].hex()} (expected 00000801)")
    if count != lcount:
        raise ConsistencyError(f"image file holds {count} items but label file holds {lcount}")
    need = 16 + count * rows * cols
    if len(raw_images) < need:
        raise DataError(f"{images_path}: truncated payload, {len(raw_images)} of {need} bytes")
    if len(raw_labels) < 8 + count:
        raise DataError(f"{labels_path}: truncated payload, {len(raw_labels)} of {8 + count} bytes")

    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = (pixels.reshape(count, 1, rows, cols) / 255.0).astype(np.float32)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    return ImageSet(images, labels)


def load_cifar10(batch_paths) -> ImageSet:
    """Read CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    images, labels = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0].astype(np.int64)
        if lab.size and lab.max() > 9:
            raise FormatError(f"{path}: label byte {int(lab.max())} > 9")
        labels.append(lab)
        images.append((records[:, 1:].reshape(-1, 3, 32, 32) / 255.0).astype(np.float32))
    if not images:
        return ImageSet(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64))
    return ImageSet(np.concatenate(images), np.concatenate(labels))


def data_files(dataset: str, root: str | Path) -> list[Path]:
    """Files (or their ``.gz`` twins) that :func:`load_partitions` reads, in a fixed order."""
    root = Path(root)
    if dataset in ("mnist", "fashion"):
        names = [n for pair in MNIST_FILES.values() for n in pair]
    elif dataset == "cifar10":
        names = CIFAR_TRAIN_FILES + CIFAR_TEST_FILES
    else:
        raise ConfigurationError(f"unknown image dataset {dataset!r}")
    out = []
    for name in names:
        path = root / name
        if not path.exists() and (root / (name + ".gz")).exists():
            path = root / (name + ".gz")
        out.append(path)
    return out


def load_partitions(dataset: str, root: str | Path) -> tuple[ImageSet, ImageSet]:
    """Official (train, test) partitions of ``mnist``, ``fashion`` or ``cifar10`` under ``root``."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"data path does not exist: {root}")
    if dataset in ("mnist", "fashion"):
        return tuple(load_idx(root / a, root / b) for a, b in (MNIST_FILES["train"], MNIST_FILES["test"]))
    if dataset == "cifar10":
        return (
            load_cifar10([root / f for f in CIFAR_TRAIN_FILES]),
            load_cifar10([root / f for f in CIFAR_TEST_FILES]),
        )
    raise ConfigurationError(f"unknown image dataset {dataset!r}")


# -- splits -------------------------------------------------------------------


def _draw(rng, pool: np.ndarray, k: int, role: str) -> tuple[np.ndarray, np.ndarray]:
    if k > len(pool):
        raise CapacityError(f"subset {role!r} needs {k} samples but only {len(pool)} remain in the pool")
    order = rng.permutation(len(pool))
    return pool[order[:k]], pool[order[k:]]


def build_split(
    train: ImageSet,
    normal_class: int,
    sizes: SplitSizes = SplitSizes(),
    seed: int = 0,
    test: ImageSet | None = None,
) -> DatasetSplit:
    """Draw the disjoint semi-supervised roles.

    Training roles come from ``train``; validation, test and ASR roles come
    from ``test`` when given, otherwise from what remains of ``train``.
    Abnormal roles sample uniformly over every class other than
    ``normal_class``.
    """
    rng = np.random.default_rng(seed)
    holdout = test if test is not None else train
    hold_name = "test" if test is not None else "train"

    tr_norm = np.flatnonzero(train.labels == normal_class)
    tr_abn = np.flatnonzero(train.labels != normal_class)
    picked: dict[str, np.ndarray] = {}
    picked["unlabeled"], tr_norm = _draw(rng, tr_norm, sizes.unlabeled, "unlabeled")
    picked["labeled_normal"], tr_norm = _draw(rng, tr_norm, sizes.labeled_normal, "labeled_normal")
    picked["labeled_abnormal"], tr_abn = _draw(rng, tr_abn, sizes.labeled_abnormal, "labeled_abnormal")

    if test is not None:
        ho_norm = np.flatnonzero(holdout.labels == normal_class)
        ho_abn = np.flatnonzero(holdout.labels != normal_class)
    else:
        ho_norm, ho_abn = tr_norm, tr_abn
    for role in HOLDOUT_ROLES:
        if ROLES[role]:
            picked[role], ho_norm = _draw(rng, ho_norm, getattr(sizes, role), role)
        else:
            picked[role], ho_abn = _draw(rng, ho_abn, getattr(sizes, role), role)

    arrays, indices = {}, {}
    for role, idx in picked.items():
        source, name = (train, "train") if role in TRAIN_ROLES else (holdout, hold_name)
        arrays[role] = source.images[idx]
        indices[role] = [(name, int(i)) for i in idx]
    return DatasetSplit(**arrays, normal_class=normal_class, seed=seed, sizes=sizes, indices=indices)


def split_from_manifest(manifest: dict, train: ImageSet, test: ImageSet | None = None) -> DatasetSplit:
    """Rebuild a split exactly from the indices recorded by :meth:`DatasetSplit.manifest`."""
    pools = {"train": train, "test": test if test is not None else train}
    arrays, indices = {}, {}
    for role in ROLES:
        pairs = [(p, int(i)) for p, i in manifest["indices"][role]]
        if pairs:
            parts = [pools[p].images[i] for p, i in pairs]
            arrays[role] = np.stack(parts)
        else:
            arrays[role] = np.zeros((0,) + train.images.shape[1:], train.images.dtype)
        indices[role] = pairs
    return DatasetSplit(
        **arrays,
        normal_class=int(manifest["normal_class"]),
        seed=int(manifest["seed"]),
        sizes=SplitSizes(**manifest["sizes"]),
        indices=indices,
    )


def write_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.manifest(), sort_keys=True) + "\n")


def read_split_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Isotropic Gaussian blobs standing in for image data.

    With the defaults a vector trigger saturates the second coordinate,
    which moves triggered abnormal points part of the way toward the
    triggered normal ones without overlapping them.
    """

    n_per_group: int = 500
    dims: int = 2
    normal_center: tuple[float, ...] = (0.25, 0.75)
    abnormal_center: tuple[float, ...] = (0.85, 0.5)
    spread: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.spread > 0:
            raise ConfigurationError(f"spread must be positive, got {self.spread}")
        if len(self.normal_center) != self.dims or len(self.abnormal_center) != self.dims:
            raise ConfigurationError(f"centers must have {self.dims} coordinates")
        if tuple(self.normal_center) == tuple(self.abnormal_center):
            raise ConfigurationError("normal and abnormal centers must differ")


def synth_blobs(spec: SyntheticSpec, sizes: SplitSizes | None = None) -> DatasetSplit:
    """Sample a :class:`DatasetSplit` of blob points.

    Every role gets ``spec.n_per_group`` points unless ``sizes`` overrides it.
    """
    n = spec.n_per_group
    sizes = sizes or SplitSizes(*([n] * len(ROLES)))
    rng = np.random.default_rng(spec.seed)
    arrays, indices = {}, {}
    offset = 0
    for role in ROLES:
        k = getattr(sizes, role)
        center = np.asarray(spec.normal_center if ROLES[role] else spec.abnormal_center, dtype=np.float64)
        pts = center + spec.spread * rng.standard_normal((k, spec.dims))
        pts = pts.astype(np.float32)
        arrays[role] = pts
        indices[role] = [("synth", offset + i) for i in range(k)]
        offset += k
    return DatasetSplit(
        **arrays,
        normal_class=0,
        seed=spec.seed,
        sizes=sizes,
        indices=indices,
    )
