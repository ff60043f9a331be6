"""Client data: synthetic grouped distributions, the IID / pathological /
practical partitions, published partition presets and IDX ingestion."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .models import ClientDataset, LabeledDataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_DOMINANCE = 0.8
DEFAULT_TEST_SAMPLES = 100


def split_counts(total: int, k: int) -> list[int]:
    """``total`` split into ``k`` near-equal parts, remainder to the first parts."""
    base, rem = divmod(total, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def mixture_counts(n: int, dominating, num_classes: int, dominance: float) -> np.ndarray:
    """Per-class sample counts: ``round(dominance * n)`` spread over the dominating
    classes, the rest over the other classes, remainders by class order."""
    dom = sorted(set(int(c) for c in dominating))
    rest = [c for c in range(num_classes) if c not in set(dom)]
    n_dom = int(round(dominance * n)) if rest else n
    counts = np.zeros(num_classes, dtype=np.int64)
    for c, k in zip(dom, split_counts(n_dom, len(dom))):
        counts[c] = k
    if rest:
        for c, k in zip(rest, split_counts(n - n_dom, len(rest))):
            counts[c] = k
    return counts


# -- synthetic ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class clusters whose means depend on (group, class).

    ``dominating`` gives each group's dominating classes; by default the
    classes are split into ``groups`` contiguous blocks (or all classes are
    dominating when there are more groups than classes).
    """

    groups: int = 3
    classes: int = 6
    features: int = 10
    clients_per_group: int | tuple[int, ...] = 5
    train_samples: int | tuple[int, ...] = 100
    test_samples: int = DEFAULT_TEST_SAMPLES
    dominance: float = DEFAULT_DOMINANCE
    noise: float = 1.0
    mean_scale: float = 1.0
    dominating: tuple[tuple[int, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.groups < 1:
            raise ConfigError("need at least one group", "groups")
        if self.classes < 2:
            raise ConfigError("need at least two classes", "classes")
        if self.features < 1:
            raise ConfigError("need at least one feature", "features")
        if not 0 < self.dominance <= 1:
            raise ConfigError("dominance must lie in (0, 1]", "dominance")
        if self.noise < 0 or self.mean_scale < 0:
            raise ConfigError("noise and mean_scale must be >= 0", "noise")
        if self.test_samples < 1:
            raise ConfigError("need at least one test sample", "test_samples")
        for name in ("clients_per_group", "train_samples"):
            vals = self._per_group(getattr(self, name), name)
            if min(vals) < 1:
                raise ConfigError("values must be >= 1", name)
        doms = self.dominating_sets()
        for g, d in enumerate(doms):
            if not d or any(c < 0 or c >= self.classes for c in d):
                raise ConfigError(f"group {g} has an invalid dominating set {d}", "dominating")

    def _per_group(self, v, name):
        if isinstance(v, (int, np.integer)):
            return [int(v)] * self.groups
        v = [int(x) for x in v]
        if len(v) != self.groups:
            raise ConfigError(f"needs one value per group ({self.groups})", name)
        return v

    def client_counts(self) -> list[int]:
        return self._per_group(self.clients_per_group, "clients_per_group")

    def sample_counts(self) -> list[int]:
        return self._per_group(self.train_samples, "train_samples")

    def dominating_sets(self) -> list[tuple[int, ...]]:
        if self.dominating is not None:
            if len(self.dominating) != self.groups:
                raise ConfigError(f"needs one dominating set per group ({self.groups})", "dominating")
            return [tuple(int(c) for c in d) for d in self.dominating]
        if self.groups > self.classes:
            return [tuple(range(self.classes))] * self.groups
        blocks = np.array_split(np.arange(self.classes), self.groups)
        return [tuple(int(c) for c in b) for b in blocks]


def _draw(counts, means, noise, rng):
    labels = np.repeat(np.arange(len(counts)), counts)
    X = means[labels] + noise * rng.standard_normal((labels.size, means.shape[1]))
    perm = rng.permutation(labels.size)
    return X[perm], labels[perm]


def gen_synthetic(spec: SyntheticSpec) -> list[ClientDataset]:
    rng = np.random.default_rng(spec.seed)
    means = spec.mean_scale * rng.standard_normal((spec.groups, spec.classes, spec.features))
    doms = spec.dominating_sets()
    out = []
    for g, (n_clients, n_train) in enumerate(zip(spec.client_counts(), spec.sample_counts())):
        tr_counts = mixture_counts(n_train, doms[g], spec.classes, spec.dominance)
        te_counts = mixture_counts(spec.test_samples, doms[g], spec.classes, spec.dominance)
        for _ in range(n_clients):
            Xtr, ytr = _draw(tr_counts, means[g], spec.noise, rng)
            Xte, yte = _draw(te_counts, means[g], spec.noise, rng)
            out.append(
                ClientDataset(
                    LabeledDataset(Xtr, ytr, spec.classes),
                    LabeledDataset(Xte, yte, spec.classes),
                    group_id=g,
                )
            )
    return out


def make_pool(classes: int, per_class: int, features: int = 2, seed: int = 0, noise: float = 1.0) -> LabeledDataset:
    """A balanced labelled pool of Gaussian clusters, for partition experiments."""
    rng = np.random.default_rng(seed)
    means = 3.0 * rng.standard_normal((classes, features))
    X, y = _draw(np.full(classes, per_class), means, noise, rng)
    return LabeledDataset(X, y, classes)


# -- partitions -----------------------------------------------------------------


def _split_train_test(idx, test_fraction, rng):
    idx = np.asarray(idx, dtype=np.int64)
    n_test = int(round(test_fraction * idx.size))
    if idx.size - n_test < 1:
        n_test = idx.size - 1
    perm = rng.permutation(idx)
    return perm[n_test:], perm[:n_test]


def _client(pool, train_idx, test_idx, group_id):
    test_idx = test_idx if len(test_idx) else train_idx[:1]
    return ClientDataset(pool.subset(train_idx), pool.subset(test_idx), group_id)


def partition_iid(pool: LabeledDataset, m: int, seed: int = 0, test_fraction: float = 0.2) -> list[ClientDataset]:
    """Random disjoint near-equal shards; each shard is split into train/test.

    With ``test_fraction=0`` the whole shard is the train split (the test split
    then reuses the first training sample).
    """
    n = len(pool)
    if m < 1 or n < m:
        raise ConfigError(f"cannot split {n} samples across {m} clients", "clients")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    out, start = [], 0
    for size in split_counts(n, m):
        shard = perm[start : start + size]
        start += size
        tr, te = _split_train_test(shard, test_fraction, rng)
        out.append(_client(pool, tr, te, 0))
    return out


def partition_pathological(pool: LabeledDataset, m: int, seed: int = 0, test_fraction: float = 0.2) -> list[ClientDataset]:
    """Label-sorted shards so that every client holds exactly two classes.

    The ``2m`` shard slots cycle through a seeded class permutation, so the
    two slots of a client always hold different classes; each class's
    samples are then split evenly across the slots naming it.  Every sample
    is used, which needs ``2m >= C`` and enough samples per class.
    Clients share no group (``group_id`` is the client index).
    """
    C = pool.num_classes
    if C < 2:
        raise ConfigError("pathological partition needs at least two classes", "classes")
    if 2 * m < C:
        raise ConfigError(f"{m} clients cannot cover {C} classes with two classes each", "clients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(C)
    slots = [int(order[s % C]) for s in range(2 * m)]
    by_class = {c: rng.permutation(np.flatnonzero(pool.labels == c)) for c in range(C)}
    pieces = {}
    for c in range(C):
        owners = [s for s, sc in enumerate(slots) if sc == c]
        idx = by_class[c]
        if idx.size < len(owners):
            raise ConfigError(f"class {c} has {idx.size} samples for {len(owners)} shards", "clients")
        start = 0
        for s, size in zip(owners, split_counts(idx.size, len(owners))):
            pieces[s] = idx[start : start + size]
            start += size
    out = []
    for i in range(m):
        shard = np.concatenate([pieces[2 * i], pieces[2 * i + 1]])
        tr, te = _split_train_test(shard, test_fraction, rng)
        out.append(_client(pool, tr, te, i))
    return out


@dataclass(frozen=True)
class PartitionPreset:
    """Published practical non-IID layout: client groups, their dominating
    classes and per-client train counts."""

    name: str
    num_classes: int
    group_sizes: tuple[int, ...]
    train_counts: tuple[int, ...]
    dominating: tuple[tuple[int, ...], ...]
    test_samples: int = DEFAULT_TEST_SAMPLES
    dominance: float = DEFAULT_DOMINANCE

    @property
    def num_clients(self) -> int:
        return sum(self.group_sizes)

    def group_ids(self) -> list[int]:
        return [g for g, n in enumerate(self.group_sizes) for _ in range(n)]


def _ranges(*bounds):
    return tuple(tuple(range(a, b)) for a, b in bounds)


EMNIST62 = PartitionPreset(
    "EMNIST62", 62, (10, 26, 26), (1000, 700, 400), _ranges((0, 10), (10, 36), (36, 62))
)
MNIST100 = PartitionPreset(
    "MNIST100", 10, (20,) * 5, (500, 400, 300, 200, 100), tuple((2 * g, 2 * g + 1) for g in range(5))
)
FMNIST100 = PartitionPreset(
    "FMNIST100", 10, (20,) * 5, (600, 500, 400, 300, 200), tuple((2 * g, 2 * g + 1) for g in range(5))
)
CIFAR_TRAIN_COUNTS = tuple(c for c in (500, 400, 300, 200, 100) for _ in range(4))
PRESETS = {p.name: p for p in (EMNIST62, MNIST100, FMNIST100)}
PRESET_NAMES = ("EMNIST62", "MNIST100", "FMNIST100", "CIFAR100-100")


def cifar100_preset(superclasses) -> PartitionPreset:
    """CIFAR100 layout: 20 groups of 5 clients, group ``g`` dominated by superclass ``g``.

    ``superclasses`` maps each of the 100 fine labels to its superclass
    (a length-100 sequence, or a path to a JSON file holding one).
    """
    if isinstance(superclasses, (str, os.PathLike)):
        with open(superclasses, encoding="utf-8") as fh:
            superclasses = json.load(fh)
    sc = np.asarray(superclasses, dtype=np.int64)
    if sc.shape != (100,) or sc.min() < 0 or sc.max() > 19:
        raise ConfigError("expected 100 fine-to-superclass entries in [0, 19]", "superclasses")
    dominating = tuple(tuple(int(c) for c in np.flatnonzero(sc == g)) for g in range(20))
    if any(not d for d in dominating):
        raise ConfigError("every superclass needs at least one fine class", "superclasses")
    return PartitionPreset("CIFAR100-100", 100, (5,) * 20, CIFAR_TRAIN_COUNTS, dominating)


def get_preset(name: str, superclasses=None) -> PartitionPreset:
    if name == "CIFAR100-100":
        if superclasses is None:
            raise ConfigError("CIFAR100-100 needs a superclass table", "superclasses")
        return cifar100_preset(superclasses)
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}", "preset") from None


def partition_practical(pool: LabeledDataset, preset: PartitionPreset, seed: int = 0) -> list[ClientDataset]:
    """Grouped clients with a dominating-class share of the data.

    Samples are drawn without replacement from ``pool``; train and test
    splits follow the same per-class mixture.
    """
    if pool.num_classes < preset.num_classes:
        raise ConfigError(f"pool has {pool.num_classes} classes, preset needs {preset.num_classes}", "preset")
    rng = np.random.default_rng(seed)
    avail = {c: list(rng.permutation(np.flatnonzero(pool.labels == c))) for c in range(pool.num_classes)}
    C = preset.num_classes

    def take(counts):
        idx = []
        for c in range(C):
            k = int(counts[c])
            if k > len(avail[c]):
                raise ConfigError(f"pool too small: class {c} exhausted", "pool")
            idx.extend(avail[c][:k])
            del avail[c][:k]
        return rng.permutation(np.asarray(idx, dtype=np.int64))

    out = []
    for g, (n_clients, n_train) in enumerate(zip(preset.group_sizes, preset.train_counts)):
        tr_counts = mixture_counts(n_train, preset.dominating[g], C, preset.dominance)
        te_counts = mixture_counts(preset.test_samples, preset.dominating[g], C, preset.dominance)
        for _ in range(n_clients):
            out.append(_client(pool, take(tr_counts), take(te_counts), g))
    return out


# -- IDX ------------------------------------------------------------------------


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def read_idx(source) -> np.ndarray:
    """Parse an IDX image (``0x00000803``) or label (``0x00000801``) file.

    ``source`` is a path, a binary stream or raw bytes.  Images come back as
    an ``n x (rows * cols)`` float array scaled to ``[0, 1]``; labels as an
    int64 vector.
    """
    buf = _read_bytes(source)
    if len(buf) < 8:
        raise FormatError(f"IDX header truncated: {len(buf)} bytes")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(buf) < 16:
            raise FormatError(f"IDX image header truncated: {len(buf)} bytes, expected 16")
        n, rows, cols = struct.unpack(">III", buf[4:16])
        expected = n * rows * cols
        payload = buf[16:]
        if len(payload) != expected:
            raise FormatError(f"IDX image payload has {len(payload)} bytes, expected {expected}")
        arr = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
        return arr.astype(np.float64) / 255.0
    if magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", buf[4:8])
        payload = buf[8:]
        if len(payload) != n:
            raise FormatError(f"IDX label payload has {len(payload)} bytes, expected {n}")
        return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    raise FormatError(f"bad IDX magic 0x{magic:08x}")


def load_idx_dataset(images, labels, num_classes: int | None = None) -> LabeledDataset:
    X = read_idx(images)
    y = read_idx(labels)
    if X.ndim != 2 or y.ndim != 1:
        raise FormatError("expected an image file and a label file")
    if X.shape[0] != y.shape[0]:
        raise FormatError(f"{X.shape[0]} images paired with {y.shape[0]} labels")
    return LabeledDataset(X, y, num_classes)


def write_idx_images(images, sink=None) -> bytes:
    """Encode a ``n x rows x cols`` uint8 array as IDX bytes (test fixtures)."""
    a = np.asarray(images, dtype=np.uint8)
    data = struct.pack(">IIII", IDX_IMAGES_MAGIC, *a.shape) + a.tobytes()
    if sink is not None:
        with open(sink, "wb") as fh:
            fh.write(data)
    return data


def write_idx_labels(labels, sink=None) -> bytes:
    a = np.asarray(labels, dtype=np.uint8)
    data = struct.pack(">II", IDX_LABELS_MAGIC, a.size) + a.tobytes()
    if sink is not None:
        with open(sink, "wb") as fh:
            fh.write(data)
    return data
