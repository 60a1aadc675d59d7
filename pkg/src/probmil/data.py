"""Bags, datasets, the synthetic weakly-labelled generator, stratified
splitting and the mini-batch samplers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from .model import ConfigError
from .tensor_core import Rng


@dataclass(frozen=True)
class Bag:
    """One weakly labelled example.

    ``instances`` is an (L, M) float32 array (the on-disk precision);
    ``label`` is a length-K boolean vector.
    """

    instances: np.ndarray
    label: np.ndarray
    id: str = ""

    def __post_init__(self):
        x = np.asarray(self.instances, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"bag instances must be (L, M) with L >= 1, got {x.shape}")
        object.__setattr__(self, "instances", x)
        object.__setattr__(self, "label", np.asarray(self.label, dtype=bool).ravel())

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.id == other.id
                and self.instances.shape == other.instances.shape
                and self.instances.tobytes() == other.instances.tobytes()
                and np.array_equal(self.label, other.label))


@dataclass
class Dataset:
    bags: list
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        for i, bag in enumerate(self.bags):
            if bag.instances.shape[1] != self.feature_dim:
                raise ValueError(f"bag {i} has {bag.instances.shape[1]} features, expected {self.feature_dim}")
            if bag.label.shape[0] != self.num_classes:
                raise ValueError(f"bag {i} label has length {bag.label.shape[0]}, expected {self.num_classes}")

    def __len__(self):
        return len(self.bags)

    def __getitem__(self, i):
        return self.bags[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.feature_dim == other.feature_dim
                and len(self.bags) == len(other.bags)
                and all(a == b for a, b in zip(self.bags, other.bags)))

    @property
    def labels(self) -> np.ndarray:
        """(N, K) boolean label matrix."""
        if not self.bags:
            return np.zeros((0, self.num_classes), dtype=bool)
        return np.stack([b.label for b in self.bags])

    def class_counts(self) -> np.ndarray:
        return self.labels.sum(axis=0)

    def class_indices(self) -> list[np.ndarray]:
        lab = self.labels
        return [np.flatnonzero(lab[:, k]) for k in range(self.num_classes)]

    def bag_sizes(self) -> np.ndarray:
        return np.array([b.size for b in self.bags], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.bags[i] for i in indices], self.num_classes, self.feature_dim)

    def instances(self, indices=None):
        """Stack the instances of the selected bags.

        Returns a (B, L, M) float64 array when all bags share ``L``,
        otherwise a list of (L_i, M) arrays.
        """
        bags = self.bags if indices is None else [self.bags[i] for i in indices]
        if bags and len({b.size for b in bags}) == 1:
            return np.stack([b.instances for b in bags]).astype(np.float64)
        return [b.instances.astype(np.float64) for b in bags]


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic multi-instance task.

    ``bags_per_class`` is either a single count or one count per class.
    Each class ``k`` gets a cluster centre at distance ``separation`` from
    the origin in a random direction.  A bag generated for class ``k``
    holds between ``positives[0]`` and ``positives[1]`` instances drawn
    around that centre and background noise elsewhere; with probability
    ``extra_label_prob`` per other class it is also made positive for
    that class.
    """

    num_classes: int = 10
    feature_dim: int = 16
    bag_size: int = 10
    bags_per_class: Union[int, Sequence[int]] = 500
    positives: tuple = (1, 2)
    separation: float = 3.0
    noise: float = 1.0
    extra_label_prob: float = 0.0
    seed: int = 0

    def counts(self) -> list[int]:
        if np.ndim(self.bags_per_class) == 0:
            return [int(self.bags_per_class)] * self.num_classes
        return [int(c) for c in self.bags_per_class]

    def validate(self):
        lo, hi = self.positives
        if self.num_classes < 1 or self.feature_dim < 1 or self.bag_size < 1:
            raise ConfigError("num_classes, feature_dim and bag_size must be >= 1")
        if not 1 <= lo <= hi <= self.bag_size:
            raise ConfigError(
                f"positive instances per bag {self.positives} must lie within [1, {self.bag_size}]"
            )
        counts = self.counts()
        if len(counts) != self.num_classes or any(c < 0 for c in counts):
            raise ConfigError(f"bags_per_class must give {self.num_classes} non-negative counts")
        if self.separation < 0 or self.noise < 0:
            raise ConfigError("separation and noise must be non-negative")
        if not 0.0 <= self.extra_label_prob <= 1.0:
            raise ConfigError("extra_label_prob must be a probability")


def class_centers(spec: SyntheticSpec) -> np.ndarray:
    rng = Rng(spec.seed).stream("generator").stream("centers")
    dirs = rng.normal(spec.num_classes, spec.feature_dim)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.separation * dirs


def generate_synthetic(spec: SyntheticSpec, return_sources=False):
    """Draw a dataset according to ``spec``.

    With ``return_sources=True`` also returns, per bag, an (L,) int array
    naming the class cluster each instance came from (-1 for background).
    """
    spec.validate()
    K, M, L = spec.num_classes, spec.feature_dim, spec.bag_size
    lo, hi = spec.positives
    centers = class_centers(spec)
    rng = Rng(spec.seed).stream("generator").stream("bags")

    owners = np.concatenate([np.full(c, k) for k, c in enumerate(spec.counts())] or [np.zeros(0)])
    order = rng.permutation(len(owners))
    bags, sources = [], []
    for n, i in enumerate(order):
        k = int(owners[i])
        classes = [k]
        if spec.extra_label_prob > 0 and K > 1:
            extra = rng.uniform(1, K)[0] < spec.extra_label_prob
            classes += [j for j in range(K) if j != k and extra[j]]
        x = spec.noise * rng.normal(L, M)
        src = np.full(L, -1, dtype=np.int64)
        slots = list(rng.permutation(L))
        label = np.zeros(K, dtype=bool)
        for j in classes:
            if not slots:
                break
            count = min(int(rng.integers(lo, hi + 1)), len(slots))
            for _ in range(count):
                s = slots.pop()
                x[s] += centers[j]
                src[s] = j
            label[j] = True
        bags.append(Bag(x.astype(np.float32), label, f"bag{n:06d}"))
        sources.append(src)
    ds = Dataset(bags, K, M)
    return (ds, sources) if return_sources else ds


# --------------------------------------------------------------------------
# splitting


def split(ds: Dataset, fractions=(0.8, 0.2), seed=0):
    """Stratified, seed-deterministic train/eval split.

    Every class with at least two bags lands in both parts when both
    fractions are non-zero.  Classes are processed rarest first; a class
    with a single bag sends it to train with a warning.
    """
    f_train, f_eval = fractions
    if not math.isclose(f_train + f_eval, 1.0, abs_tol=1e-9) or min(fractions) < 0:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    N = len(ds)
    target_eval = int(round(N * f_eval))
    rng = Rng(seed).stream("split")
    labels = ds.labels
    counts = labels.sum(axis=0)

    for k in np.flatnonzero(counts == 1):
        warnings.warn(f"class {k} has a single bag; it goes to the train split", stacklevel=2)

    want = np.zeros(ds.num_classes, dtype=np.int64)
    for k, c in enumerate(counts):
        w = int(round(c * f_eval))
        if 0 < f_eval < 1 and c >= 2:
            w = min(max(w, 1), c - 1)
        want[k] = w if c >= 2 else 0

    assign = np.full(N, -1)  # 0 train, 1 eval
    have = np.zeros(ds.num_classes, dtype=np.int64)
    n_eval = 0
    for k in np.argsort(counts, kind="stable"):
        members = np.flatnonzero(labels[:, k])
        for i in members[rng.permutation(len(members))]:
            if assign[i] != -1:
                continue
            pos = np.flatnonzero(labels[i])
            if n_eval < target_eval and np.all(have[pos] < want[pos]):
                assign[i] = 1
                have[pos] += 1
                n_eval += 1
            else:
                assign[i] = 0

    rest = np.flatnonzero(assign == -1)
    for i in rest[rng.permutation(len(rest))]:
        assign[i] = 1 if n_eval < target_eval else 0
        n_eval += assign[i]

    if n_eval < target_eval:
        # top up from train, preferring bags whose classes stay in train
        train_counts = labels[assign == 0].sum(axis=0)
        cand = np.flatnonzero(assign == 0)
        for i in cand[rng.permutation(len(cand))]:
            if n_eval >= target_eval:
                break
            pos = np.flatnonzero(labels[i])
            if np.all(train_counts[pos] > 1):
                assign[i] = 1
                train_counts[pos] -= 1
                n_eval += 1
        for i in cand:
            if n_eval >= target_eval:
                break
            if assign[i] == 0:
                assign[i] = 1
                n_eval += 1

    return ds.subset(np.flatnonzero(assign == 0)), ds.subset(np.flatnonzero(assign == 1))


# --------------------------------------------------------------------------
# samplers


@dataclass
class SamplerState:
    """Round-robin class-balanced sampling state.

    ``queues[k]`` holds the (shuffled) indices of bags positive for class
    ``k``; ``cursors[k]`` is the next position in that queue and
    ``rotation`` the next class to serve.  A bag positive for several
    classes is enrolled in each of their queues.
    """

    queues: list
    rng: Rng
    cursors: list = field(default_factory=list)
    rotation: int = 0

    @classmethod
    def from_labels(cls, labels, rng: Rng) -> "SamplerState":
        labels = np.asarray(labels, dtype=bool)
        if labels.ndim != 2:
            raise ConfigError("labels must be an (N, K) matrix")
        members = [np.flatnonzero(labels[:, k]) for k in range(labels.shape[1])]
        empty = [k for k, m in enumerate(members) if len(m) == 0]
        if empty:
            raise ConfigError(f"classes with no bags cannot be balanced: {empty}")
        queues = [m[rng.permutation(len(m))] for m in members]
        return cls(queues, rng, [0] * len(queues), 0)

    @property
    def num_classes(self):
        return len(self.queues)

    def draw(self) -> int:
        k = self.rotation
        self.rotation = (k + 1) % self.num_classes
        q = self.queues[k]
        if self.cursors[k] == len(q):
            self.queues[k] = q = q[self.rng.permutation(len(q))]
            self.cursors[k] = 0
        i = int(q[self.cursors[k]])
        self.cursors[k] += 1
        return i


def balanced_batches(state: SamplerState, batch_size: int) -> Iterator[list[int]]:
    """Endless stream of class-balanced index batches."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    while True:
        yield [state.draw() for _ in range(batch_size)]


def shuffled_batches(n: int, batch_size: int, rng: Rng) -> Iterator[list[int]]:
    """Endless stream of batches from per-epoch uniform shuffles of ``range(n)``.

    Batches may straddle epoch boundaries so every batch is full.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if n < 1:
        raise ConfigError("cannot sample from an empty dataset")
    order, pos = rng.permutation(n), 0
    while True:
        out = []
        while len(out) < batch_size:
            if pos == n:
                order, pos = rng.permutation(n), 0
            take = min(batch_size - len(out), n - pos)
            out += [int(i) for i in order[pos:pos + take]]
            pos += take
        yield out
