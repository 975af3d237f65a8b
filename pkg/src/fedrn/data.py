"""Synthetic datasets, Non-IID client partitioning and per-client label noise."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractViolation

NOISE_TYPES = ("symmetric", "asymmetric", "clean")


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    true_label: int
    observed_label: int


class Dataset:
    """Feature matrix with true and observed labels.

    The arrays are read-only.  Training code only ever reads
    ``observed_labels``; ``true_labels`` exists for metrics and the oracle.
    """

    def __init__(self, features, true_labels, observed_labels, num_classes: int):
        features = np.array(features, dtype=np.float64)
        true_labels = np.array(true_labels, dtype=np.int64)
        observed_labels = np.array(observed_labels, dtype=np.int64)
        n = features.shape[0]
        if features.ndim != 2 or true_labels.shape != (n,) or observed_labels.shape != (n,):
            raise ContractViolation("features/labels have inconsistent shapes")
        for lab in (true_labels, observed_labels):
            if n and (lab.min() < 0 or lab.max() >= num_classes):
                raise ContractViolation(f"labels must lie in [0, {num_classes})")
        for a in (features, true_labels, observed_labels):
            a.setflags(write=False)
        self._features = features
        self._true = true_labels
        self._observed = observed_labels
        self.num_classes = int(num_classes)

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def true_labels(self) -> np.ndarray:
        return self._true

    @property
    def observed_labels(self) -> np.ndarray:
        return self._observed

    @property
    def dim(self) -> int:
        return self._features.shape[1]

    def __len__(self) -> int:
        return self._features.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self._features[i], int(self._true[i]), int(self._observed[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self._features[idx], self._true[idx], self._observed[idx],
                       self.num_classes)

    def with_observed(self, observed_labels) -> "Dataset":
        return Dataset(self._features, self._true, observed_labels, self.num_classes)

    def clean_mask(self) -> np.ndarray:
        return self._observed == self._true

    def same_as(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes
                and np.array_equal(self._features, other._features)
                and np.array_equal(self._true, other._true)
                and np.array_equal(self._observed, other._observed))


@dataclass(frozen=True)
class ClientPartition:
    assignments: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrs = []
        for a in self.assignments:
            a = np.array(a, dtype=np.int64)
            a.setflags(write=False)
            arrs.append(a)
        object.__setattr__(self, "assignments", tuple(arrs))
        if any(len(a) == 0 for a in arrs):
            raise ContractViolation("every client must hold at least one example")
        allidx = np.concatenate(arrs)
        if len(np.unique(allidx)) != len(allidx):
            raise ContractViolation("client index sets overlap")

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    def __getitem__(self, client: int) -> np.ndarray:
        return self.assignments[client]


@dataclass(frozen=True)
class NoiseSpec:
    """Per-client noise type and rate plus the asymmetric class map."""

    types: tuple[str, ...]
    rates: tuple[float, ...]
    asymmetric_map: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.types) != len(self.rates):
            raise ConfigError("noise types and rates must have one entry per client")
        for t, r in zip(self.types, self.rates):
            if t not in NOISE_TYPES:
                raise ConfigError(f"unknown noise type {t!r}")
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"noise rate {r} outside [0, 1]")
        if self.asymmetric_map is not None:
            object.__setattr__(self, "asymmetric_map", tuple(int(c) for c in self.asymmetric_map))

    @classmethod
    def build(cls, kind: str, rates: Sequence[float], num_classes: int,
              asymmetric_map: Sequence[int] | None = None) -> "NoiseSpec":
        """``kind`` is symmetric, asymmetric, clean, or mixed (first half symmetric)."""
        m = len(rates)
        if kind == "mixed":
            half = m // 2
            types = ["symmetric"] * half + ["asymmetric"] * (m - half)
        elif kind in NOISE_TYPES:
            types = [kind] * m
        else:
            raise ConfigError(f"unknown noise kind {kind!r}")
        if asymmetric_map is None and "asymmetric" in types:
            asymmetric_map = cyclic_map(num_classes)
        return cls(tuple(types), tuple(rates), asymmetric_map)


def cyclic_map(num_classes: int) -> tuple[int, ...]:
    return tuple((c + 1) % num_classes for c in range(num_classes))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_blobs(num_classes: int, per_class: int, spread: float, dim: int, seed,
               radius: float = 1.0, test_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters, one per class, with means on a sphere.

    Class means are random directions scaled to ``radius``; ``spread`` is the
    per-coordinate standard deviation.  The last ``floor(test_fraction *
    per_class)`` draws of every class form a balanced test split.
    """
    if num_classes < 2 or per_class < 1 or dim < 2 or not spread > 0:
        raise ContractViolation("make_blobs needs num_classes>=2, per_class>=1, dim>=2, spread>0")
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(num_classes, dim))
    means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    n_test = int(math.floor(test_fraction * per_class))
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        pts = means[c] + spread * rng.normal(size=(per_class, dim))
        cut = per_class - n_test
        train_x.append(pts[:cut])
        train_y.append(np.full(cut, c))
        test_x.append(pts[cut:])
        test_y.append(np.full(n_test, c))
    tx, ty = np.concatenate(train_x), np.concatenate(train_y)
    order = rng.permutation(len(ty))
    tx, ty = tx[order], ty[order]
    sx, sy = np.concatenate(test_x), np.concatenate(test_y)
    return Dataset(tx, ty, ty, num_classes), Dataset(sx, sy, sy, num_classes)


def shard_partition(dataset: Dataset, num_clients: int, shards_per_client: int,
                    seed) -> ClientPartition:
    """Sort by true label, cut ``num_clients * S`` equal contiguous shards, deal S to each client.

    Trailing examples beyond an equal shard size are dropped.
    """
    n_shards = num_clients * shards_per_client
    if num_clients < 1 or shards_per_client < 1:
        raise ConfigError("num_clients and shards_per_client must be positive")
    if n_shards > len(dataset):
        raise ConfigError(f"{n_shards} shards requested from {len(dataset)} examples")
    shard_size = len(dataset) // n_shards
    order = np.argsort(dataset.true_labels, kind="stable")[: n_shards * shard_size]
    shards = order.reshape(n_shards, shard_size)
    perm = np.random.default_rng(seed).permutation(n_shards)
    S = shards_per_client
    return ClientPartition(tuple(
        np.concatenate([shards[s] for s in perm[i * S:(i + 1) * S]]) for i in range(num_clients)
    ))


def dirichlet_partition(dataset: Dataset, num_clients: int, beta: float, seed) -> ClientPartition:
    """Split each class across clients with Dirichlet(beta) proportions.

    Clients left empty receive one example from the currently largest client
    (lowest id on ties) until none is empty.
    """
    if not beta > 0:
        raise ConfigError("beta must be positive")
    if num_clients > len(dataset):
        raise ConfigError("more clients than examples")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.true_labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(num_clients, beta))
        cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(int)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    while True:
        sizes = [len(b) for b in buckets]
        empty = [i for i, s in enumerate(sizes) if s == 0]
        if not empty:
            break
        donor = int(np.argmax(sizes))
        buckets[empty[0]].append(buckets[donor].pop())
    return ClientPartition(tuple(np.array(b, dtype=np.int64) for b in buckets))


def linear_noise_schedule(num_clients: int, lo: float, hi: float) -> np.ndarray:
    if not 0.0 <= lo <= hi <= 1.0 or num_clients < 1:
        raise ConfigError("need 0 <= lo <= hi <= 1 and num_clients >= 1")
    if num_clients == 1:
        return np.array([(lo + hi) / 2.0])
    return lo + (hi - lo) * np.arange(num_clients) / (num_clients - 1)


def inject_noise(dataset: Dataset, partition: ClientPartition, spec: NoiseSpec, seed) -> Dataset:
    """Corrupt exactly ``round(rate * |D_c|)`` observed labels per client.

    Symmetric flips draw uniformly from the other ``C - 1`` classes;
    asymmetric flips follow ``spec.asymmetric_map``.  True labels and
    features are left as they are.
    """
    C = dataset.num_classes
    if len(spec.types) != partition.num_clients:
        raise ConfigError("noise spec must cover every client")
    if "asymmetric" in spec.types:
        amap = spec.asymmetric_map
        if amap is None or len(amap) != C:
            raise ConfigError(f"asymmetric map must give a target for each of {C} classes")
        if any(not 0 <= t < C for t in amap) or any(t == c for c, t in enumerate(amap)):
            raise ConfigError("asymmetric map must send every class to a different valid class")
        if len(set(amap)) != C:
            raise ConfigError("asymmetric map targets must be distinct")
    observed = dataset.observed_labels.copy()
    true = dataset.true_labels
    for client, (kind, rate) in enumerate(zip(spec.types, spec.rates)):
        idx = partition[client]
        if kind == "clean":
            continue
        n_flip = round_half_up(rate * len(idx))
        if n_flip == 0:
            continue
        rng = np.random.default_rng([int(seed), client])
        chosen = idx[rng.choice(len(idx), size=n_flip, replace=False)]
        if kind == "symmetric":
            r = rng.integers(0, C - 1, size=n_flip)
            observed[chosen] = np.where(r < true[chosen], r, r + 1)
        else:
            observed[chosen] = np.asarray(spec.asymmetric_map)[true[chosen]]
    return dataset.with_observed(observed)


def save_dataset(path, dataset: Dataset) -> None:
    """One example per line: features..., true_label, observed_label (shortest round-trip floats)."""
    with open(path, "w") as fh:
        for x, t, o in zip(dataset.features, dataset.true_labels, dataset.observed_labels):
            fh.write(",".join([*(repr(float(v)) for v in x), str(int(t)), str(int(o))]) + "\n")


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    feats, true, obs = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise ConfigError(f"{path}:{lineno}: expected features plus two labels")
            try:
                feats.append([float(v) for v in parts[:-2]])
                true.append(int(parts[-2]))
                obs.append(int(parts[-1]))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    if num_classes is None:
        num_classes = max(max(true), max(obs)) + 1
    return Dataset(np.array(feats), true, obs, num_classes)
