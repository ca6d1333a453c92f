"""Seeded synthetic classification problems on the unit sphere."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientData, InvalidSpec

TEST_FRACTION = 0.2


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    samples_per_class: int = 200
    input_dim: int = 3
    cluster_spread: float = 0.2
    elongation: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise InvalidSpec(f"num_classes must be an integer >= 2, got {self.num_classes}")
        if int(self.samples_per_class) != self.samples_per_class or self.samples_per_class < 2:
            raise InvalidSpec(f"samples_per_class must be an integer >= 2, got {self.samples_per_class}")
        if int(self.input_dim) != self.input_dim or self.input_dim < 2:
            raise InvalidSpec(f"input_dim must be an integer >= 2, got {self.input_dim}")
        if not self.cluster_spread >= 0:
            raise InvalidSpec(f"cluster_spread must be non-negative, got {self.cluster_spread}")
        if not self.elongation >= 1:
            raise InvalidSpec(f"elongation must be >= 1, got {self.elongation}")


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray
    num_classes: int

    @property
    def sample_ids(self) -> np.ndarray:
        return np.arange(self.labels.shape[0])

    def split_indices(self, split: str) -> np.ndarray:
        if split == "train":
            return np.flatnonzero(~self.is_test)
        if split == "test":
            return np.flatnonzero(self.is_test)
        raise ValueError(f"unknown split {split!r}")

    def class_counts(self, split: str | None = None) -> dict[int, int]:
        labels = self.labels if split is None else self.labels[self.split_indices(split)]
        counts = np.bincount(labels, minlength=self.num_classes)
        return {k: int(v) for k, v in enumerate(counts)}


def generate(spec: DatasetSpec) -> LabeledDataset:
    """Class means uniform on the sphere, anisotropic Gaussian noise, renormalized.

    The noise along one random tangent axis per class is stretched by
    ``elongation``; ``cluster_spread`` is the per-axis noise standard
    deviation, which approximates the angular spread for small values.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    c, k, d = spec.num_classes, spec.samples_per_class, spec.input_dim
    means = rng.standard_normal((c, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    inputs = np.empty((c * k, d))
    labels = np.repeat(np.arange(c), k)
    is_test = np.zeros(c * k, dtype=bool)
    n_test = max(1, int(round(TEST_FRACTION * k)))
    for j in range(c):
        axis = rng.standard_normal(d)
        axis -= axis.dot(means[j]) * means[j]
        axis /= np.linalg.norm(axis)
        g = rng.standard_normal((k, d))
        noise = spec.cluster_spread * (g + (spec.elongation - 1.0) * np.outer(g @ axis, axis))
        x = means[j] + noise
        inputs[j * k:(j + 1) * k] = x / np.linalg.norm(x, axis=1, keepdims=True)
        is_test[j * k + rng.permutation(k)[:n_test]] = True
    return LabeledDataset(inputs=inputs, labels=labels, is_test=is_test, num_classes=c)


def verification_pairs(ds: LabeledDataset, num_pairs: int, seed: int, split: str = "test"):
    """Balanced same/different pairs drawn from one split.

    Returns ``(pairs, issame)`` where ``pairs`` holds global sample indices.
    Sampling is without replacement unless a side has fewer candidate
    pairs than requested.
    """
    idx = ds.split_indices(split)
    labels = ds.labels[idx]
    iu, ju = np.triu_indices(idx.shape[0], k=1)
    same = labels[iu] == labels[ju]
    pos_cand = np.flatnonzero(same)
    neg_cand = np.flatnonzero(~same)
    if pos_cand.size == 0 or neg_cand.size == 0 or num_pairs < 2:
        raise InsufficientData(
            f"split {split!r} yields {pos_cand.size} positive and {neg_cand.size} negative candidate pairs; "
            f"{num_pairs} requested"
        )
    rng = np.random.default_rng(seed)
    n_pos = num_pairs // 2
    n_neg = num_pairs - n_pos
    pos = rng.choice(pos_cand, size=n_pos, replace=n_pos > pos_cand.size)
    neg = rng.choice(neg_cand, size=n_neg, replace=n_neg > neg_cand.size)
    chosen = np.concatenate([pos, neg])
    issame = np.concatenate([np.ones(n_pos, dtype=bool), np.zeros(n_neg, dtype=bool)])
    order = rng.permutation(num_pairs)
    chosen, issame = chosen[order], issame[order]
    pairs = np.stack([idx[iu[chosen]], idx[ju[chosen]]], axis=1)
    return pairs, issame


def write_csv(ds: LabeledDataset, path) -> None:
    d = ds.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "split"] + [f"x{i}" for i in range(d)])
        for i in range(ds.labels.shape[0]):
            w.writerow(
                [i, int(ds.labels[i]), "test" if ds.is_test[i] else "train"]
                + [repr(float(v)) for v in ds.inputs[i]]
            )


def read_csv(path) -> LabeledDataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["sample_id", "label", "split"]:
            raise InvalidSpec(f"{path}: unexpected header {header[:3]}")
        rows = list(reader)
    ids = np.array([int(r[0]) for r in rows])
    if not np.array_equal(ids, np.arange(len(rows))):
        raise InvalidSpec(f"{path}: sample ids must run 0..n-1 in order")
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    is_test = np.array([r[2] == "test" for r in rows])
    inputs = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64)
    return LabeledDataset(inputs=inputs, labels=labels, is_test=is_test, num_classes=int(labels.max()) + 1)
