"""Client partitioning: stratified i.i.d. shards and label-skewed Dirichlet splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, PartitionError

MAX_REDRAWS = 100


@dataclass(frozen=True)
class Dataset:
    """Stacked inputs ``(N, *input_shape)`` with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim < 1 or labels.shape != (inputs.shape[0],):
            raise InputError(f"{inputs.shape[0] if inputs.ndim else 0} inputs vs {labels.shape} labels")
        if self.class_count < 1:
            raise InputError("class_count must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def split(self, fraction: float, seed: int) -> tuple:
        """Random ``(first, rest)`` split with ``round(fraction * N)`` samples in ``first``."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


@dataclass(frozen=True)
class PartitionPlan:
    assignments: tuple
    scheme: str
    seed: int
    alpha: float | None = None
    attempts: int = field(default=1, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "assignments", tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        )

    @property
    def m(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list:
        return [len(a) for a in self.assignments]

    def shard(self, data: Dataset, client: int) -> Dataset:
        return data.subset(self.assignments[client])

    def __eq__(self, other):
        if not isinstance(other, PartitionPlan):
            return NotImplemented
        return (
            (self.scheme, self.seed, self.alpha) == (other.scheme, other.seed, other.alpha)
            and self.m == other.m
            and all(np.array_equal(a, b) for a, b in zip(self.assignments, other.assignments))
        )

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "alpha": self.alpha,
            "seed": self.seed,
            "attempts": self.attempts,
            "assignments": [a.tolist() for a in self.assignments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(tuple(d["assignments"]), d["scheme"], int(d["seed"]), d.get("alpha"), d.get("attempts", 1))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a partition plan: {exc}") from exc


def iid_split(data: Dataset, m: int, seed: int) -> PartitionPlan:
    """Near-equal i.i.d. shards (sizes differ by at most one).

    Samples are shuffled, grouped by label, and dealt round-robin, so every
    shard also gets each class's count to within one sample.
    """
    n = len(data)
    if m < 1:
        raise InputError(f"need at least one client, got m={m}")
    if n < m:
        raise InputError(f"cannot split {n} samples over {m} clients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    order = order[np.argsort(data.labels[order], kind="stable")]
    offset = int(rng.integers(m))
    owner = (np.arange(n) + offset) % m
    return PartitionPlan(
        tuple(np.sort(order[owner == c]) for c in range(m)), "iid", seed
    )


def _dirichlet_draw(labels: np.ndarray, class_count: int, m: int, alpha: float, rng) -> list:
    shards = [[] for _ in range(m)]
    for c in range(class_count):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        p = rng.dirichlet(np.full(m, alpha))
        counts = rng.multinomial(members.size, p)
        for client, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            shards[client].append(chunk)
    return [np.sort(np.concatenate(s)) if s else np.empty(0, dtype=np.int64) for s in shards]


def dirichlet_split(
    data: Dataset, m: int, alpha: float, seed: int, min_per_client: int = 1
) -> PartitionPlan:
    """Per-class Dirichlet(alpha) proportions over clients, multinomial assignment.

    A draw leaving any client with fewer than ``min_per_client`` samples is
    discarded and redrawn with the next seed, at most ``MAX_REDRAWS`` times.
    """
    n = len(data)
    if alpha <= 0:
        raise InputError(f"alpha must be positive, got {alpha}")
    if m < 1:
        raise InputError(f"need at least one client, got m={m}")
    if n < m * min_per_client:
        raise InputError(f"{n} samples cannot give {m} clients {min_per_client} each")
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng(seed + attempt)
        shards = _dirichlet_draw(data.labels, data.class_count, m, alpha, rng)
        if min(len(s) for s in shards) >= max(min_per_client, 1):
            return PartitionPlan(tuple(shards), "dirichlet", seed, float(alpha), attempt + 1)
    raise PartitionError(
        f"no Dirichlet(alpha={alpha}) split over {m} clients gave every client "
        f">= {min_per_client} samples after {MAX_REDRAWS} draws"
    )


def make_plan(data: Dataset, m: int, scheme: str, seed: int, alpha: float = 0.5, min_per_client: int = 1) -> PartitionPlan:
    if scheme == "iid":
        return iid_split(data, m, seed)
    if scheme == "dirichlet":
        return dirichlet_split(data, m, alpha, seed, min_per_client)
    raise InputError(f"unknown partition scheme {scheme!r}")


def heterogeneity_index(plan: PartitionPlan, data: Dataset) -> float:
    """Mean total-variation distance between client and global label distributions."""
    global_hist = data.class_histogram() / len(data)
    tv = []
    for a in plan.assignments:
        if len(a) == 0:
            continue
        local = np.bincount(data.labels[a], minlength=data.class_count) / len(a)
        tv.append(0.5 * np.abs(local - global_hist).sum())
    return float(np.mean(tv)) if tv else 0.0
