"""Labeled datasets and episodic sampling.

An episode picks ``n_way`` classes without replacement, then for each class
draws ``n_support`` examples and, from what is left, ``n_query`` more. All
draws go through :func:`random_sample` on a :class:`~protonets.rng.SplitMix64`
so an episode stream is a pure function of (dataset, spec, seed).

Episode-local labels are ``0 .. n_way-1`` in class-selection order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, InsufficientDataError
from .rng import SplitMix64


@dataclass
class ClassRecord:
    class_id: str
    examples: np.ndarray  # [n, *input_shape]
    true_mean: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class LabeledDataset:
    classes: list[ClassRecord]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ContractError("class ids must be unique")
        for c in self.classes:
            if tuple(c.examples.shape[1:]) != self.input_shape:
                raise ContractError(
                    f"class {c.class_id!r} has example shape {c.examples.shape[1:]}, expected {self.input_shape}"
                )

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> list[str]:
        return [c.class_id for c in self.classes]

    def by_id(self, class_id: str) -> ClassRecord:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)

    def subset(self, class_ids: Sequence[str]) -> "LabeledDataset":
        return LabeledDataset([self.by_id(c) for c in class_ids], self.input_shape)

    def split(self, *counts: int) -> list["LabeledDataset"]:
        """Consecutive class partitions of the given sizes (the last may be -1 for 'rest')."""
        out, start = [], 0
        for n in counts:
            stop = len(self.classes) if n == -1 else start + n
            if stop > len(self.classes):
                raise InsufficientDataError(f"cannot split {len(self.classes)} classes into {counts}")
            out.append(LabeledDataset(self.classes[start:stop], self.input_shape))
            start = stop
        return out


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    n_support: int
    n_query: int

    def __post_init__(self):
        if self.n_way < 1 or self.n_query < 1:
            raise ContractError(f"invalid episode spec {self}")
        # zero support is allowed for zero-shot episodes
        if self.n_support < 0:
            raise ContractError(f"invalid episode spec {self}")


@dataclass
class Episode:
    class_ids: list[str]
    support: np.ndarray  # [n_way, n_support, *input_shape]
    query: np.ndarray  # [n_way, n_query, *input_shape]
    support_indices: list[list[int]] = field(default_factory=list)
    query_indices: list[list[int]] = field(default_factory=list)

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    @property
    def n_support(self) -> int:
        return self.support.shape[1]

    @property
    def n_query(self) -> int:
        return self.query.shape[1]

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.n_query)

    def flat_support(self) -> np.ndarray:
        return self.support.reshape((-1,) + self.support.shape[2:])

    def flat_query(self) -> np.ndarray:
        return self.query.reshape((-1,) + self.query.shape[2:])


def random_sample(pool: Sequence, n: int, rng: SplitMix64) -> list:
    """``n`` distinct elements of ``pool`` chosen uniformly without replacement.

    Partial Fisher-Yates shuffle over pool positions; the result order is the
    draw order.
    """
    if n < 0:
        raise ContractError("sample size must be non-negative")
    if n > len(pool):
        raise InsufficientDataError(f"cannot draw {n} items from a pool of {len(pool)}")
    idx = list(range(len(pool)))
    for i in range(n):
        j = i + rng.randbelow(len(idx) - i)
        idx[i], idx[j] = idx[j], idx[i]
    return [pool[k] for k in idx[:n]]


def sample_episode(data: LabeledDataset, spec: EpisodeSpec, rng: SplitMix64) -> Episode:
    if spec.n_way > len(data):
        raise InsufficientDataError(f"{spec.n_way}-way episode from a dataset with {len(data)} classes")
    chosen = random_sample(range(len(data)), spec.n_way, rng)
    need = spec.n_support + spec.n_query
    supports, queries, s_idx, q_idx = [], [], [], []
    for ci in chosen:
        rec = data.classes[ci]
        if len(rec) < need:
            raise InsufficientDataError(
                f"class {rec.class_id!r} has {len(rec)} examples; episode needs {need}"
            )
        s = random_sample(range(len(rec)), spec.n_support, rng)
        taken = set(s)
        rest = [i for i in range(len(rec)) if i not in taken]
        q = random_sample(rest, spec.n_query, rng)
        supports.append(rec.examples[s])
        queries.append(rec.examples[q])
        s_idx.append(s)
        q_idx.append(q)
    shape = data.input_shape
    return Episode(
        class_ids=[data.classes[ci].class_id for ci in chosen],
        support=np.stack(supports) if spec.n_support else np.zeros((spec.n_way, 0) + shape),
        query=np.stack(queries),
        support_indices=s_idx,
        query_indices=q_idx,
    )


def episode_stream(data: LabeledDataset, spec: EpisodeSpec, seed: int, count: int) -> Iterator[Episode]:
    """``count`` independently sampled episodes; episode ``i`` uses the ``i``-th split of ``seed``."""
    master = SplitMix64(seed)
    for _ in range(count):
        yield sample_episode(data, spec, master.split())
