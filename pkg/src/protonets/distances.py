"""Distances between embeddings and prototypes.

Four kinds are supported: squared Euclidean, cosine, diagonal Mahalanobis and
a generic Bregman divergence built from a convex generator

    d(z, z') = phi(z) - phi(z') - (z - z') . grad phi(z')

Generators are plain value/gradient callables on numpy vectors, so the
Bregman form works outside the autodiff graph. Squared Euclidean, cosine and
diagonal Mahalanobis also have graph-aware batched forms used in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, UnsupportedError
from .rng import SplitMix64
from .tensor import Tensor, as_tensor, sqrt

KINDS = ("sq_euclidean", "cosine", "mahalanobis_diag", "bregman")


@dataclass(frozen=True)
class Generator:
    """A strictly convex function with its gradient."""

    name: str
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


def sq_norm_generator() -> Generator:
    return Generator("sq_norm", lambda z: float(z @ z), lambda z: 2.0 * z)


def weighted_sq_norm_generator(weights) -> Generator:
    w = np.asarray(weights, dtype=np.float64)
    return Generator("weighted_sq_norm", lambda z: float(w @ (z * z)), lambda z: 2.0 * w * z)


def neg_entropy_generator() -> Generator:
    """sum z log z on the positive orthant; its divergence is generalized KL."""

    def value(z):
        if np.any(z <= 0):
            raise DegenerateInputError("neg_entropy generator needs strictly positive inputs")
        return float(np.sum(z * np.log(z)))

    def grad(z):
        if np.any(z <= 0):
            raise DegenerateInputError("neg_entropy generator needs strictly positive inputs")
        return np.log(z) + 1.0

    return Generator("neg_entropy", value, grad)


BUILTIN_GENERATORS: dict[str, Callable[[], Generator]] = {
    "sq_norm": sq_norm_generator,
    "neg_entropy": neg_entropy_generator,
}


@dataclass(frozen=True)
class DistanceFn:
    kind: str
    generator: Generator | None = None
    weights: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown distance kind {self.kind!r}")
        if self.kind == "bregman" and self.generator is None:
            raise ContractError("bregman distance needs a generator")
        if self.kind == "mahalanobis_diag":
            if self.weights is None:
                raise ContractError("mahalanobis_diag needs weights")
            w = np.asarray(self.weights, dtype=np.float64)
            if w.ndim != 1 or np.any(w <= 0):
                raise ContractError("mahalanobis_diag weights must be a vector of positive reals")
            object.__setattr__(self, "weights", w)

    @property
    def name(self) -> str:
        if self.kind == "bregman":
            return f"bregman:{self.generator.name}"
        return self.kind

    @property
    def is_bregman(self) -> bool:
        return self.kind in ("sq_euclidean", "mahalanobis_diag", "bregman")

    def __call__(self, z, z_prime) -> float:
        return distance(self, z, z_prime)


def squared_euclidean() -> DistanceFn:
    return DistanceFn("sq_euclidean")


def cosine() -> DistanceFn:
    return DistanceFn("cosine")


def mahalanobis_diag(weights) -> DistanceFn:
    return DistanceFn("mahalanobis_diag", weights=np.asarray(weights, dtype=np.float64))


def bregman(generator: Generator | str) -> DistanceFn:
    if isinstance(generator, str):
        try:
            generator = BUILTIN_GENERATORS[generator]()
        except KeyError:
            raise ContractError(f"unknown builtin generator {generator!r}") from None
    return DistanceFn("bregman", generator=generator)


def parse_distance(name: str, dim: int | None = None) -> DistanceFn:
    """Build a distance from its config name.

    ``mahalanobis_diag`` from a bare name gets unit weights of length ``dim``;
    ``mahalanobis_diag:1,2,3`` gives explicit weights.
    """
    if name in ("sq_euclidean", "euclidean"):
        return squared_euclidean()
    if name == "cosine":
        return cosine()
    if name.startswith("bregman:"):
        return bregman(name.split(":", 1)[1])
    if name.startswith("mahalanobis_diag"):
        _, _, spec = name.partition(":")
        if spec:
            return mahalanobis_diag([float(x) for x in spec.split(",")])
        if dim is None:
            raise ContractError("mahalanobis_diag without weights needs the embedding dimension")
        return mahalanobis_diag(np.ones(dim))
    raise ContractError(f"unknown distance {name!r}")


def _check_pair(z: np.ndarray, zp: np.ndarray) -> None:
    if z.shape != zp.shape or z.ndim != 1:
        raise DimensionError(f"distance needs two vectors of equal length, got {z.shape} and {zp.shape}")


def distance(d: DistanceFn, z, z_prime) -> float:
    z = np.asarray(z, dtype=np.float64)
    zp = np.asarray(z_prime, dtype=np.float64)
    _check_pair(z, zp)
    if d.kind == "sq_euclidean":
        diff = z - zp
        return float(diff @ diff)
    if d.kind == "cosine":
        nz, nzp = np.linalg.norm(z), np.linalg.norm(zp)
        if nz == 0 or nzp == 0:
            raise DegenerateInputError("cosine distance with a zero vector")
        return float(1.0 - (z @ zp) / (nz * nzp))
    if d.kind == "mahalanobis_diag":
        if d.weights.shape != z.shape:
            raise DimensionError("mahalanobis weights do not match vector length")
        diff = z - zp
        return float(d.weights @ (diff * diff))
    g = d.generator
    return float(g.value(z) - g.value(zp) - (z - zp) @ g.grad(zp))


def _pairwise_numpy(d: DistanceFn, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    if d.kind == "sq_euclidean":
        diff = q[:, None, :] - p[None, :, :]
        return (diff * diff).sum(axis=-1)
    if d.kind == "mahalanobis_diag":
        diff = q[:, None, :] - p[None, :, :]
        return (diff * diff * d.weights).sum(axis=-1)
    if d.kind == "cosine":
        nq = np.linalg.norm(q, axis=1)
        npr = np.linalg.norm(p, axis=1)
        if np.any(nq == 0) or np.any(npr == 0):
            raise DegenerateInputError("cosine distance with a zero vector")
        return 1.0 - (q @ p.T) / (nq[:, None] * npr[None, :])
    return np.array([[distance(d, a, b) for b in p] for a in q], dtype=np.float64).reshape(len(q), len(p))


def _pairwise_tensor(d: DistanceFn, q: Tensor, p: Tensor) -> Tensor:
    Q, M = q.shape
    K = p.shape[0]
    if d.kind in ("sq_euclidean", "mahalanobis_diag"):
        diff = q.reshape(Q, 1, M) - p.reshape(1, K, M)
        sq = diff.square()
        if d.kind == "mahalanobis_diag":
            sq = sq * d.weights
        return sq.sum(axis=2)
    if d.kind == "cosine":
        qn2 = q.square().sum(axis=1, keepdims=True)
        pn2 = p.square().sum(axis=1, keepdims=True)
        if np.any(qn2.data == 0) or np.any(pn2.data == 0):
            raise DegenerateInputError("cosine distance with a zero vector")
        qu = q / sqrt(qn2)
        pu = p / sqrt(pn2)
        return 1.0 - qu @ pu.T
    raise UnsupportedError(f"{d.name} has no differentiable batched form")


def pairwise_distances(d: DistanceFn, queries, prototypes):
    """``[Q, K]`` matrix of ``d(queries[q], prototypes[k])``.

    Returns a :class:`Tensor` (on the autodiff graph) when either argument is
    a tensor, a numpy array otherwise.
    """
    if isinstance(queries, Tensor) or isinstance(prototypes, Tensor):
        q, p = as_tensor(queries), as_tensor(prototypes)
        if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
            raise DimensionError(f"pairwise_distances: shapes {q.shape} and {p.shape} do not agree")
        if d.kind == "bregman":
            if q.requires_grad or p.requires_grad:
                raise UnsupportedError("bregman distances are not differentiable through the graph")
            return Tensor(_pairwise_numpy(d, q.data, p.data))
        return _pairwise_tensor(d, q, p)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    p = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if q.shape[1] != p.shape[1]:
        raise DimensionError(f"pairwise_distances: shapes {q.shape} and {p.shape} do not agree")
    return _pairwise_numpy(d, q, p)


def total_divergence(d: DistanceFn, points: np.ndarray, candidate: np.ndarray) -> float:
    return float(sum(distance(d, x, candidate) for x in points))


def _ball_perturbations(rng: SplitMix64, trials: int, dim: int, radius: float) -> np.ndarray:
    dirs = rng.normals(trials * dim).reshape(trials, dim)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.uniforms(trials) ** (1.0 / dim)
    return dirs / norms * r[:, None]


def perturbation_check(d: DistanceFn, points, candidate, trials: int, radius: float,
                       rng: SplitMix64 | int = 0) -> bool:
    """True iff no random perturbation (norm <= radius) of ``candidate`` lowers
    the total divergence from ``points``. Works for any distance kind."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = np.asarray(candidate, dtype=np.float64)
    if len(pts) < 1:
        raise ContractError("need at least one point")
    if not isinstance(rng, SplitMix64):
        rng = SplitMix64(rng)
    base = total_divergence(d, pts, c)
    for delta in _ball_perturbations(rng, trials, c.size, radius):
        if total_divergence(d, pts, c + delta) < base:
            return False
    return True


def mean_minimizer_check(d: DistanceFn, points, candidate, trials: int = 500, radius: float = 0.5,
                         rng: SplitMix64 | int = 0) -> bool:
    """Perturbation test that ``candidate`` minimizes sum_i d(points_i, candidate).

    Only meaningful for Bregman divergences; cosine is rejected.
    """
    if not d.is_bregman:
        raise UnsupportedError("cosine distance is not a Bregman divergence")
    return perturbation_check(d, points, candidate, trials, radius, rng)
