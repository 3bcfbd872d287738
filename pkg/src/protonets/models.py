"""Embedding networks and the classification heads built on top of them.

Prototypical head: prototypes are the mean embedded support point per class and
a query's class posterior is the softmax of negative distances to them.
Matching head: softmax attention over individual support points, summed per
class. Both share one embedding network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distances import DistanceFn, pairwise_distances, squared_euclidean
from .distances import distance as distance_between
from .episodes import Episode
from .errors import ContractError, DegenerateInputError, DimensionError, UnsupportedError
from .rng import SplitMix64
from .tensor import Tensor, as_tensor, batchnorm, conv2d, logsumexp, log_softmax, matmul, maxpool2d, pooled_size, sqrt, take


# layers ------------------------------------------------------------------------


def _glorot(rng: SplitMix64, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    return ((2.0 * rng.uniforms(n) - 1.0) * limit).reshape(shape)


class Layer:
    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: SplitMix64):
        self.weight = Tensor(_glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __repr__(self):
        return f"Dense({self.weight.shape[0]}, {self.weight.shape[1]})"

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[0],):
            raise DimensionError(f"{self!r} cannot take input of shape {in_shape}")
        return (self.weight.shape[1],)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LinearMap(Layer):
    """Bias-free linear map ``x -> x W``."""

    def __init__(self, n_in: int, n_out: int, rng: SplitMix64 | None = None, weight=None):
        if weight is None:
            weight = _glorot(rng, (n_in, n_out), n_in, n_out)
        self.weight = Tensor(weight, requires_grad=True)

    def __repr__(self):
        return f"LinearMap({self.weight.shape[0]}, {self.weight.shape[1]})"

    def params(self):
        return {"weight": self.weight}

    def out_shape(self, in_shape):
        if in_shape != (self.weight.shape[0],):
            raise DimensionError(f"{self!r} cannot take input of shape {in_shape}")
        return (self.weight.shape[1],)

    def __call__(self, x, training):
        return matmul(x, self.weight)


class ReLU(Layer):
    def __repr__(self):
        return "ReLU()"

    def __call__(self, x, training):
        return x.relu()


class Flatten(Layer):
    def __repr__(self):
        return "Flatten()"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, training):
        return x.reshape(x.shape[0], -1)


class ConvBlock(Layer):
    """3x3 conv (no bias; batchnorm follows) -> batchnorm -> ReLU -> 2x2 max-pool."""

    def __init__(self, in_channels: int, filters: int, rng: SplitMix64, momentum: float = 0.1, eps: float = 1e-5):
        self.kernels = Tensor(
            _glorot(rng, (filters, in_channels, 3, 3), in_channels * 9, filters * 9), requires_grad=True
        )
        self.gamma = Tensor(np.ones(filters), requires_grad=True)
        self.beta = Tensor(np.zeros(filters), requires_grad=True)
        self.running_mean = np.zeros(filters)
        self.running_var = np.ones(filters)
        self.momentum = momentum
        self.eps = eps

    def __repr__(self):
        return f"ConvBlock({self.kernels.shape[1]}, {self.kernels.shape[0]})"

    def params(self):
        return {"kernels": self.kernels, "gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.kernels.shape[1]:
            raise DimensionError(f"{self!r} cannot take input of shape {in_shape}")
        return (self.kernels.shape[0], pooled_size(in_shape[1]), pooled_size(in_shape[2]))

    def __call__(self, x, training):
        h = conv2d(x, self.kernels)
        h = batchnorm(h, self.gamma, self.beta, self.running_mean, self.running_var, training,
                      self.momentum, self.eps)
        return maxpool2d(h.relu())


class EmbeddingNet:
    """An ordered stack of layers mapping ``[B, *input_shape]`` to ``[B, M]``."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], preset: str = "custom"):
        self.layers = list(layers)
        self.input_shape = tuple(int(n) for n in input_shape)
        self.preset = preset
        self.training = True
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise DimensionError(f"embedding output must be a vector, got shape {shape}")
        self.output_dim = shape[0]

    def __repr__(self):
        return f"EmbeddingNet({self.preset!r}, {self.input_shape} -> {self.output_dim})"

    def train(self) -> "EmbeddingNet":
        self.training = True
        return self

    def eval(self) -> "EmbeddingNet":
        self.training = False
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers().items()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.named_buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise ContractError(f"state is missing entries: {sorted(missing)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ContractError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for k, b in bufs.items():
            b[...] = state[k]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected input [B, {self.input_shape}], got {x.shape}")
        for layer in self.layers:
            x = layer(x, self.training)
        return x

    forward = __call__


def identity_embedding(dim: int) -> EmbeddingNet:
    return EmbeddingNet([], (dim,), preset="identity")


def build_embedding(preset: str, input_shape: Sequence[int], seed: int = 0) -> EmbeddingNet:
    """Construct a preset embedding network.

    ``omniglot-conv[:filters]``  four conv blocks (64 filters by default) then flatten
    ``mlp:d0-d1-...-dn``         dense layers with ReLU between them (none after the last)
    ``cub-linear:in-out``        a single bias-free linear map
    ``identity``                 no layers
    """
    rng = SplitMix64(seed)
    input_shape = tuple(int(n) for n in input_shape)
    name, _, arg = preset.partition(":")
    if name == "identity":
        if len(input_shape) != 1:
            raise ContractError("identity preset needs vector inputs")
        return EmbeddingNet([], input_shape, preset)
    if name == "omniglot-conv":
        filters = int(arg) if arg else 64
        if len(input_shape) == 2:
            input_shape = (1,) + input_shape
        channels = input_shape[0]
        layers: list[Layer] = []
        for _ in range(4):
            layers.append(ConvBlock(channels, filters, rng))
            channels = filters
        layers.append(Flatten())
        return EmbeddingNet(layers, input_shape, preset)
    if name == "mlp":
        dims = [int(d) for d in arg.split("-")] if arg else []
        if len(dims) < 2:
            raise ContractError(f"mlp preset needs at least two dims, got {preset!r}")
        layers = [] if len(input_shape) == 1 else [Flatten()]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if i:
                layers.append(ReLU())
            layers.append(Dense(a, b, rng))
        return EmbeddingNet(layers, input_shape, preset)
    if name == "cub-linear":
        try:
            n_in, n_out = (int(d) for d in arg.split("-"))
        except ValueError:
            raise ContractError(f"cub-linear preset must look like cub-linear:<in>-<out>, got {preset!r}") from None
        return EmbeddingNet([LinearMap(n_in, n_out, rng)], input_shape, preset)
    raise ContractError(f"unknown embedding preset {preset!r}")


# posteriors ------------------------------------------------------------------------


@dataclass
class ClassPosterior:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
            raise ContractError("class posterior must be a probability vector")
        self.probabilities = p

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probabilities))


def softmax_neg(dists: np.ndarray, log_weights: np.ndarray | None = None) -> np.ndarray:
    """softmax(-dists + log_weights) along the last axis, max-subtracted."""
    logits = -np.asarray(dists, dtype=np.float64)
    if log_weights is not None:
        logits = logits + log_weights
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PrototypeSet:
    prototypes: Tensor  # [K, M]
    class_ids: list[str]
    distance: DistanceFn

    def __post_init__(self):
        self.prototypes = as_tensor(self.prototypes)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ContractError("prototype set needs a non-empty [K, M] matrix")
        if len(self.class_ids) != self.prototypes.shape[0]:
            raise ContractError("one class id per prototype row")

    @property
    def matrix(self) -> np.ndarray:
        return self.prototypes.data

    def __len__(self) -> int:
        return self.prototypes.shape[0]


# prototypical head ------------------------------------------------------------------


def prototypes_from_embeddings(emb_support: Tensor, n_way: int, n_support: int) -> Tensor:
    if n_support < 1:
        raise ContractError("every class needs at least one support example")
    M = emb_support.shape[-1]
    return emb_support.reshape(n_way, n_support, M).mean(axis=1)


def compute_prototypes(embed: EmbeddingNet, episode: Episode, distance: DistanceFn | None = None) -> PrototypeSet:
    if episode.n_support < 1:
        raise ContractError("every class needs at least one support example")
    z = embed(episode.flat_support())
    protos = prototypes_from_embeddings(z, episode.n_way, episode.n_support)
    return PrototypeSet(protos, list(episode.class_ids), distance or squared_euclidean())


def classify_query(protos: PrototypeSet, embedded_query) -> ClassPosterior:
    z = np.asarray(embedded_query.data if isinstance(embedded_query, Tensor) else embedded_query, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != protos.matrix.shape[1]:
        raise DimensionError(f"query of shape {z.shape} does not match prototypes {protos.matrix.shape}")
    d = pairwise_distances(protos.distance, z[None, :], protos.matrix)[0]
    return ClassPosterior(softmax_neg(d))


def classify_batch(protos: PrototypeSet, embedded_queries) -> np.ndarray:
    """Posterior matrix ``[Q, K]`` for a batch of embedded queries."""
    z = np.asarray(embedded_queries.data if isinstance(embedded_queries, Tensor) else embedded_queries)
    return softmax_neg(pairwise_distances(protos.distance, z, protos.matrix))


def _embed_episode(embed: EmbeddingNet, episode: Episode) -> tuple[Tensor, Tensor]:
    """Support and query embeddings from one forward pass over both sets."""
    xs, xq = episode.flat_support(), episode.flat_query()
    z = embed(np.concatenate([xs, xq], axis=0))
    ns = len(xs)
    return take(z, slice(0, ns)), take(z, slice(ns, None))


def _nll_from_log_probs(log_p: Tensor, labels: np.ndarray) -> Tensor:
    picked = take(log_p, (np.arange(len(labels)), labels))
    return -picked.mean()


def protonet_log_probs(emb_support: Tensor, emb_query: Tensor, n_way: int, n_support: int,
                       distance: DistanceFn) -> Tensor:
    protos = prototypes_from_embeddings(emb_support, n_way, n_support)
    return log_softmax(-pairwise_distances(distance, emb_query, protos), axis=1)


def episode_loss(embed: EmbeddingNet, episode: Episode, distance: DistanceFn) -> Tensor:
    """Mean negative log-probability of the true class over all query points.

    Per query this is ``d(f(x), c_y) + log sum_k' exp(-d(f(x), c_k'))``.
    """
    zs, zq = _embed_episode(embed, episode)
    log_p = protonet_log_probs(zs, zq, episode.n_way, episode.n_support, distance)
    return _nll_from_log_probs(log_p, episode.query_labels)


# matching-network head -----------------------------------------------------------------


def matching_log_probs(emb_support: Tensor, emb_query: Tensor, n_way: int, n_support: int,
                       distance: DistanceFn) -> Tensor:
    """log p(k) = log sum_{i in class k} softmax_i(-d(f(x), f(x_i)))."""
    Q = emb_query.shape[0]
    neg = -pairwise_distances(distance, emb_query, emb_support)  # [Q, K*N_S]
    per_class = logsumexp(neg.reshape(Q, n_way, n_support), axis=2)
    return log_softmax(per_class, axis=1)


def matching_loss(embed: EmbeddingNet, episode: Episode, distance: DistanceFn) -> Tensor:
    zs, zq = _embed_episode(embed, episode)
    log_p = matching_log_probs(zs, zq, episode.n_way, episode.n_support, distance)
    return _nll_from_log_probs(log_p, episode.query_labels)


def matching_attention(emb_support: np.ndarray, z: np.ndarray, distance: DistanceFn) -> np.ndarray:
    return softmax_neg(pairwise_distances(distance, z[None, :], emb_support)[0])


def matching_net_predict(embed: EmbeddingNet, episode: Episode, distance: DistanceFn, query) -> ClassPosterior:
    """Attention-weighted nearest-neighbour posterior for one query example."""
    zs = embed(episode.flat_support()).data
    z = embed(np.asarray(query)[None]).data[0]
    att = matching_attention(zs, z, distance)
    labels = np.repeat(np.arange(episode.n_way), episode.n_support)
    probs = np.zeros(episode.n_way)
    for a, y in zip(att, labels):
        probs[y] += a
    return ClassPosterior(probs)


def matching_batch(emb_support: np.ndarray, emb_query: np.ndarray, n_way: int, n_support: int,
                   distance: DistanceFn) -> np.ndarray:
    att = softmax_neg(pairwise_distances(distance, emb_query, emb_support))
    return att.reshape(len(emb_query), n_way, n_support).sum(axis=2)


# linear reinterpretation --------------------------------------------------------------


def linear_head(protos: PrototypeSet) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``w_k = 2 c_k`` and biases ``b_k = -c_k . c_k``.

    With squared Euclidean distance, ``softmax(W z + b)`` is the prototypical
    posterior because the dropped ``-z . z`` term is shared by every class.
    """
    if protos.distance.kind != "sq_euclidean":
        raise UnsupportedError("the linear head exists only for squared Euclidean distance")
    c = protos.matrix
    return 2.0 * c, -np.einsum("km,km->k", c, c)


def linear_posterior(W: np.ndarray, b: np.ndarray, z) -> ClassPosterior:
    logits = W @ np.asarray(z, dtype=np.float64) + b
    return ClassPosterior(softmax_neg(-logits))


# mixture density reading ---------------------------------------------------------------


@dataclass
class MixtureModel:
    means: np.ndarray  # [K, M]
    weights: np.ndarray  # [K]
    divergence: DistanceFn

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.means.shape[0],):
            raise ContractError("one mixture weight per component")
        if np.any(self.weights <= 0):
            raise ContractError("mixture weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError("mixture weights must sum to 1")
        if not self.divergence.is_bregman:
            raise UnsupportedError("mixture components need a Bregman divergence")


def mixture_posterior(model: MixtureModel, z) -> ClassPosterior:
    """p(y=k | z) proportional to pi_k exp(-d(z, mu_k)); Bregman terms evaluated from the generator."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.means.shape[1],):
        raise DimensionError(f"point of shape {z.shape} does not match means {model.means.shape}")
    d = np.array([distance_between(model.divergence, z, mu) for mu in model.means])
    return ClassPosterior(softmax_neg(d, np.log(model.weights)))


# zero-shot ------------------------------------------------------------------------------


def standardize(meta_vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(meta_vectors, dtype=np.float64)
    sd = v.std(axis=0)
    sd[sd == 0] = 1.0
    return (v - v.mean(axis=0)) / sd


def unit_rows(x: Tensor) -> Tensor:
    n2 = x.square().sum(axis=1, keepdims=True)
    if np.any(n2.data == 0):
        raise DegenerateInputError("cannot normalize a zero-norm prototype")
    return x / sqrt(n2)


def zero_shot_prototypes(meta_embed: EmbeddingNet, meta_vectors, class_ids: Sequence[str] | None = None,
                         distance: DistanceFn | None = None, standardize_inputs: bool = False) -> PrototypeSet:
    """Unit-length prototypes ``g(v_k) / ||g(v_k)||``; gradients flow through the normalization."""
    v = np.atleast_2d(np.asarray(meta_vectors, dtype=np.float64))
    if standardize_inputs:
        v = standardize(v)
    protos = unit_rows(meta_embed(v))
    ids = list(class_ids) if class_ids is not None else [str(i) for i in range(len(v))]
    return PrototypeSet(protos, ids, distance or squared_euclidean())


def zero_shot_loss(query_embed: EmbeddingNet, meta_embed: EmbeddingNet, episode: Episode,
                   meta_vectors, distance: DistanceFn, standardize_inputs: bool = False) -> Tensor:
    """Episode loss with prototypes from class meta-data instead of support points."""
    protos = zero_shot_prototypes(meta_embed, meta_vectors, episode.class_ids, distance, standardize_inputs)
    zq = query_embed(episode.flat_query())
    log_p = log_softmax(-pairwise_distances(distance, zq, protos.prototypes), axis=1)
    return _nll_from_log_probs(log_p, episode.query_labels)
