"""Prototypical networks for few-shot and zero-shot classification, on a small numpy autodiff core."""

from .distances import (DistanceFn, bregman, cosine, distance, mahalanobis_diag, mean_minimizer_check,
                        pairwise_distances, parse_distance, squared_euclidean)
from .episodes import ClassRecord, Episode, EpisodeSpec, LabeledDataset, random_sample, sample_episode
from .models import (ClassPosterior, EmbeddingNet, MixtureModel, PrototypeSet, build_embedding, classify_query,
                     compute_prototypes, episode_loss, linear_head, matching_net_predict, mixture_posterior,
                     zero_shot_prototypes)
from .rng import SplitMix64
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ClassPosterior", "ClassRecord", "DistanceFn", "EmbeddingNet", "Episode", "EpisodeSpec", "LabeledDataset",
    "MixtureModel", "PrototypeSet", "SplitMix64", "Tensor", "bregman", "build_embedding", "classify_query",
    "compute_prototypes", "cosine", "distance", "episode_loss", "linear_head", "mahalanobis_diag",
    "matching_net_predict", "mean_minimizer_check", "mixture_posterior", "no_grad", "pairwise_distances",
    "parse_distance", "random_sample", "sample_episode", "squared_euclidean", "zero_shot_prototypes",
]
