"""Quick algebraic-equivalence and gradient checks, runnable from the CLI."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import distances as D
from .episodes import Episode
from .gradcheck import check_gradients
from .models import (MixtureModel, PrototypeSet, build_embedding, classify_query, compute_prototypes,
                     episode_loss, linear_head, linear_posterior, matching_net_predict, mixture_posterior)
from .rng import SplitMix64
from .tensor import no_grad


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _random_episode(rng: SplitMix64, way: int, shot: int, query: int, dim: int) -> Episode:
    s = rng.normals(way * shot * dim).reshape(way, shot, dim)
    q = rng.normals(way * query * dim).reshape(way, query, dim)
    return Episode([f"c{k}" for k in range(way)], s, q)


def check_mlp_gradients(seeds: int = 3) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        net = build_embedding("mlp:6-12-6", (6,), seed=seed)
        ep = _random_episode(SplitMix64(seed + 100), 2, 1, 1, 6)
        errs = check_gradients(lambda: episode_loss(net, ep, D.squared_euclidean()), net.named_parameters(),
                               skip_kinks=True)
        worst = max(worst, max(errs.values()))
    return CheckResult("mlp episode-loss gradients", worst < 1e-4, f"max relative error {worst:.2e}")


def check_conv_gradients() -> CheckResult:
    net = build_embedding("omniglot-conv:8", (1, 8, 8), seed=0)
    r = SplitMix64(7)
    ep = Episode(["a", "b"], r.normals(128).reshape(2, 1, 1, 8, 8), r.normals(128).reshape(2, 1, 1, 8, 8))
    errs = check_gradients(lambda: episode_loss(net, ep, D.squared_euclidean()), net.named_parameters(),
                           max_entries=8, skip_kinks=True)
    worst = max(errs.values())
    return CheckResult("conv episode-loss gradients", worst < 1e-4, f"max relative error {worst:.2e}")


def check_one_shot_equivalence(n: int = 200) -> CheckResult:
    rng = SplitMix64(11)
    worst = 0.0
    d = D.squared_euclidean()
    with no_grad():
        for i in range(n):
            net = build_embedding("mlp:5-8-4", (5,), seed=i)
            ep = _random_episode(rng, 4, 1, 1, 5)
            protos = compute_prototypes(net, ep, d)
            for x in ep.flat_query():
                a = matching_net_predict(net, ep, d, x).probabilities
                b = classify_query(protos, net(x[None]).data[0]).probabilities
                worst = max(worst, float(np.abs(a - b).max()))
    return CheckResult("one-shot matching == protonet", worst < 1e-12, f"max abs diff {worst:.1e}")


def check_linear_head(n: int = 500) -> CheckResult:
    rng = SplitMix64(12)
    worst = 0.0
    for _ in range(n):
        c = rng.normals(15).reshape(5, 3) * 2
        z = rng.normals(3) * 2
        protos = PrototypeSet(c, list("abcde"), D.squared_euclidean())
        W, b = linear_head(protos)
        diff = linear_posterior(W, b, z).probabilities - classify_query(protos, z).probabilities
        worst = max(worst, float(np.abs(diff).max()))
    return CheckResult("linear head == Euclidean posterior", worst < 1e-10, f"max abs diff {worst:.1e}")


def check_mixture(n: int = 500) -> CheckResult:
    rng = SplitMix64(13)
    worst = 0.0
    gen = D.bregman("sq_norm")
    for _ in range(n):
        mu = rng.normals(12).reshape(4, 3)
        z = rng.normals(3)
        post = mixture_posterior(MixtureModel(mu, np.full(4, 0.25), gen), z).probabilities
        ref = classify_query(PrototypeSet(mu, list("abcd"), D.squared_euclidean()), z).probabilities
        worst = max(worst, float(np.abs(post - ref).max()))
    return CheckResult("uniform mixture posterior == protonet", worst < 1e-10, f"max abs diff {worst:.1e}")


def check_bregman_identity(n: int = 500) -> CheckResult:
    rng = SplitMix64(14)
    b, e = D.bregman("sq_norm"), D.squared_euclidean()
    worst = max(abs(D.distance(b, x, y) - D.distance(e, x, y))
                for x, y in ((rng.normals(4), rng.normals(4)) for _ in range(n)))
    return CheckResult("bregman(|z|^2) == squared Euclidean", worst < 1e-10, f"max abs diff {worst:.1e}")


def check_mean_minimizer(n: int = 20) -> CheckResult:
    rng = SplitMix64(15)
    ok = True
    for i in range(n):
        pts = rng.normals(30).reshape(10, 3)
        ok &= D.mean_minimizer_check(D.squared_euclidean(), pts, pts.mean(axis=0), trials=100, radius=0.5, rng=i)
    return CheckResult("mean minimizes squared Euclidean divergence", bool(ok), f"{n} point sets")


CHECKS: list[Callable[[], CheckResult]] = [
    check_bregman_identity,
    check_mean_minimizer,
    check_linear_head,
    check_mixture,
    check_one_shot_equivalence,
    check_mlp_gradients,
    check_conv_gradients,
]


def run_all() -> list[CheckResult]:
    return [check() for check in CHECKS]
