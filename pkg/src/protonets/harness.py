"""Experiment orchestration: config, training loop, evaluation, grid sweeps, CSV.

Seeding: ``config.seed`` initializes the embedding weights directly; the
training episode stream uses ``SplitMix64(seed ^ TRAIN_STREAM)`` split once per
episode, and evaluation pre-assigns one seed per episode from
``SplitMix64(seed ^ EVAL_STREAM)`` so serial and threaded runs see the same episodes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import models
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (AttributeDataset, SyntheticSpec, gen_attribute_dataset, gen_gaussian_dataset,
                   load_attribute_dataset, load_dataset, rotation_augment)
from .distances import DistanceFn, parse_distance
from .episodes import EpisodeSpec, LabeledDataset, sample_episode
from .errors import ContractError, NumericError, ProtonetError
from .models import EmbeddingNet, LinearMap, build_embedding
from .optim import AdamState, adam_step
from .rng import SplitMix64
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"

TRAIN_STREAM = 0x5EED_7124
VAL_STREAM = 0x5EED_0A11
EVAL_STREAM = 0x5EED_E7A1
HEADS = ("protonet", "matching", "zero_shot")
REPORT_HEADER = ["head", "distance", "train_way", "train_shot", "eval_way", "eval_shot",
                 "episodes", "acc_mean", "ci95", "seed"]
LOG_HEADER = ["episode", "loss", "lr"]


class TrainingDiverged(ProtonetError, RuntimeError):
    pass


# configuration ---------------------------------------------------------------------


@dataclass(frozen=True)
class EarlyStopping:
    patience: int = 3
    eval_every: int = 500
    episodes: int = 100

    def __post_init__(self):
        if self.patience < 1 or self.eval_every < 1 or self.episodes < 1:
            raise ContractError(f"invalid early stopping settings {self}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    embedding: str
    train_spec: EpisodeSpec
    eval_spec: EpisodeSpec
    distance: str = "sq_euclidean"
    head: str = "protonet"
    initial_lr: float = 1e-3
    lr_halving_period: int = 2000
    max_episodes: int = 1000
    eval_episodes: int = 600
    seed: int = 0
    weight_decay: float = 0.0
    early_stopping: EarlyStopping | None = None
    standardize_attributes: bool = False

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ContractError("initial_lr must be positive")
        if self.lr_halving_period < 1 or self.max_episodes < 0 or self.eval_episodes < 1:
            raise ContractError("episode counts must be positive")
        if self.head not in HEADS:
            raise ContractError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        doc = dict(doc)
        try:
            train = doc.pop("train")
            ev = doc.pop("eval")
            kw = dict(
                dataset=doc.pop("dataset"),
                embedding=doc.pop("embedding"),
                train_spec=EpisodeSpec(int(train["way"]), int(train["shot"]), int(train["query"])),
                eval_spec=EpisodeSpec(int(ev["way"]), int(ev["shot"]), int(ev["query"])),
            )
        except KeyError as exc:
            raise ContractError(f"config is missing required field {exc}") from None
        es = doc.pop("early_stopping", None)
        if es:
            kw["early_stopping"] = EarlyStopping(**es)
        doc.pop("grid", None)
        doc.pop("description", None)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**kw, **doc)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContractError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["train"] = _spec_doc(doc.pop("train_spec"))
        doc["eval"] = _spec_doc(doc.pop("eval_spec"))
        return doc

    def with_train(self, **kw) -> "ExperimentConfig":
        return replace(self, train_spec=replace(self.train_spec, **kw))

    def with_eval(self, **kw) -> "ExperimentConfig":
        return replace(self, eval_spec=replace(self.eval_spec, **kw))


def preset_path(name: str) -> Path:
    """Path of a bundled config, e.g. ``preset_path("synthetic")``."""
    path = PRESET_DIR / f"{name}.json"
    if not path.is_file():
        known = sorted(p.stem for p in PRESET_DIR.glob("*.json"))
        raise ContractError(f"unknown preset {name!r}; bundled presets: {known}")
    return path


def _spec_doc(spec: dict) -> dict:
    return {"way": spec["n_way"], "shot": spec["n_support"], "query": spec["n_query"]}


def lr_schedule(initial_lr: float, episode_index: int, halving_period: int) -> float:
    if episode_index < 0:
        raise ContractError("episode index must be non-negative")
    return initial_lr * 0.5 ** (episode_index // halving_period)


# data splits -----------------------------------------------------------------------


@dataclass
class Splits:
    train: LabeledDataset | AttributeDataset
    val: LabeledDataset | AttributeDataset | None
    test: LabeledDataset | AttributeDataset


def _split_counts(ds_cfg: dict, total: int) -> tuple[int, int, int]:
    val = int(ds_cfg.get("val_classes", 0))
    test = int(ds_cfg.get("test_classes", 0))
    train = int(ds_cfg.get("train_classes", total - val - test))
    if train < 1 or test < 1 or train + val + test > total:
        raise ContractError(f"cannot split {total} classes into train={train}, val={val}, test={test}")
    return train, val, test


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def load_splits(config: ExperimentConfig, base_dir: Path | None = None) -> Splits:
    """Materialize train/val/test class splits described by ``config.dataset``.

    Accepted forms: ``{"synthetic": {...}}``, ``{"synthetic_attributes": {...}}``,
    ``{"manifest": path}``, ``{"attributes": path}`` (each split by
    ``train_classes``/``val_classes``/``test_classes`` counts), or explicit
    ``{"train_manifest", "test_manifest"[, "val_manifest"]}``. ``rotations``
    expands every split with rotated copies of each class.
    """
    ds = config.dataset
    if "train_manifest" in ds:
        train = load_dataset(_resolve(ds["train_manifest"], base_dir))
        test = load_dataset(_resolve(ds["test_manifest"], base_dir))
        val = load_dataset(_resolve(ds["val_manifest"], base_dir)) if ds.get("val_manifest") else None
    else:
        if "synthetic" in ds:
            full = gen_gaussian_dataset(SyntheticSpec(**ds["synthetic"]))
        elif "synthetic_attributes" in ds:
            full = gen_attribute_dataset(**ds["synthetic_attributes"])
        elif "manifest" in ds:
            full = load_dataset(_resolve(ds["manifest"], base_dir))
        elif "attributes" in ds:
            full = load_attribute_dataset(_resolve(ds["attributes"], base_dir))
        else:
            raise ContractError("dataset config needs one of synthetic, synthetic_attributes, manifest, "
                                "attributes, train_manifest")
        n_train, n_val, n_test = _split_counts(ds, len(full.classes))
        train, val, test = full.split(n_train, n_val, n_test)
        if n_val == 0:
            val = None
    rotations = ds.get("rotations")
    if rotations:
        train = rotation_augment(train, rotations)
        test = rotation_augment(test, rotations)
        val = rotation_augment(val, rotations) if val is not None else None
    if config.head == "zero_shot" and not isinstance(train, AttributeDataset):
        raise ContractError("zero_shot head needs an attribute dataset")
    return Splits(train, val, test)


# models ----------------------------------------------------------------------------


@dataclass
class Model:
    """Query/support embedding plus, for zero-shot, the meta-data embedding."""

    embed: EmbeddingNet
    meta_embed: EmbeddingNet | None = None

    def parameters(self):
        ps = self.embed.parameters()
        if self.meta_embed is not None:
            ps += self.meta_embed.parameters()
        return ps

    def nets(self) -> dict[str, EmbeddingNet]:
        out = {"f": self.embed}
        if self.meta_embed is not None:
            out["g"] = self.meta_embed
        return out

    def train(self):
        for n in self.nets().values():
            n.train()

    def eval(self):
        for n in self.nets().values():
            n.eval()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for prefix, net in self.nets().items() for k, v in net.state_dict().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, net in self.nets().items():
            net.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")})

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state_dict())


def build_model(config: ExperimentConfig, splits: Splits) -> Model:
    if config.head == "zero_shot":
        train = splits.train
        f = build_embedding(config.embedding, (train.feature_dim,), seed=config.seed)
        rng = SplitMix64(config.seed + 1)
        g = EmbeddingNet([LinearMap(train.attribute_dim, f.output_dim, rng)], (train.attribute_dim,), "meta-linear")
        return Model(f, g)
    return Model(build_embedding(config.embedding, splits.train.input_shape, seed=config.seed))


def load_model(config: ExperimentConfig, splits: Splits, checkpoint: str | Path) -> Model:
    model = build_model(config, splits)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _distance(config_distance: str | DistanceFn, model: Model) -> DistanceFn:
    if isinstance(config_distance, DistanceFn):
        return config_distance
    return parse_distance(config_distance, dim=model.embed.output_dim)


def _episode_loss(model: Model, head: str, data, spec: EpisodeSpec, rng: SplitMix64, distance: DistanceFn,
                  standardize: bool):
    if head == "zero_shot":
        ep = sample_episode(data.as_labeled(), replace(spec, n_support=0), rng)
        return models.zero_shot_loss(model.embed, model.meta_embed, ep, data.attributes_for(ep.class_ids),
                                     distance, standardize)
    ep = sample_episode(data, spec, rng)
    if head == "matching":
        return models.matching_loss(model.embed, ep, distance)
    return models.episode_loss(model.embed, ep, distance)


# training --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    log: list[tuple[int, float, float]]
    val_history: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for ep, loss, lr in self.log:
            w.writerow([ep, repr(loss), repr(lr)])
        return buf.getvalue()


def validation_loss(model: Model, config: ExperimentConfig, data, n_episodes: int, distance: DistanceFn) -> float:
    # the held-out split may have fewer classes than the training way
    spec = replace(config.train_spec, n_way=min(config.train_spec.n_way, len(data.classes)))
    model.eval()
    master = SplitMix64(config.seed ^ VAL_STREAM)
    try:
        with no_grad():
            losses = [float(_episode_loss(model, config.head, data, spec, master.split(), distance,
                                          config.standardize_attributes).data) for _ in range(n_episodes)]
    finally:
        model.train()
    return float(np.mean(losses))


def train(config: ExperimentConfig, splits: Splits | None = None, model: Model | None = None) -> TrainResult:
    """Episodic Adam training with the halving learning-rate schedule."""
    splits = splits or load_splits(config)
    model = model or build_model(config, splits)
    distance = _distance(config.distance, model)
    params = model.parameters()
    state = AdamState.for_params(params, learning_rate=config.initial_lr)
    stream = SplitMix64(config.seed ^ TRAIN_STREAM)
    es = config.early_stopping if splits.val is not None else None
    best, best_state, bad_rounds = math.inf, None, 0
    result = TrainResult(model, [])
    model.train()
    for episode in range(config.max_episodes):
        lr = lr_schedule(config.initial_lr, episode, config.lr_halving_period)
        state.learning_rate = lr
        for p in params:
            p.grad = None
        try:
            loss = _episode_loss(model, config.head, splits.train, config.train_spec, stream.split(), distance,
                                 config.standardize_attributes)
            loss.backward()
        except NumericError as exc:
            raise TrainingDiverged(f"training diverged at episode {episode}: {exc}") from exc
        adam_step(params, [p.grad for p in params], state, config.weight_decay)
        result.log.append((episode, float(loss.data), lr))
        if es is not None and (episode + 1) % es.eval_every == 0:
            vl = validation_loss(model, config, splits.val, es.episodes, distance)
            result.val_history.append(vl)
            log.info("episode %d: validation loss %.6f", episode + 1, vl)
            if vl < best:
                best, best_state, bad_rounds = vl, model.state_dict(), 0
            else:
                bad_rounds += 1
                if bad_rounds >= es.patience:
                    result.stopped_early = True
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


# evaluation ------------------------------------------------------------------------


@dataclass
class EvalRow:
    head: str
    distance: str
    train_way: int
    train_shot: int
    eval_way: int
    eval_shot: int
    episodes: int
    acc_mean: float
    ci95: float
    seed: int
    wall_time: float = 0.0
    accuracies: list[float] = field(default_factory=list, repr=False)
    error: str | None = None

    def csv_fields(self) -> list[str]:
        return [self.head, self.distance, str(self.train_way), str(self.train_shot), str(self.eval_way),
                str(self.eval_shot), str(self.episodes), repr(float(self.acc_mean)), repr(float(self.ci95)),
                str(self.seed)]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def ci95_half_width(accuracies: Sequence[float]) -> float:
    a = np.asarray(accuracies, dtype=np.float64)
    if len(a) < 2:
        return 0.0
    return float(1.96 * a.std(ddof=1) / math.sqrt(len(a)))


def eval_episode_seeds(seed: int, n_episodes: int) -> list[int]:
    """Per-episode seeds used by :func:`evaluate`; episode ``i`` is ``sample_episode(data, spec, SplitMix64(seeds[i]))``."""
    master = SplitMix64(seed ^ EVAL_STREAM)
    return [master.next_u64() for _ in range(n_episodes)]


def _episode_accuracy(model: Model, head: str, data, spec: EpisodeSpec, seed: int, distance: DistanceFn,
                      standardize: bool) -> float:
    rng = SplitMix64(seed)
    if head == "zero_shot":
        ep = sample_episode(data.as_labeled(), replace(spec, n_support=0), rng)
        protos = models.zero_shot_prototypes(model.meta_embed, data.attributes_for(ep.class_ids), ep.class_ids,
                                             distance, standardize)
        probs = models.classify_batch(protos, model.embed(ep.flat_query()))
    else:
        ep = sample_episode(data, spec, rng)
        zs = model.embed(ep.flat_support()).data
        zq = model.embed(ep.flat_query()).data
        if head == "matching":
            probs = models.matching_batch(zs, zq, ep.n_way, ep.n_support, distance)
        else:
            protos = models.PrototypeSet(models.prototypes_from_embeddings(Tensor(zs), ep.n_way, ep.n_support),
                                         ep.class_ids, distance)
            probs = models.classify_batch(protos, zq)
    return float(np.mean(np.argmax(probs, axis=1) == ep.query_labels))


def evaluate(model: Model, data, spec: EpisodeSpec, n_episodes: int, distance: str | DistanceFn,
             head: str = "protonet", seed: int = 0, workers: int = 1,
             train_spec: EpisodeSpec | None = None, standardize: bool = False) -> EvalRow:
    """Mean per-episode accuracy and its 95% confidence half-width.

    Runs in eval mode without touching parameters or batchnorm statistics.
    """
    if head not in HEADS:
        raise ContractError(f"unknown head {head!r}")
    dist = _distance(distance, model)
    seeds = eval_episode_seeds(seed, n_episodes)
    start = time.perf_counter()
    was_training = model.embed.training
    model.eval()
    try:
        with no_grad():
            fn = lambda s: _episode_accuracy(model, head, data, spec, s, dist, standardize)  # noqa: E731
            if workers > 1:
                with ThreadPoolExecutor(workers) as pool:
                    accs = list(pool.map(fn, seeds))
            else:
                accs = [fn(s) for s in seeds]
    finally:
        if was_training:
            model.train()
    ts = train_spec or spec
    return EvalRow(head, dist.name, ts.n_way, ts.n_support, spec.n_way, spec.n_support, n_episodes,
                   float(np.mean(accs)), ci95_half_width(accs), seed, time.perf_counter() - start, accs)


def evaluate_config(model: Model, config: ExperimentConfig, splits: Splits, workers: int = 1) -> EvalRow:
    row = evaluate(model, splits.test, config.eval_spec, config.eval_episodes, config.distance, config.head,
                   config.seed, workers, config.train_spec, config.standardize_attributes)
    return row


def train_and_evaluate(config: ExperimentConfig, splits: Splits | None = None) -> tuple[TrainResult, EvalRow]:
    splits = splits or load_splits(config)
    result = train(config, splits)
    return result, evaluate_config(result.model, config, splits)


def run_grid(base: ExperimentConfig, distances: Sequence[str] | None = None,
             train_ways: Sequence[int] | None = None, train_shots: Sequence[int] | None = None,
             heads: Sequence[str] | None = None, match_eval_shot: bool = False,
             splits: Splits | None = None) -> EvalReport:
    """Train and evaluate one model per grid cell against a fixed evaluation spec.

    A failing cell is logged and reported with NaN accuracy; the sweep continues.
    With ``match_eval_shot`` the evaluation shot follows each cell's training shot.
    """
    splits = splits or load_splits(base)
    report = EvalReport()
    for head in heads or [base.head]:
        for dist in distances or [base.distance]:
            for way in train_ways or [base.train_spec.n_way]:
                for shot in train_shots or [base.train_spec.n_support]:
                    cfg = replace(base, head=head, distance=dist).with_train(n_way=way, n_support=shot)
                    if match_eval_shot:
                        cfg = cfg.with_eval(n_support=shot)
                    try:
                        _, row = train_and_evaluate(cfg, splits)
                    except ProtonetError as exc:
                        log.warning("grid cell %s/%s/%d-way/%d-shot failed: %s", head, dist, way, shot, exc)
                        row = EvalRow(head, dist, way, shot, cfg.eval_spec.n_way, cfg.eval_spec.n_support,
                                      cfg.eval_episodes, math.nan, math.nan, cfg.seed, error=str(exc))
                    report.rows.append(row)
    return report
