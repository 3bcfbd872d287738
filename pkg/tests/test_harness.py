import csv
import io
import json
import math

import numpy as np
import pytest

from protonets.checkpoint import encode_checkpoint
from protonets.episodes import ClassRecord, EpisodeSpec, LabeledDataset
from protonets.errors import ContractError
from protonets.harness import (PRESET_DIR, REPORT_HEADER, EarlyStopping, ExperimentConfig, Model, Splits,
                               TrainingDiverged, build_model, ci95_half_width, evaluate, load_splits, lr_schedule,
                               preset_path, run_grid, train, train_and_evaluate, validation_loss)
from protonets.models import build_embedding, identity_embedding
from protonets.rng import SplitMix64


def small_config(**kw):
    base = dict(
        dataset={"synthetic": {"n_classes": 12, "dim": 4, "examples_per_class": 30, "noise_sigma": 0.3, "seed": 3},
                 "test_classes": 4},
        embedding="mlp:4-16-8",
        train_spec=EpisodeSpec(5, 2, 3),
        eval_spec=EpisodeSpec(3, 2, 5),
        max_episodes=50,
        eval_episodes=40,
        seed=1,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def separated_data(n_classes=6, dim=3, per_class=20, scale=100.0, sigma=0.01, same_mean=False):
    r = SplitMix64(0)
    classes = []
    for k in range(n_classes):
        mean = np.zeros(dim) if same_mean else np.eye(n_classes, dim)[k] * scale + (k >= dim) * scale * k
        classes.append(ClassRecord(f"c{k}", mean + sigma * r.normals(per_class * dim).reshape(per_class, dim), mean))
    return LabeledDataset(classes, (dim,))


class TestSchedule:
    @pytest.mark.parametrize("episode,expected", [(0, 1e-3), (1999, 1e-3), (2000, 5e-4), (4000, 2.5e-4)])
    def test_halving(self, episode, expected):
        assert lr_schedule(1e-3, episode, 2000) == pytest.approx(expected, rel=1e-15)

    def test_negative_index(self):
        with pytest.raises(ContractError):
            lr_schedule(1e-3, -1, 2000)


class TestConfig:
    @pytest.mark.parametrize("name", sorted(p.stem for p in PRESET_DIR.glob("*.json")))
    def test_bundled_presets_parse(self, name):
        cfg = ExperimentConfig.from_json(preset_path(name))
        assert cfg.initial_lr > 0 and cfg.eval_episodes > 0

    def test_paper_protocol_presets(self):
        om = ExperimentConfig.from_json(preset_path("omniglot"))
        assert (om.train_spec.n_way, om.train_spec.n_query, om.initial_lr, om.lr_halving_period) == (60, 5, 1e-3, 2000)
        zs = ExperimentConfig.from_json(preset_path("zeroshot"))
        assert (zs.train_spec.n_way, zs.train_spec.n_query, zs.initial_lr, zs.weight_decay) == (50, 10, 1e-4, 1e-5)

    def test_unknown_preset(self):
        with pytest.raises(ContractError, match="bundled presets"):
            preset_path("imagenet")

    def test_round_trip(self):
        cfg = small_config(early_stopping=EarlyStopping(2, 10, 5))
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        doc = small_config().to_dict() | {"learning_rate": 0.1}
        with pytest.raises(ContractError, match="learning_rate"):
            ExperimentConfig.from_dict(doc)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ContractError, match="nowhere.json"):
            ExperimentConfig.from_json(tmp_path / "nowhere.json")

    @pytest.mark.parametrize("kw", [dict(initial_lr=0.0), dict(eval_episodes=0), dict(head="svm")])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            small_config(**kw)

    def test_split_counts(self):
        splits = load_splits(small_config())
        assert (len(splits.train), splits.val, len(splits.test)) == (8, None, 4)


class TestTrain:
    def test_zero_episodes_leaves_network_unchanged(self):
        cfg = small_config(max_episodes=0)
        splits = load_splits(cfg)
        fresh = build_model(cfg, splits).state_dict()
        trained = train(cfg, splits).model.state_dict()
        assert all(np.array_equal(fresh[k], trained[k]) for k in fresh)

    def test_loss_improves_over_500_episodes(self):
        cfg = small_config(max_episodes=500)
        losses = [loss for _, loss, _ in train(cfg).log]
        assert np.mean(losses[-100:]) < np.mean(losses[:100])

    def test_deterministic(self):
        a = train(small_config()).model.state_dict()
        b = train(small_config()).model.state_dict()
        assert encode_checkpoint(a) == encode_checkpoint(b)

    def test_log_format(self):
        result = train(small_config(max_episodes=3, lr_halving_period=2))
        rows = list(csv.reader(io.StringIO(result.log_csv())))
        assert rows[0] == ["episode", "loss", "lr"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
        assert [float(r[2]) for r in rows[1:]] == [1e-3, 1e-3, 5e-4]

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_is_reported(self):
        cfg = small_config(dataset={"synthetic": {"n_classes": 8, "dim": 4, "examples_per_class": 10,
                                                  "mean_scale": 1e200, "seed": 0}, "test_classes": 2})
        with pytest.raises(TrainingDiverged, match="episode 0"):
            train(cfg)

    def test_insufficient_data(self):
        from protonets.errors import InsufficientDataError

        with pytest.raises(InsufficientDataError):
            train(small_config(train_spec=EpisodeSpec(20, 1, 1)))

    def test_early_stopping_restores_best(self):
        ds = {"synthetic": {"n_classes": 16, "dim": 4, "examples_per_class": 30, "noise_sigma": 0.8, "seed": 5},
              "val_classes": 4, "test_classes": 4}
        cfg = small_config(dataset=ds, max_episodes=3000, initial_lr=3e-2,
                           early_stopping=EarlyStopping(patience=1, eval_every=25, episodes=20))
        splits = load_splits(cfg)
        result = train(cfg, splits)
        assert result.stopped_early and len(result.log) < 3000
        model = result.model
        from protonets.distances import squared_euclidean

        restored = validation_loss(model, cfg, splits.val, 20, squared_euclidean())
        assert restored == min(result.val_history)

    def test_weight_decay_shrinks_weights(self):
        plain = train(small_config(max_episodes=100)).model.state_dict()
        decayed = train(small_config(max_episodes=100, weight_decay=1.0)).model.state_dict()
        norm = lambda s: sum(float((v ** 2).sum()) for k, v in s.items() if k.endswith("weight"))  # noqa: E731
        assert norm(decayed) < norm(plain)


class TestEvaluate:
    def test_perfect_model(self):
        row = evaluate(Model(identity_embedding(3)), separated_data(), EpisodeSpec(5, 1, 5), 50, "sq_euclidean")
        assert row.acc_mean == 1.0 and row.ci95 == 0.0

    def test_chance_level(self):
        data = separated_data(n_classes=5, sigma=1.0, same_mean=True, per_class=40)
        row = evaluate(Model(identity_embedding(3)), data, EpisodeSpec(5, 1, 5), 400, "sq_euclidean")
        assert abs(row.acc_mean - 0.2) < 4 * row.ci95

    def test_ci_recomputation(self):
        data = separated_data(sigma=60.0)
        row = evaluate(Model(identity_embedding(3)), data, EpisodeSpec(4, 2, 3), 100, "sq_euclidean", seed=4)
        a = np.array(row.accuracies)
        ref = 1.96 * math.sqrt(((a - a.mean()) ** 2).sum() / (len(a) - 1)) / math.sqrt(len(a))
        assert abs(row.ci95 - ref) < 1e-12
        assert abs(row.acc_mean - a.mean()) < 1e-15 and 0 <= row.acc_mean <= 1

    def test_ci_small_samples(self):
        assert ci95_half_width([0.5]) == 0.0 and ci95_half_width([]) == 0.0

    def test_read_only(self):
        r = SplitMix64(1)
        data = LabeledDataset([ClassRecord(f"c{k}", r.normals(6 * 64).reshape(6, 1, 8, 8)) for k in range(4)],
                              (1, 8, 8))
        model = Model(build_embedding("omniglot-conv:2", (1, 8, 8), seed=0))
        before = encode_checkpoint(model.state_dict())
        evaluate(model, data, EpisodeSpec(3, 2, 2), 10, "sq_euclidean")
        assert encode_checkpoint(model.state_dict()) == before
        assert model.embed.training

    @pytest.mark.parametrize("head", ["protonet", "matching"])
    def test_threaded_matches_serial(self, head):
        data = separated_data(sigma=50.0)
        model = Model(build_embedding("mlp:3-6", (3,), seed=2))
        a = evaluate(model, data, EpisodeSpec(4, 3, 4), 60, "cosine", head=head, seed=9)
        b = evaluate(model, data, EpisodeSpec(4, 3, 4), 60, "cosine", head=head, seed=9, workers=4)
        assert a.accuracies == b.accuracies and a.csv_fields() == b.csv_fields()

    def test_unknown_head(self):
        with pytest.raises(ContractError):
            evaluate(Model(identity_embedding(3)), separated_data(), EpisodeSpec(2, 1, 1), 1, "sq_euclidean", "knn")


class TestGrid:
    def test_single_cell_is_train_and_evaluate(self):
        cfg = small_config()
        _, row = train_and_evaluate(cfg)
        report = run_grid(cfg)
        assert len(report.rows) == 1 and report.rows[0].csv_fields() == row.csv_fields()

    def test_two_distances_share_eval_spec_and_reproduce(self):
        cfg = small_config()
        first = run_grid(cfg, distances=["sq_euclidean", "cosine"])
        assert [r.distance for r in first.rows] == ["sq_euclidean", "cosine"]
        assert len({(r.eval_way, r.eval_shot, r.episodes) for r in first.rows}) == 1
        again = run_grid(cfg, distances=["sq_euclidean", "cosine"])
        assert first.to_csv() == again.to_csv()

    def test_failed_cell_does_not_stop_sweep(self):
        report = run_grid(small_config(max_episodes=5), train_ways=[50, 3])
        assert math.isnan(report.rows[0].acc_mean) and report.rows[0].error
        assert report.rows[1].error is None and not math.isnan(report.rows[1].acc_mean)

    def test_match_eval_shot(self):
        report = run_grid(small_config(max_episodes=5), train_shots=[1, 3], match_eval_shot=True)
        assert [(r.train_shot, r.eval_shot) for r in report.rows] == [(1, 1), (3, 3)]

    def test_csv_schema(self):
        text = run_grid(small_config(max_episodes=2), heads=["protonet", "matching"]).to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == REPORT_HEADER
        assert [r[0] for r in rows[1:]] == ["protonet", "matching"]
        assert all(len(r) == len(REPORT_HEADER) for r in rows)


class TestZeroShotHarness:
    def test_trains_and_evaluates(self):
        ds = {"synthetic_attributes": {"n_classes": 30, "attr_dim": 4, "feature_dim": 6, "examples_per_class": 12,
                                       "seed": 1}, "test_classes": 10}
        cfg = small_config(dataset=ds, embedding="cub-linear:6-6", head="zero_shot", train_spec=EpisodeSpec(10, 0, 4),
                           eval_spec=EpisodeSpec(5, 0, 5), max_episodes=20, initial_lr=1e-2, weight_decay=1e-5)
        result, row = train_and_evaluate(cfg)
        assert set(result.model.state_dict()) == {"f.0.weight", "g.0.weight"}
        assert row.head == "zero_shot" and row.eval_shot == 0

    def test_needs_attribute_data(self):
        with pytest.raises(ContractError):
            load_splits(small_config(head="zero_shot"))

    def test_splits_type(self):
        assert isinstance(load_splits(small_config()), Splits)


def test_report_row_has_no_wall_time_column():
    row = evaluate(Model(identity_embedding(3)), separated_data(), EpisodeSpec(2, 1, 1), 3, "sq_euclidean")
    assert len(row.csv_fields()) == len(REPORT_HEADER) and row.wall_time >= 0
    json.dumps(row.csv_fields())
