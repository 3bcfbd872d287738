import json

import numpy as np
import pytest

from protonets.data import (AttributeClass, AttributeDataset, SyntheticSpec, bayes_accuracy_oracle, decode_tensor,
                            encode_tensor, gen_attribute_dataset, gen_gaussian_dataset, load_attribute_dataset,
                            load_dataset, rotate90, rotation_augment, save_attribute_dataset, save_dataset,
                            write_tensor)
from protonets.distances import squared_euclidean
from protonets.episodes import ClassRecord, EpisodeSpec, LabeledDataset, episode_stream
from protonets.errors import ContractError, LoadError
from protonets.models import classify_batch, compute_prototypes, identity_embedding


class TestGaussian:
    def test_zero_noise_limit(self):
        data = gen_gaussian_dataset(SyntheticSpec(3, 4, 5, seed=1), noise_sigma=0.0)
        for rec in data.classes:
            assert np.array_equal(rec.examples, np.tile(rec.true_mean, (5, 1)))

    def test_sample_mean_converges(self):
        sigma = 0.5
        data = gen_gaussian_dataset(SyntheticSpec(3, 6, 1000, noise_sigma=sigma, seed=2))
        for rec in data.classes:
            assert np.all(np.abs(rec.examples.mean(axis=0) - rec.true_mean) < 5 * sigma / np.sqrt(1000))

    def test_deterministic(self):
        a = gen_gaussian_dataset(SyntheticSpec(4, 3, 10, seed=3))
        b = gen_gaussian_dataset(SyntheticSpec(4, 3, 10, seed=3))
        assert all(x.examples.tobytes() == y.examples.tobytes() for x, y in zip(a.classes, b.classes))

    def test_means_within_scale(self):
        data = gen_gaussian_dataset(SyntheticSpec(20, 5, 2, mean_scale=2.0, seed=4))
        means = np.stack([r.true_mean for r in data.classes])
        assert np.all(np.abs(means) <= 2.0)

    @pytest.mark.parametrize("kw", [dict(noise_sigma=0.0), dict(examples_per_class=1)])
    def test_invalid_spec(self, kw):
        args = dict(n_classes=2, dim=2, examples_per_class=3) | kw
        with pytest.raises(ContractError):
            SyntheticSpec(**args)


class TestBayesOracle:
    def test_well_separated(self):
        sigma, dim = 0.01, 4
        data = gen_gaussian_dataset(SyntheticSpec(10, dim, 50, mean_scale=10, noise_sigma=sigma, seed=5))
        means = np.stack([r.true_mean for r in data.classes])
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(10) * 1e9
        assert gaps.min() > 10 * sigma * np.sqrt(dim)
        eps = episode_stream(data, EpisodeSpec(5, 1, 10), seed=0, count=100)
        assert bayes_accuracy_oracle(data, eps) > 0.999

    def test_identical_means_is_chance(self):
        rng = np.random.default_rng(0)
        classes = [ClassRecord(f"c{k}", rng.normal(size=(40, 3)), true_mean=np.zeros(3)) for k in range(5)]
        data = LabeledDataset(classes, (3,))
        eps = list(episode_stream(data, EpisodeSpec(5, 1, 10), seed=1, count=200))
        # ties resolve to the first class, so exactly 1/N_C of queries are right
        assert bayes_accuracy_oracle(data, eps) == pytest.approx(0.2, abs=1e-12)

    def test_dominates_identity_protonet(self):
        data = gen_gaussian_dataset(SyntheticSpec(20, 8, 40, noise_sigma=0.6, seed=6))
        eps = list(episode_stream(data, EpisodeSpec(5, 5, 10), seed=2, count=200))
        net = identity_embedding(8)
        accs = []
        for ep in eps:
            probs = classify_batch(compute_prototypes(net, ep, squared_euclidean()), ep.flat_query())
            accs.append(np.mean(probs.argmax(axis=1) == ep.query_labels))
        assert bayes_accuracy_oracle(data, eps) >= np.mean(accs)


class TestTensorFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        arr = np.array([[np.pi, -0.0, 1e-308], [np.inf, 5e-324, -1.5]])
        write_tensor(tmp_path / "t.pft", arr)
        back = decode_tensor((tmp_path / "t.pft").read_bytes())
        assert back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = encode_tensor(np.zeros((2, 3)))
        assert buf[:4] == b"PFT1"
        assert np.frombuffer(buf[4:20], "<u4").tolist() == [1, 2, 2, 3]
        assert len(buf) == 20 + 48

    def test_bad_magic(self):
        with pytest.raises(LoadError):
            decode_tensor(b"NOPE" + bytes(16))

    def test_truncated_payload(self):
        with pytest.raises(LoadError):
            decode_tensor(encode_tensor(np.ones(4))[:-1])


class TestManifest:
    def test_round_trip(self, tmp_path):
        data = gen_gaussian_dataset(SyntheticSpec(3, 4, 5, seed=7))
        back = load_dataset(save_dataset(data, tmp_path))
        assert back.class_ids == data.class_ids and back.input_shape == (4,)
        for a, b in zip(data.classes, back.classes):
            assert a.examples.tobytes() == b.examples.tobytes()

    def test_single_example_files(self, tmp_path):
        for i in range(3):
            write_tensor(tmp_path / f"x{i}.pft", np.full((2, 2), float(i)))
        doc = {"format_version": 1, "input_shape": [2, 2],
               "classes": [{"id": "a", "files": ["x0.pft", "x1.pft"]}, {"id": "b", "files": ["x2.pft"]}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        data = load_dataset(tmp_path / "m.json")
        assert data.by_id("a").examples.shape == (2, 2, 2)
        assert data.by_id("b").examples[0, 0, 0] == 2.0

    def test_empty_class_list(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"format_version": 1, "input_shape": [2], "classes": []}))
        with pytest.raises(LoadError):
            load_dataset(tmp_path / "m.json")

    def test_shape_mismatch_names_entry(self, tmp_path):
        write_tensor(tmp_path / "x.pft", np.zeros((3, 5)))
        doc = {"format_version": 1, "input_shape": [4], "classes": [{"id": "odd", "files": ["x.pft"]}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(LoadError, match="odd"):
            load_dataset(tmp_path / "m.json")

    def test_missing_file(self, tmp_path):
        doc = {"format_version": 1, "input_shape": [4], "classes": [{"id": "a", "files": ["gone.pft"]}]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(LoadError, match="gone.pft"):
            load_dataset(tmp_path / "m.json")


class TestRotation:
    def test_hand_permutation(self):
        img = np.arange(1.0, 10.0).reshape(3, 3)
        assert rotate90(img, 1).tolist() == [[3, 6, 9], [2, 5, 8], [1, 4, 7]]

    def test_four_quarter_turns_restore(self):
        img = np.random.default_rng(1).normal(size=(1, 5, 5))
        out = img
        for _ in range(4):
            out = rotate90(out, 1)
        assert np.array_equal(out, img)

    def test_class_count_and_partition(self):
        classes = [ClassRecord(f"c{k}", np.zeros((3, 1, 2, 2)) + k) for k in range(1200)]
        aug = rotation_augment(LabeledDataset(classes, (1, 2, 2)))
        assert len(aug) == 4800
        assert len(set(aug.class_ids)) == 4800
        assert all(len(c) == 3 for c in aug.classes)
        assert aug.by_id("c7@rot180").examples.shape == (3, 1, 2, 2)

    def test_rotated_class_content(self):
        img = np.arange(9.0).reshape(1, 1, 3, 3)
        aug = rotation_augment(LabeledDataset([ClassRecord("a", img)], (1, 3, 3)), rotations=(270,))
        assert np.array_equal(aug.by_id("a@rot270").examples[0, 0], np.rot90(img[0, 0], 3))

    def test_non_square(self):
        with pytest.raises(ContractError):
            rotation_augment(LabeledDataset([ClassRecord("a", np.zeros((1, 2, 3)))], (2, 3)))


class TestAttributes:
    def test_fixture_shapes(self, tmp_path):
        data = gen_attribute_dataset(5, 4, 8, 3, seed=0)
        back = load_attribute_dataset(save_attribute_dataset(data, tmp_path))
        assert len(back.classes) == 5
        assert back.attribute_dim == 4 and back.feature_dim == 8
        for a, b in zip(data.classes, back.classes):
            assert a.attributes.tobytes() == b.attributes.tobytes()
            assert a.features.tobytes() == b.features.tobytes()

    def test_missing_attribute_vector(self, tmp_path):
        save_attribute_dataset(gen_attribute_dataset(2, 3, 4, 2), tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["attributes"] = doc["attributes"][:1]
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(LoadError, match=doc["classes"][1]["id"]):
            load_attribute_dataset(tmp_path / "manifest.json")

    def test_dimension_mismatch(self, tmp_path):
        save_attribute_dataset(gen_attribute_dataset(2, 3, 4, 2), tmp_path)
        write_tensor(tmp_path / "class_00001_attr.pft", np.zeros(5))
        with pytest.raises(LoadError):
            load_attribute_dataset(tmp_path / "manifest.json")

    def test_in_memory_dims_must_agree(self):
        with pytest.raises(ContractError):
            AttributeDataset([AttributeClass("a", np.zeros(2), np.zeros((1, 3))),
                              AttributeClass("b", np.zeros(3), np.zeros((1, 3)))])

    def test_as_labeled_and_lookup(self):
        data = gen_attribute_dataset(3, 2, 4, 5, seed=1)
        assert data.as_labeled().input_shape == (4,)
        assert np.array_equal(data.attributes_for(["class0002"])[0], data.classes[2].attributes)
