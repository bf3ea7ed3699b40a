import numpy as np
import pytest
import torch
import torch.nn as nn

from errors import ConfigurationError, MissingArtifactError, ShapeMismatchError, UnknownVariantError
from sign_classifier import (ClassifierSpec, TrainConfig, build, checkpoint_hash, layer_plan, load_checkpoint,
                             save_checkpoint, save_training_log, train)
from sign_dataset import DatasetSplit, LabeledImage


def _kinds(plan):
    return [step[0] for step in plan]


class TestLayerPlan:
    def test_base_cnn(self):
        plan = layer_plan(ClassifierSpec("cnn", 26, 32))
        assert _kinds(plan) == ["conv", "relu", "maxpool", "conv", "relu", "maxpool", "conv", "relu",
                                "flatten", "dense", "softmax"]
        assert [step[1] for step in plan if step[0] == "conv"] == [32, 64, 128]

    def test_cnn2_adds_a_conv_block(self):
        plan = layer_plan(ClassifierSpec("cnn2", 26, 32))
        assert _kinds(plan).count("conv") == 4
        assert _kinds(plan)[-3:] == ["flatten", "dense", "softmax"]

    def test_cnn3_adds_activation_after_dense(self):
        plan = layer_plan(ClassifierSpec("cnn3", 26, 32))
        assert _kinds(plan).count("conv") == 4
        assert _kinds(plan)[-3:] == ["dense", "relu", "softmax"]

    def test_cnn4_swaps_relu_for_tanh(self):
        kinds = _kinds(layer_plan(ClassifierSpec("cnn4", 26, 32)))
        assert "relu" not in kinds
        assert kinds.count("tanh") == 3

    def test_unknown_variant(self):
        with pytest.raises(UnknownVariantError):
            layer_plan(ClassifierSpec("cnn9", 26, 32))

    def test_num_classes_below_two(self):
        with pytest.raises(ConfigurationError):
            ClassifierSpec("cnn", 1, 32)


class TestTrainedClassifier:
    @pytest.mark.parametrize("variant", ["cnn", "cnn2", "cnn3", "cnn4"])
    def test_probabilities_sum_to_one(self, variant):
        model = build(ClassifierSpec(variant, 26, 32), seed=1)
        images = np.random.RandomState(0).rand(3, 32, 32, 3).astype(np.float32)

        probabilities = model.probabilities(images)

        assert probabilities.shape == (3, 26)
        np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-5)
        assert np.all(probabilities >= 0)

    def test_same_seed_same_weights(self):
        first = build(ClassifierSpec("cnn", 5, 16), seed=3)
        second = build(ClassifierSpec("cnn", 5, 16), seed=3)
        for a, b in zip(first.network.parameters(), second.network.parameters()):
            assert torch.equal(a, b)

    def test_build_leaves_global_rng_alone(self):
        torch.manual_seed(11)
        expected = torch.rand(1)
        torch.manual_seed(11)
        build(ClassifierSpec("cnn", 5, 16), seed=3)
        assert torch.equal(torch.rand(1), expected)

    def test_wrong_shape(self):
        model = build(ClassifierSpec("cnn", 5, 32))
        with pytest.raises(ShapeMismatchError):
            model.predict(np.zeros((31, 32, 3), dtype=np.float32))

    def test_exact_ties_pick_lowest_index(self):
        model = build(ClassifierSpec("cnn", 4, 16))
        linear = model.network[-1]
        with torch.no_grad():
            linear.weight.zero_()
            linear.bias.copy_(torch.tensor([0.0, 2.0, 2.0, 1.0]))

        assert model.predict(np.zeros((16, 16, 3), dtype=np.float32)).label == 1

    @pytest.mark.parametrize("variant", ["cnn", "cnn4"])
    def test_gradient_matches_finite_differences(self, variant):
        model = build(ClassifierSpec(variant, 3, 8), seed=0)
        model.network.double()
        pixels = np.random.RandomState(0).rand(8, 8, 3)

        loss, gradient = model.loss_and_input_gradient(pixels, 2)

        assert gradient.shape == pixels.shape
        h = 1e-6
        sampled = np.random.RandomState(1).choice(pixels.size, size=20, replace=False)
        for index in (np.unravel_index(flat, pixels.shape) for flat in sampled):
            bumped_up, bumped_down = pixels.copy(), pixels.copy()
            bumped_up[index] += h
            bumped_down[index] -= h
            numeric = (model.loss_and_input_gradient(bumped_up, 2)[0]
                       - model.loss_and_input_gradient(bumped_down, 2)[0]) / (2 * h)
            assert abs(numeric - gradient[index]) <= 1e-3 * max(abs(numeric), abs(gradient[index])) + 1e-7

    def test_target_label_out_of_range(self):
        model = build(ClassifierSpec("cnn", 3, 8))
        with pytest.raises(ConfigurationError):
            model.loss_and_input_gradient(np.zeros((8, 8, 3), dtype=np.float32), 3)


class TestTraining:
    def test_toy_classifier_learns(self, toy_classifier, toy_split):
        assert toy_classifier.trained
        assert toy_classifier.accuracy(toy_split.test) == 1.0

    def test_training_is_deterministic(self, toy_split):
        cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3, seed=5)
        first, first_log = train(build(ClassifierSpec("cnn", 2, 16), seed=5), toy_split, cfg, verbose=False)
        second, second_log = train(build(ClassifierSpec("cnn", 2, 16), seed=5), toy_split, cfg, verbose=False)

        assert first_log["train_loss"].tolist() == second_log["train_loss"].tolist()
        for a, b in zip(first.network.parameters(), second.network.parameters()):
            assert torch.equal(a, b)

    def test_log_has_one_row_per_epoch(self, toy_split, tmp_path):
        cfg = TrainConfig(epochs=3, batch_size=16, learning_rate=1e-3, seed=0)
        _, log = train(build(ClassifierSpec("cnn", 2, 16)), toy_split, cfg, verbose=False)

        assert log["epoch"].tolist() == [1, 2, 3]
        save_training_log(log, tmp_path / "logs" / "training.csv")
        assert (tmp_path / "logs" / "training.csv").read_text().startswith("epoch,train_loss,test_accuracy")

    def test_label_outside_catalog(self):
        images = [LabeledImage(np.zeros((16, 16, 3), dtype=np.float32), 5, "x")]
        dataset_split = DatasetSplit(images, [], 0, 0.8)
        with pytest.raises(ConfigurationError):
            train(build(ClassifierSpec("cnn", 2, 16)), dataset_split, TrainConfig(epochs=1), verbose=False)

    def test_bad_train_config(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)


class TestCheckpoints:
    def test_round_trip_preserves_predictions(self, toy_classifier, toy_split, tmp_path):
        path = save_checkpoint(toy_classifier, tmp_path / "cnn.pt", config_hash="h1")

        loaded = load_checkpoint(path)

        assert checkpoint_hash(path) == "h1"
        assert loaded.class_names == toy_classifier.class_names
        pixels = [image.pixels for image in toy_split.test]
        np.testing.assert_array_equal(loaded.predict_labels(pixels), toy_classifier.predict_labels(pixels))

    def test_missing_checkpoint_names_producer(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="train-classifier"):
            load_checkpoint(tmp_path / "absent.pt")
        assert checkpoint_hash(tmp_path / "absent.pt") is None

    def test_wrong_kind_is_rejected(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"format_version": 1, "kind": "attention", "state_dict": nn.Linear(1, 1).state_dict()}, path)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    @pytest.mark.parametrize("content", [b"", b"not a checkpoint", b"PK\x03\x04truncated"])
    def test_unreadable_checkpoint_names_producer(self, tmp_path, content):
        path = tmp_path / "cnn.pt"
        path.write_bytes(content)

        with pytest.raises(ConfigurationError, match="train-classifier") as excinfo:
            load_checkpoint(path)

        assert str(path) in str(excinfo.value)
        assert checkpoint_hash(path) is None
