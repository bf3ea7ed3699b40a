import glob
import os

import pytest

from errors import ConfigurationError
from settings import CACHE_DIR_ENV, ExperimentConfig, apply_overrides, load_config

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, "*.yaml"))))
def test_shipped_configs_load(path, monkeypatch):
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)

    config = load_config(path)

    assert config.name == os.path.splitext(os.path.basename(path))[0]
    referenced = config.referenced_classes()
    assert config.attack.source in referenced and config.attack.target in referenced


def test_defaults_without_file(monkeypatch):
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)
    config = load_config()
    assert config == ExperimentConfig()
    assert config.attack.objective.lambda_ == 0.02


def test_lambda_key_is_spelled_without_underscore():
    config = load_config(text="attack: {objective: {lambda: 0.5}}")
    assert config.attack.objective.lambda_ == 0.5
    assert config.to_dict()["attack"]["objective"]["lambda"] == 0.5


@pytest.mark.parametrize("text,field", [
    ("dataset: {side: 4}", "dataset.side"),
    ("dataset: {format: coco}", "dataset.format"),
    ("dataset: {train_fraction: 1.0}", "dataset.train_fraction"),
    ("classifier: {variant: resnet}", "classifier.variant"),
    ("classifier: {transfer_variants: [cnn2, vgg]}", "classifier.transfer_variants[1]"),
    ("attention: {last_stage_channels: 4}", "attention.last_stage_channels"),
    ("attention: {stage_module_counts: [1, 0, 1]}", "attention.stage_module_counts"),
    ("attack: {source: stop, target: stop}", "attack.target"),
    ("attack: {objective: {p_norm: 3}}", "attack.objective.p_norm"),
    ("attack: {optimizer: {beta1: 1.5}}", "attack.optimizer.beta1"),
    ("attack: {rp2: {keep_fraction: 0}}", "attack.rp2.keep_fraction"),
    ("attack: {baselines: {methods: [deepfool]}}", "attack.baselines.methods[0]"),
    ("evaluation: {comparison_pairs: [[stop]]}", "evaluation.comparison_pairs[0]"),
    ("dataset: {epochs: 3}", "dataset.epochs"),
    ("dataset: {side: '32'}", "dataset.side"),
    ("attack: {rp2: {rectangularize: 1}}", "attack.rp2.rectangularize"),
])
def test_invalid_fields_name_their_path(text, field):
    with pytest.raises(ConfigurationError) as excinfo:
        load_config(text=text)
    assert excinfo.value.field_path == field
    assert excinfo.value.exit_code == 2


def test_invalid_yaml():
    with pytest.raises(ConfigurationError, match="invalid YAML"):
        load_config(text="dataset: [unclosed")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_environment_sets_cache_dir(monkeypatch):
    monkeypatch.setenv(CACHE_DIR_ENV, "/tmp/sign-cache")
    assert load_config(text="name: env").cache_dir == "/tmp/sign-cache"


def test_overrides(monkeypatch):
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)
    config = apply_overrides(load_config(), cache_dir="c", output_dir="o", dataset_root="d", seed=7)

    assert (config.cache_dir, config.evaluation.output_dir, config.dataset.root) == ("c", "o", "d")
    assert {config.dataset.seed, config.classifier.train.seed, config.attention.train.seed,
            config.attack.objective.seed, config.attack.baselines.seed} == {7}


class TestHashes:
    def test_equal_configs_hash_equally(self):
        assert load_config(text="name: a").full_hash() == load_config(text="name: a").full_hash()

    def test_paths_do_not_change_the_full_hash(self):
        base = load_config(text="name: a")
        moved = apply_overrides(load_config(text="name: a"), cache_dir="elsewhere", output_dir="other")
        assert base.full_hash() == moved.full_hash()

    def test_section_hash_ignores_other_sections(self):
        base = load_config(text="attack: {objective: {epochs: 10}}")
        changed = load_config(text="attack: {objective: {epochs: 20}}")
        assert base.section_hash("dataset", "classifier") == changed.section_hash("dataset", "classifier")
        assert base.section_hash("attack") != changed.section_hash("attack")


def test_referenced_classes_are_unique_and_ordered():
    config = load_config(text="""
attack: {source: stop, target: yield}
evaluation:
  comparison_pairs: [[stop, yield], [keepRight, stop]]
  transfer_datasets:
    - {name: g, format: gtsrb_dir, root: x, aliases: {"14": stop, "13": yield, "38": keepRight}}
""")
    assert config.referenced_classes() == ["stop", "yield", "keepRight"]


def test_full_scale_attacks_every_training_image(monkeypatch):
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)
    assert load_config(os.path.join(CONFIG_DIR, "full.yaml")).attack.baselines.max_images is None
