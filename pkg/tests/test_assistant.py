import json
import os

import pytest
import yaml

from attack_evaluator import plateau_epoch
from data.create_synthetic_signs import write_desk_dataset, write_toy_dataset
from errors import ConfigurationError, MissingArtifactError
from settings import CACHE_DIR_ENV, load_config
from sign_attack_assistant import CONFIG_DIR, SignAttackAssistant, build_parser, main


def _write_config(config, path):
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")
    return path


@pytest.fixture
def toy_config_path(tmp_path, monkeypatch):
    """configs/toy.yaml pointed at a fresh toy dataset, with shorter runs."""
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)
    write_toy_dataset(tmp_path / "signs")
    config = load_config(os.path.join(CONFIG_DIR, "toy.yaml"))
    config.dataset.root = str(tmp_path / "signs")
    config.dataset.workers = 1
    config.cache_dir = str(tmp_path / "cache")
    config.evaluation.output_dir = str(tmp_path / "results")
    config.attention.train.epochs = 5
    config.attack.objective.epochs = 60
    config.attack.baselines.methods = ["fgsm", "contrast_reduction"]
    config.attack.baselines.max_images = 2
    config.attack.baselines.steps = 10
    return _write_config(config, tmp_path / "toy.yaml")


def _assistant(path, **overrides):
    config = load_config(path)
    for key, value in overrides.items():
        setattr(config, key, value)
    return SignAttackAssistant(config)


def _run_chain(assistant):
    assistant.cmd_ingest()
    assistant.cmd_train_classifier()
    assistant.cmd_train_attention()
    pert, _, _ = assistant.cmd_attack()
    return pert


def test_parser_accepts_every_command():
    parser = build_parser()
    assert parser.parse_args(["reproduce", "II", "--scale", "toy"]).table == "II"
    assert parser.parse_args(["train-classifier", "--variant", "cnn3"]).variant == "cnn3"
    args = parser.parse_args(["attack", "--method", "rp2", "--source", "stop", "--target", "yield", "--force"])
    assert (args.method, args.source, args.target, args.force) == ("rp2", "stop", "yield", True)
    with pytest.raises(SystemExit):
        parser.parse_args(["attack", "--method", "cw"])


def test_full_pipeline_and_repeatable_evaluation(toy_config_path, tmp_path):
    assistant = _assistant(toy_config_path)
    pert = _run_chain(assistant)

    reports = assistant.cmd_evaluate()

    report = reports[0]
    assert (report.method, report.source, report.target) == ("taa", "left", "right")
    assert 0.0 <= report.asr <= 1.0
    assert report.perturbation_digest == pert.digest()
    assert report.metadata["plateau_epoch"] is not None
    results = tmp_path / "results"
    for name in ("evaluation.json", "evaluation.csv", "training_cnn.csv", "training_attention.csv"):
        assert (results / name).exists()
    first = (results / "evaluation.json").read_bytes(), (results / "evaluation.csv").read_bytes()

    _assistant(toy_config_path).cmd_evaluate()

    assert ((results / "evaluation.json").read_bytes(), (results / "evaluation.csv").read_bytes()) == first


def test_fixed_seeds_reproduce_the_perturbation(toy_config_path, tmp_path):
    first = _run_chain(_assistant(toy_config_path, cache_dir=str(tmp_path / "cache_a")))
    second = _run_chain(_assistant(toy_config_path, cache_dir=str(tmp_path / "cache_b")))
    assert first.digest() == second.digest()


def test_cached_artifacts_are_reused_until_forced(toy_config_path, tmp_path):
    assistant = _assistant(toy_config_path)
    assistant.cmd_ingest()
    assistant.cmd_train_classifier()
    checkpoint = assistant.classifier_path("cnn")
    stamp = os.stat(checkpoint).st_mtime_ns

    _assistant(toy_config_path).cmd_train_classifier()
    assert os.stat(checkpoint).st_mtime_ns == stamp

    forced = _assistant(toy_config_path)
    forced.force = True
    forced.cmd_train_classifier()
    assert os.stat(checkpoint).st_mtime_ns != stamp


def test_changed_training_config_retrains(toy_config_path):
    assistant = _assistant(toy_config_path)
    assistant.cmd_ingest()
    assistant.cmd_train_classifier()
    before = assistant.classifier_hash("cnn")

    changed = _assistant(toy_config_path)
    changed.config.classifier.train.epochs = 2
    changed.cmd_train_classifier()

    assert changed.classifier_hash("cnn") != before
    assert changed.models["cnn"].trained


def test_attack_before_training_names_the_missing_step(toy_config_path):
    assistant = _assistant(toy_config_path)
    assistant.cmd_ingest()
    with pytest.raises(MissingArtifactError, match="train-classifier"):
        assistant.cmd_attack()


def test_evaluate_before_attack_names_the_missing_step(toy_config_path):
    assistant = _assistant(toy_config_path)
    assistant.cmd_ingest()
    assistant.cmd_train_classifier()
    with pytest.raises(MissingArtifactError, match="'attack'"):
        assistant.cmd_evaluate()


def test_main_reports_missing_artifact_with_exit_code(toy_config_path, capsys):
    assert main(["ingest", "--config", str(toy_config_path)]) == 0
    capsys.readouterr()

    code = main(["attack", "--config", str(toy_config_path)])

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 3
    assert record == {"success": False, "command": "attack", "error_type": "missing_artifact",
                      "message": record["message"]}
    assert "train-classifier" in record["message"]


@pytest.mark.parametrize("content", [b"", b"not an archive", b"PK\x03\x04truncated"])
def test_main_reports_unreadable_cache_file(toy_config_path, tmp_path, capsys, content):
    dataset = tmp_path / "cache" / "dataset.npz"
    dataset.parent.mkdir(parents=True)
    dataset.write_bytes(content)

    code = main(["attack", "--config", str(toy_config_path)])

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 2
    assert record["error_type"] == "configuration"
    assert str(dataset) in record["message"] and "'ingest'" in record["message"]


def test_main_turns_unexpected_failures_into_records(toy_config_path, capsys, monkeypatch):
    def explode(self):
        raise ValueError("disk on fire")

    monkeypatch.setattr(SignAttackAssistant, "cmd_ingest", explode)

    code = main(["ingest", "--config", str(toy_config_path)])

    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 1
    assert record == {"command": "ingest", "error_type": "error", "message": "disk on fire", "success": False}


def test_main_rejects_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {side: 4}\n")

    assert main(["ingest", "--config", str(bad)]) == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error_type"] == "configuration"
    assert "dataset.side" in record["message"]


def test_unknown_class_is_a_configuration_error(toy_config_path):
    assistant = _assistant(toy_config_path)
    assistant.config.attack.target = "stop"
    with pytest.raises(ConfigurationError, match="stop"):
        assistant.cmd_ingest()


def test_unknown_table(toy_config_path):
    with pytest.raises(ConfigurationError):
        _assistant(toy_config_path).cmd_reproduce("IX")


class TestReproduce:
    def test_comparison_table(self, toy_config_path, tmp_path):
        reports = _assistant(toy_config_path).cmd_reproduce("II")

        assert [r.method for r in reports] == ["taa", "rp2", "fgsm", "contrast_reduction"]
        assert all((r.source, r.target) == ("left", "right") for r in reports)
        assert reports[1].metadata["keep_fraction"] == 0.3
        assert reports[2].metadata["n_attacked"] == 2
        assert 0.0 <= reports[2].metadata["adv1_success_rate"] <= 1.0
        assert (tmp_path / "results" / "table_II.json").exists()
        assert (tmp_path / "results" / "table_II.csv").exists()

    def test_model_transfer_table(self, toy_config_path, tmp_path):
        reports = _assistant(toy_config_path).cmd_reproduce("V")

        assert {r.kind for r in reports} == {"model"}
        assert {r.target_descriptor for r in reports} == {"cnn4"}
        assert all("test_accuracy" in r.metadata for r in reports)
        assert (tmp_path / "cache" / "classifier_cnn4.pt").exists()

    def test_generalization_and_traces(self, toy_config_path, tmp_path):
        assistant = _assistant(toy_config_path)

        generalization = assistant.cmd_reproduce("VI")
        traces = assistant.cmd_reproduce("fig3")

        assert [(r.source, r.target) for r in generalization] == [("right", "left")]
        assert [r.method for r in traces] == ["taa", "rp2"]
        assert all(len(r.trace) == 60 for r in traces)
        assert (tmp_path / "results" / "fig3_epochs.png").exists()


@pytest.mark.slow
def test_desk_scale_reproduction(tmp_path, monkeypatch):
    monkeypatch.delenv(CACHE_DIR_ENV, raising=False)
    write_desk_dataset(tmp_path / "desk_signs")
    config = load_config(os.path.join(CONFIG_DIR, "desk.yaml"))
    config.dataset.root = str(tmp_path / "desk_signs")
    config.cache_dir = str(tmp_path / "cache")
    config.evaluation.output_dir = str(tmp_path / "results")
    assistant = SignAttackAssistant(config)

    reports = {r.method: r for r in assistant.cmd_reproduce("II")}

    split, _ = assistant.load_dataset()
    assert assistant.load_classifier().accuracy(split.test) >= 0.90
    assert reports["taa"].asr >= 0.90
    assert reports["taa"].p_loss <= 0.9 * reports["rp2"].p_loss
    assert plateau_epoch(reports["taa"].trace) <= plateau_epoch(reports["rp2"].trace)
    for method in config.attack.baselines.methods:
        assert reports[method].asr <= reports["taa"].asr - 0.40
