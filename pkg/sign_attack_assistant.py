#!/usr/bin/env python3
"""
Sign Attack Assistant

Command-line entry point that chains the pipeline stages from a YAML
experiment file:

    ingest -> train-classifier -> train-attention -> attack -> evaluate

and reproduces the comparison, transfer, generalization and epoch-trace
studies with ``reproduce``. Every artifact records the hash of the config
sections it was built from and is reused when that hash still matches.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from colorama import Fore, Style

import console
from artifact_store import archive_matches, config_hash
from attack_evaluator import (asr, emit, generalization_suite, plateau_epoch, transfer_data, transfer_model)
from attention_maps import export_map_images, load_map_archive, save_map_archive
from attention_network import AttentionNetworkSpec, build_class_maps, build_ran, save_ran, train_ran
from baseline_attacks import BaselineSettings, run_adv1
from errors import ConfigurationError, NoEligibleImagesError, SignAttackError
from settings import apply_overrides, load_config
from sign_classifier import (ClassifierSpec, TrainConfig, build, checkpoint_hash, load_checkpoint, save_checkpoint,
                             save_training_log, train)
from sign_dataset import dataset_summary, ingest, load_dataset_cache, load_foreign_images, save_dataset_cache
from universal_attack import (AttackObjectiveConfig, OptimizerConfig, count_successes, export_perturbation_images,
                              load_perturbation, rp2_optimize, save_perturbation, taa_optimize)

logger = logging.getLogger(__name__)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")
TABLES = ("II", "III", "IV", "V", "VI", "fig3")


def _train_config(block):
    return TrainConfig(block.epochs, block.batch_size, block.learning_rate, block.seed)


class SignAttackAssistant:
    def __init__(self, config, force=False, verbose=False):
        """Bind the assistant to an experiment config."""
        self.config = config
        self.force = force
        self.verbose = verbose
        self.cache_dir = Path(config.cache_dir)
        self.output_dir = Path(config.evaluation.output_dir)

        self.split = None
        self.catalog = None
        self.models = {}
        self.class_maps = None

    # ------------------------------------------------------------------
    # artifact locations and provenance hashes

    @property
    def dataset_path(self):
        return self.cache_dir / "dataset.npz"

    def classifier_path(self, variant):
        return self.cache_dir / f"classifier_{variant}.pt"

    @property
    def attention_path(self):
        return self.cache_dir / "attention.pt"

    @property
    def maps_path(self):
        return self.cache_dir / "attention_maps.npz"

    def perturbation_path(self, method, source, target):
        return self.cache_dir / "perturbations" / f"{method}_{source}_to_{target}.npz"

    def dataset_hash(self):
        return self.config.section_hash("dataset")

    def classifier_hash(self, variant):
        plain = self.config.to_dict()
        return config_hash({"dataset": plain["dataset"], "variant": variant,
                            "train": plain["classifier"]["train"]})

    def attention_hash(self):
        return self.config.section_hash("dataset", "attention")

    def attack_hash(self, method, source, target):
        plain = self.config.to_dict()
        attack = dict(plain["attack"])
        attack.pop("baselines")
        attack.update({"method": method, "source": source, "target": target})
        return config_hash({
            "classifier": self.classifier_hash(self.config.classifier.variant),
            "attention": self.attention_hash() if method == "taa" else None,
            "attack": attack,
        })

    # ------------------------------------------------------------------
    # loaders (raise MissingArtifactError naming the producing command)

    def load_dataset(self):
        if self.split is None:
            self.split, self.catalog, _ = load_dataset_cache(self.dataset_path, producer="ingest")
            self.validate_references()
        return self.split, self.catalog

    def load_classifier(self, variant=None):
        variant = variant or self.config.classifier.variant
        if variant not in self.models:
            self.models[variant] = load_checkpoint(self.classifier_path(variant), producer="train-classifier")
        return self.models[variant]

    def load_maps(self):
        if self.class_maps is None:
            self.class_maps, _ = load_map_archive(self.maps_path, producer="train-attention")
        return self.class_maps

    def class_index(self, name):
        return self.catalog.index_of(name)

    def validate_references(self):
        """Every class name used by the attack and evaluation blocks must be in the catalog."""
        for name in self.config.referenced_classes():
            if name not in self.catalog.names:
                raise ConfigurationError(f"class '{name}' is not in the ingested catalog {self.catalog.names}",
                                         field_path="attack")

    # ------------------------------------------------------------------
    # commands

    def cmd_ingest(self):
        """Load, filter, resize and split the dataset into the cache."""
        block = self.config.dataset
        expected = self.dataset_hash()
        if not self.force and archive_matches(self.dataset_path, "dataset", expected):
            logger.info("Dataset cache %s is up to date", self.dataset_path)
            self.split = None
            return self.load_dataset()

        split, catalog = ingest(block.root, block.format, block.min_count, block.side, block.train_fraction,
                                block.seed, max_classes=block.max_classes, workers=block.workers)
        save_dataset_cache(self.dataset_path, split, catalog, block.side, config_hash=expected)
        self.split, self.catalog = split, catalog
        self.validate_references()

        if self.verbose:
            console.print_frame(dataset_summary(split.train + split.test, catalog), "DATASET")
        return split, catalog

    def cmd_train_classifier(self, variant=None):
        """Train (or reuse) the classifier checkpoint for ``variant``."""
        variant = variant or self.config.classifier.variant
        path = self.classifier_path(variant)
        expected = self.classifier_hash(variant)
        if not self.force and checkpoint_hash(path) == expected:
            logger.info("Classifier %s checkpoint is up to date", variant)
            self.models.pop(variant, None)
            return self.load_classifier(variant)

        split, catalog = self.load_dataset()
        cfg = _train_config(self.config.classifier.train)
        model = build(ClassifierSpec(variant, catalog.num_classes, self.config.dataset.side), seed=cfg.seed,
                      class_names=catalog.names)
        model, log = train(model, split, cfg, verbose=self.verbose)
        save_checkpoint(model, path, config_hash=expected)
        save_training_log(log, self.output_dir / f"training_{variant}.csv")
        if self.verbose:
            console.print_frame(log, f"TRAINING {variant.upper()}", tail=5)
        self.models[variant] = model
        return model

    def cmd_train_attention(self):
        """Train the attention network and archive one finalized map per class."""
        expected = self.attention_hash()
        if (not self.force and checkpoint_hash(self.attention_path) == expected
                and archive_matches(self.maps_path, "attention_maps", expected)):
            logger.info("Attention network and maps are up to date")
            self.class_maps = None
            return self.load_maps()

        split, catalog = self.load_dataset()
        block = self.config.attention
        spec = AttentionNetworkSpec(block.stage_module_counts, block.last_stage_channels, catalog.num_classes,
                                    block.stage_channels, self.config.dataset.side)
        cfg = _train_config(block.train)
        network = build_ran(spec, seed=cfg.seed)
        network, log = train_ran(network, split, cfg, verbose=self.verbose)
        save_ran(network, self.attention_path, catalog.names, config_hash=expected)
        save_training_log(log, self.output_dir / "training_attention.csv")

        self.class_maps = build_class_maps(network, split.train, catalog.num_classes, self.config.dataset.side,
                                           source=block.map_source)
        save_map_archive(self.maps_path, self.class_maps, catalog.names, config_hash=expected,
                         map_source=block.map_source)
        if self.config.evaluation.export_images:
            export_map_images(self.class_maps, catalog.names, self.output_dir / "attention_maps")
        if self.verbose:
            console.print_frame(log, "TRAINING ATTENTION NETWORK", tail=5)
        return self.class_maps

    def _objective(self, target):
        block = self.config.attack.objective
        return AttackObjectiveConfig(block.lambda_, block.p_norm, block.epochs, target, block.seed)

    def _optimizer(self):
        block = self.config.attack.optimizer
        return OptimizerConfig(block.beta1, block.beta2, block.epsilon, block.step_size)

    def attack_pair(self, method, source, target):
        """Perturbation, weights and trace for one pair, reusing a matching archive."""
        split, _ = self.load_dataset()
        path = self.perturbation_path(method, source, target)
        expected = self.attack_hash(method, source, target)
        if not self.force and archive_matches(path, "perturbation", expected):
            logger.info("Perturbation %s is up to date", path.name)
            pert, weights, trace, _ = load_perturbation(path)
            return pert, weights, trace

        model = self.load_classifier()
        source_label, target_label = self.class_index(source), self.class_index(target)
        train_images = split.of_class(source_label, "train")
        block = self.config.attack
        mask = None
        map_digest = None
        if method == "taa":
            class_maps = self.load_maps()
            if target_label not in class_maps:
                raise ConfigurationError(f"no attention map for class '{target}'", field_path="attack.target")
            weights = class_maps[target_label]
            map_digest = weights.digest()
            pert, trace = taa_optimize(model, train_images, weights, self._objective(target_label),
                                       self._optimizer(), block.channel_mode, verbose=self.verbose)
            weights = weights.weights
        elif method == "rp2":
            pert, mask, trace = rp2_optimize(model, train_images, self._objective(target_label), self._optimizer(),
                                             keep_fraction=block.rp2.keep_fraction,
                                             use_rectangles=block.rp2.rectangularize,
                                             l1_lambda=block.rp2.l1_lambda, stage1_epochs=block.rp2.stage1_epochs,
                                             channel_mode=block.channel_mode, verbose=self.verbose)
            weights = mask.weights
        else:
            raise ConfigurationError(f"unknown attack method '{method}'", field_path="attack.method")

        save_perturbation(path, pert, weights, trace, config=self.config.to_dict()["attack"], config_hash=expected,
                          map_digest=map_digest)
        if self.config.evaluation.export_images:
            sample = split.of_class(source_label, "test") or train_images
            export_perturbation_images(pert, weights, sample[0].pixels, self.output_dir / "perturbations",
                                       f"{method}_{source}_to_{target}", mask=mask)
        return pert, weights, trace

    def cmd_attack(self, method=None, source=None, target=None):
        """Optimize the configured universal perturbation."""
        block = self.config.attack
        return self.attack_pair(method or block.method, source or block.source, target or block.target)

    def score(self, method, source, target):
        """ASR report of a cached perturbation on the source class's test images."""
        split, catalog = self.load_dataset()
        path = self.perturbation_path(method, source, target)
        pert, weights, trace, header = load_perturbation(path, producer="attack")
        model = self.load_classifier()
        report = asr(model, split.of_class(self.class_index(source), "test"), pert, weights,
                     self.class_index(target), method=method, class_names=catalog.names,
                     config_hash=header["config_hash"], seed=self.config.attack.objective.seed)
        report.trace = trace
        report.metadata["plateau_epoch"] = plateau_epoch(trace)
        if method == "rp2":
            report.metadata["keep_fraction"] = self.config.attack.rp2.keep_fraction
        return report

    def cmd_evaluate(self):
        """Score the configured attack on the test split and write reports."""
        block = self.config.attack
        reports = [self.score(block.method, block.source, block.target)]
        emit(reports, self.output_dir, name="evaluation")
        console.print_reports_table(reports)
        return reports

    # ------------------------------------------------------------------
    # reproduction studies

    def prepare(self, attention=True):
        self.cmd_ingest()
        self.cmd_train_classifier()
        if attention:
            self.cmd_train_attention()

    def _pair(self, index):
        pairs = self.config.evaluation.comparison_pairs
        if index >= len(pairs):
            raise ConfigurationError(f"needs at least {index + 1} comparison pairs",
                                     field_path="evaluation.comparison_pairs")
        return pairs[index]

    def baseline_reports(self, source, target):
        """Adv-all reports of every configured single-image baseline."""
        split, catalog = self.load_dataset()
        model = self.load_classifier()
        block = self.config.attack.baselines
        settings = BaselineSettings(block.steps, block.fgsm_epsilon_max, block.blur_sigma_max,
                                    block.pointwise_seed_trials, block.seed)
        source_label, target_label = self.class_index(source), self.class_index(target)
        train_images = split.of_class(source_label, "train")[:block.max_images]
        clean = model.predict_labels([image.pixels for image in train_images])

        reports = []
        for method in block.methods:
            results, average = run_adv1(method, model, train_images, target_label, settings, verbose=self.verbose)
            adversarial = model.predict_labels([result.adversarial for result in results])
            n_success, n_eligible = count_successes(clean, adversarial, source_label, target_label)
            report = asr(model, split.of_class(source_label, "test"), average, None, target_label, method=method,
                         class_names=catalog.names, config_hash=config_hash(self.config.to_dict()["attack"]),
                         seed=block.seed)
            report.metadata.update({
                "adv1_success_rate": float(np.mean([result.success for result in results])),
                "adv1_asr": n_success / n_eligible if n_eligible else None,
                "n_attacked": len(train_images),
            })
            reports.append(report)
        return reports

    def reproduce_comparison(self, index):
        source, target = self._pair(index)
        for method in ("taa", "rp2"):
            self.attack_pair(method, source, target)
        reports = [self.score("taa", source, target), self.score("rp2", source, target)]
        return reports + self.baseline_reports(source, target)

    def reproduce_data_transfer(self):
        split, catalog = self.load_dataset()
        model = self.load_classifier()
        reports = []
        for dataset in self.config.evaluation.transfer_datasets:
            foreign = load_foreign_images(dataset.root, dataset.format, dataset.aliases, catalog,
                                          self.config.dataset.side, self.config.dataset.workers)
            for source, target in self.config.evaluation.comparison_pairs:
                if self.class_index(source) not in {image.label for image in foreign}:
                    logger.warning("%s has no '%s' images; skipping", dataset.name, source)
                    continue
                for method in ("taa", "rp2"):
                    pert, weights, _ = self.attack_pair(method, source, target)
                    reports.append(transfer_data(model, foreign, pert, weights, self.class_index(target),
                                                 source_descriptor=self.config.name,
                                                 target_descriptor=dataset.name, class_names=catalog.names))
        return reports

    def reproduce_model_transfer(self):
        split, catalog = self.load_dataset()
        reports = []
        for variant in self.config.classifier.transfer_variants:
            model = self.cmd_train_classifier(variant)
            accuracy = {"train_accuracy": model.accuracy(split.train), "test_accuracy": model.accuracy(split.test)}
            for source, target in self.config.evaluation.comparison_pairs:
                for method in ("taa", "rp2"):
                    pert, weights, _ = self.attack_pair(method, source, target)
                    test_images = split.of_class(self.class_index(source), "test")
                    try:
                        reports.append(transfer_model(model, test_images, pert, weights, self.class_index(target),
                                                      source_descriptor=self.config.classifier.variant,
                                                      class_names=catalog.names, metadata=accuracy))
                    except NoEligibleImagesError as e:
                        logger.warning("%s: %s", variant, e)
        return reports

    def reproduce_generalization(self):
        split, catalog = self.load_dataset()
        pairs = [(self.class_index(s), self.class_index(t)) for s, t in self.config.evaluation.generalization_pairs]
        return generalization_suite(pairs, self.load_classifier(), split, self.load_maps(),
                                    self._objective(0), self._optimizer(), self.config.attack.channel_mode,
                                    class_names=catalog.names, config_hash=self.attack_hash("taa", "*", "*"),
                                    verbose=self.verbose)

    def reproduce_epoch_traces(self):
        source, target = self._pair(0)
        reports = []
        for method in ("taa", "rp2"):
            self.attack_pair(method, source, target)
            reports.append(self.score(method, source, target))
        return reports

    def cmd_reproduce(self, table):
        """Chain every stage needed for one study and write its report bundle."""
        if table not in TABLES:
            raise ConfigurationError(f"unknown table '{table}', expected one of {TABLES}")
        self.prepare(attention=True)
        if table == "II":
            reports = self.reproduce_comparison(0)
        elif table == "III":
            reports = self.reproduce_comparison(1)
        elif table == "IV":
            reports = self.reproduce_data_transfer()
        elif table == "V":
            reports = self.reproduce_model_transfer()
        elif table == "VI":
            reports = self.reproduce_generalization()
        else:
            reports = self.reproduce_epoch_traces()

        name = "fig3" if table == "fig3" else f"table_{table}"
        emit(reports, self.output_dir, name=name)
        console.banner(f"RESULTS: {name}")
        console.print_reports_table([getattr(r, "report", r) for r in reports])
        return reports


def build_parser():
    parser = argparse.ArgumentParser(description="Universal attention-weighted attacks on road-sign classifiers")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file (default: configs/<scale>.yaml)")
    common.add_argument("--scale", choices=("toy", "desk", "full"), default="desk")
    common.add_argument("--cache-dir")
    common.add_argument("--output-dir")
    common.add_argument("--dataset-root")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="recompute artifacts even when cached")
    common.add_argument("--verbose", action="store_true")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("ingest", parents=[common], help="load and split the dataset")
    train_classifier = commands.add_parser("train-classifier", parents=[common], help="train the victim CNN")
    train_classifier.add_argument("--variant", choices=("cnn", "cnn2", "cnn3", "cnn4"))
    commands.add_parser("train-attention", parents=[common], help="train the attention network, archive maps")
    attack = commands.add_parser("attack", parents=[common], help="optimize a universal perturbation")
    attack.add_argument("--method", choices=("taa", "rp2"))
    attack.add_argument("--source")
    attack.add_argument("--target")
    commands.add_parser("evaluate", parents=[common], help="score the configured attack")
    reproduce = commands.add_parser("reproduce", parents=[common], help="run a whole study")
    reproduce.add_argument("table", choices=TABLES)
    return parser


def run(args):
    config_path = args.config or os.path.join(CONFIG_DIR, f"{args.scale}.yaml")
    config = apply_overrides(load_config(config_path), cache_dir=args.cache_dir, output_dir=args.output_dir,
                             dataset_root=args.dataset_root, seed=args.seed)
    assistant = SignAttackAssistant(config, force=args.force, verbose=args.verbose)

    if args.command == "ingest":
        assistant.cmd_ingest()
    elif args.command == "train-classifier":
        assistant.cmd_train_classifier(args.variant)
    elif args.command == "train-attention":
        assistant.cmd_train_attention()
    elif args.command == "attack":
        assistant.cmd_attack(args.method, args.source, args.target)
    elif args.command == "evaluate":
        assistant.cmd_evaluate()
    else:
        assistant.cmd_reproduce(args.table)
    return assistant


def main(argv=None):
    args = build_parser().parse_args(argv)
    console.configure_logging(args.verbose)
    try:
        run(args)
    except SignAttackError as e:
        console.print_error_record(args.command, e)
        return e.exit_code
    except Exception as e:
        logger.debug("%s failed unexpectedly", args.command, exc_info=True)
        console.print_error_record(args.command, e)
        return 1
    print(f"\n{Fore.GREEN}{args.command} complete!{Style.RESET_ALL}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
