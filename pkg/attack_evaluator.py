"""
Attack Evaluation

Scores perturbations with the targeted attack success rate (ASR) and the
perturbation loss, runs the data- and model-transfer studies and the
generalization suite, and writes JSON/CSV reports plus comparison charts.

ASR counts, among test images the clean classifier gets right, those whose
perturbed version is classified as the target class.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from errors import ConfigurationError, NoEligibleImagesError, SignAttackError  # noqa: E402
from universal_attack import (EpochTrace, apply, count_successes, perturbation_norm,  # noqa: E402
                              taa_optimize, weight_array)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ["method", "source", "target", "asr", "p_loss", "n_eligible", "n_success", "seed", "config_hash"]


@dataclass
class ImageOutcome:
    image_id: str
    clean_label: int
    adversarial_label: int


@dataclass
class AttackReport:
    method: str
    source: str
    target: str
    asr: float
    p_loss: float
    n_eligible: int
    n_success: int
    per_image: List[ImageOutcome] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    p_loss_raw: float = 0.0
    perturbation_digest: str = ""
    trace: Optional[EpochTrace] = None
    metadata: Dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        record["per_image"] = [ImageOutcome(**item) for item in record.get("per_image", [])]
        if record.get("trace") is not None:
            record["trace"] = EpochTrace(**record["trace"])
        return cls(**record)


@dataclass
class TransferReport:
    kind: str
    source_descriptor: str
    target_descriptor: str
    report: AttackReport
    metadata: Dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "kind": self.kind,
            "source_descriptor": self.source_descriptor,
            "target_descriptor": self.target_descriptor,
            "report": self.report.to_dict(),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        record["report"] = AttackReport.from_dict(record["report"])
        return cls(**record)


def _name(class_names, label):
    if class_names and 0 <= label < len(class_names):
        return class_names[label]
    return str(label)


def perturbation_loss(pert, weights=None):
    """L2 norm of the noise actually added (A * delta)."""
    return perturbation_norm(pert, weights)


def asr(model, images, pert, weights, target, method="taa", class_names=None, config_hash="", seed=0):
    """Targeted attack success rate of ``pert`` over test images of one class."""
    if not images:
        raise SignAttackError("ASR needs at least one test image")
    labels = {image.label for image in images}
    if len(labels) != 1:
        raise ConfigurationError(f"test images mix classes {sorted(labels)}; expected one source class")
    true_label = labels.pop()
    weights = weight_array(weights, pert.delta.shape[:2])

    clean = model.predict_labels([image.pixels for image in images])
    adversarial = model.predict_labels([apply(image, pert, weights) for image in images])
    n_success, n_eligible = count_successes(clean, adversarial, true_label, target)
    if n_eligible == 0:
        raise NoEligibleImagesError(
            f"no test image of class {_name(class_names, true_label)} is classified correctly; ASR is undefined")

    outcomes = [ImageOutcome(image.image_id, int(c), int(a)) for image, c, a in zip(images, clean, adversarial)]
    return AttackReport(
        method=method,
        source=_name(class_names, true_label),
        target=_name(class_names, target),
        asr=n_success / n_eligible,
        p_loss=perturbation_loss(pert, weights),
        n_eligible=n_eligible,
        n_success=n_success,
        per_image=outcomes,
        config_hash=config_hash,
        seed=seed,
        p_loss_raw=perturbation_norm(pert),
        perturbation_digest=pert.digest(),
    )


def _checked_transfer(kind, model, images, pert, weights, target, source_descriptor, target_descriptor,
                      class_names, metadata):
    before = pert.digest()
    report = asr(model, images, pert, weights, target, method=pert.method, class_names=class_names)
    if pert.digest() != before:
        raise SignAttackError("perturbation changed during transfer evaluation")
    return TransferReport(kind, source_descriptor, target_descriptor, report, dict(metadata or {}))


def transfer_data(model, foreign_images, pert, weights, target, source_descriptor="lisa",
                  target_descriptor="gtsrb", class_names=None, metadata=None):
    """Apply a perturbation learned on one dataset to the same class of another."""
    members = [image for image in foreign_images if image.label == pert.source_class]
    if not members:
        raise NoEligibleImagesError(
            f"{target_descriptor} has no images of class {_name(class_names, pert.source_class)}")
    return _checked_transfer("data", model, members, pert, weights, target, source_descriptor, target_descriptor,
                             class_names, metadata)


def transfer_model(variant_model, test_images, pert, weights, target, source_descriptor="cnn",
                   class_names=None, metadata=None):
    """Apply a perturbation learned against one classifier to another variant."""
    return _checked_transfer("model", variant_model, test_images, pert, weights, target, source_descriptor,
                             variant_model.spec.variant, class_names, metadata)


def generalization_suite(pairs, model, dataset_split, class_maps, obj, opt, channel_mode="grayscale-broadcast",
                         class_names=None, config_hash="", verbose=True):
    """Run the full TAA pipeline for each (source, target) label pair."""
    reports = []
    for source, target in pairs:
        if target not in class_maps:
            raise ConfigurationError(f"no attention map for target class {_name(class_names, target)}")
        objective = replace(obj, target_class=target)
        pert, trace = taa_optimize(model, dataset_split.of_class(source, "train"), class_maps[target], objective,
                                   opt, channel_mode, verbose=verbose)
        report = asr(model, dataset_split.of_class(source, "test"), pert, class_maps[target], target,
                     method="taa", class_names=class_names, config_hash=config_hash, seed=obj.seed)
        report.trace = trace
        reports.append(report)
    return reports


def plateau_epoch(trace, tolerance=0.02):
    """First epoch whose ASR is within ``tolerance`` of the final ASR."""
    if trace is None or not len(trace):
        return None
    final = trace.asr[-1]
    for epoch, value in zip(trace.epoch, trace.asr):
        if np.isfinite(value) and abs(value - final) <= tolerance:
            return epoch
    return trace.epoch[-1]


def _flat(report):
    return report.report if isinstance(report, TransferReport) else report


def reports_frame(reports):
    rows = []
    for item in reports:
        report = _flat(item)
        rows.append({column: getattr(report, column) for column in CSV_COLUMNS})
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def _strict(value):
    """Non-finite floats become None so the JSON parses strictly."""
    if isinstance(value, float):
        return value if np.isfinite(value) else None
    if isinstance(value, dict):
        return {key: _strict(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_strict(item) for item in value]
    return value


def emit(reports, out_dir, name="reports", plots=True):
    """Write ``<name>.json``, ``<name>.csv`` and (optionally) PNG charts.

    Returns the written paths.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{name}.json"
        document = _strict({"schema_version": REPORT_SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]})
        json_path.write_text(json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")

        csv_path = out_dir / f"{name}.csv"
        reports_frame(reports).to_csv(csv_path, index=False)
    except OSError as e:
        raise ConfigurationError(f"cannot write reports to {out_dir}: {e}", field_path="evaluation.output_dir")

    paths = [json_path, csv_path]
    if plots and reports:
        paths.append(plot_comparison([_flat(r) for r in reports], out_dir / f"{name}_comparison.png"))
        traced = [_flat(r) for r in reports if _flat(r).trace is not None and len(_flat(r).trace)]
        if traced:
            paths.append(plot_traces(traced, out_dir / f"{name}_epochs.png"))
    logger.info("Wrote %d report file(s) to %s", len(paths), out_dir)
    return paths


def load_reports(path):
    """Inverse of :func:`emit` for the JSON file."""
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    if document.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ConfigurationError(f"{path} has report schema {document.get('schema_version')}")
    return [TransferReport.from_dict(r) if "kind" in r else AttackReport.from_dict(r) for r in document["reports"]]


def plot_comparison(reports, path):
    """Side-by-side bars of ASR and P_loss per method and pair."""
    labels = [f"{r.method}\n{r.source}->{r.target}" for r in reports]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(8, 1.6 * len(reports)), 5))

    ax1.bar(labels, [r.asr * 100 for r in reports], color="skyblue")
    ax1.set_ylabel("ASR (%)")
    ax1.set_ylim(0, 100)
    ax1.set_title("Attack Success Rate")
    ax1.grid(axis="y", linestyle="--", alpha=0.7)

    ax2.bar(labels, [r.p_loss for r in reports], color="salmon")
    ax2.set_ylabel("P_loss (L2)")
    ax2.set_title("Perturbation Loss")
    ax2.grid(axis="y", linestyle="--", alpha=0.7)

    for ax in (ax1, ax2):
        ax.tick_params(axis="x", labelsize=7)
    plt.tight_layout()
    plt.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_traces(reports, path):
    """ASR and P_loss against optimization epoch, one line per report."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 5))
    for report in reports:
        label = f"{report.method} {report.source}->{report.target}"
        ax1.plot(report.trace.epoch, np.asarray(report.trace.asr) * 100, label=label)
        ax2.plot(report.trace.epoch, report.trace.p_loss, label=label)

    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Training ASR (%)")
    ax1.set_ylim(0, 105)
    ax1.grid(True, alpha=0.3)
    ax2.set_xlabel("Epoch")
    ax2.set_ylabel("P_loss (L2)")
    ax2.grid(True, alpha=0.3)
    ax1.legend(fontsize=8)
    plt.tight_layout()
    plt.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
