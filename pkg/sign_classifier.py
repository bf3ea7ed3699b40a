"""
Victim Road-Sign Classifier

Defines the small CNN under attack and its three transfer-study variants,
trains them with ADAM and exposes predictions, per-class scores and input
gradients for the attack optimizers.
"""

import logging
import pickle
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from artifact_store import unreadable_artifact
from errors import (ConfigurationError, MissingArtifactError, ShapeMismatchError, TrainingDivergedError,
                    UnknownVariantError)
from image_ops import to_batch

logger = logging.getLogger(__name__)

VARIANTS = ("cnn", "cnn2", "cnn3", "cnn4")
CHECKPOINT_VERSION = 1
CHECKPOINT_READ_ERRORS = (OSError, RuntimeError, ValueError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile)


@dataclass(frozen=True)
class ClassifierSpec:
    variant: str = "cnn"
    num_classes: int = 26
    input_side: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2", field_path="classifier.num_classes")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0 or self.seed < 0:
            raise ConfigurationError("epochs, batch_size and learning_rate must be positive", field_path="train")


@dataclass
class PredictionResult:
    probabilities: np.ndarray
    label: int


def layer_plan(spec):
    """Layer list of a variant, e.g. ``[("conv", 32), ("relu",), ...]``.

    cnn2 adds a fourth conv + nonlinearity, cnn3 adds a nonlinearity after the
    dense layer on top of cnn2, cnn4 is cnn with tanh instead of ReLU.
    """
    if spec.variant not in VARIANTS:
        raise UnknownVariantError(f"unknown classifier variant '{spec.variant}', expected one of {VARIANTS}")
    act = "tanh" if spec.variant == "cnn4" else "relu"
    plan = [
        ("conv", 32), (act,), ("maxpool", 2),
        ("conv", 64), (act,), ("maxpool", 2),
        ("conv", 128), (act,),
    ]
    if spec.variant in ("cnn2", "cnn3"):
        plan += [("conv", 128), (act,)]
    plan += [("flatten",), ("dense", spec.num_classes)]
    if spec.variant == "cnn3":
        plan += [(act,)]
    plan += [("softmax",)]
    return plan


def _network_from_plan(plan, side, in_channels=3):
    layers = []
    channels = in_channels
    for step in plan:
        kind = step[0]
        if kind == "conv":
            layers.append(nn.Conv2d(channels, step[1], kernel_size=3, stride=1, padding=1))
            channels = step[1]
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "tanh":
            layers.append(nn.Tanh())
        elif kind == "maxpool":
            layers.append(nn.MaxPool2d(step[1]))
            side //= step[1]
        elif kind == "flatten":
            layers.append(nn.Flatten())
        elif kind == "dense":
            layers.append(nn.Linear(channels * side * side, step[1]))
        elif kind == "softmax":
            # applied by TrainedClassifier so training can use logits
            continue
    return nn.Sequential(*layers)


class TrainedClassifier:
    """A classifier network plus its spec and class names.

    The network maps (N, C, H, W) batches to logits; probabilities are the
    softmax of those logits.
    """

    def __init__(self, spec, network, class_names=None, seed=0, trained=False):
        self.spec = spec
        self.network = network
        self.network.eval()
        self.class_names = list(class_names) if class_names else [str(i) for i in range(spec.num_classes)]
        self.seed = seed
        self.trained = trained

    @property
    def dtype(self):
        return next(self.network.parameters()).dtype

    def check_shape(self, pixels):
        expected = (self.spec.input_side, self.spec.input_side, 3)
        shape = tuple(np.shape(pixels))
        if shape[-3:] != expected:
            raise ShapeMismatchError(f"image shape {shape} does not match classifier input {expected}")

    def logits(self, batch):
        return self.network(batch)

    def probabilities(self, images, batch_size=256):
        """Softmax scores for a list/array of (H, W, C) images."""
        images = np.asarray(images) if not isinstance(images, np.ndarray) else images
        if images.ndim == 3:
            images = images[None]
        self.check_shape(images)
        chunks = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                batch = to_batch(images[start:start + batch_size], dtype=self.dtype)
                chunks.append(F.softmax(self.network(batch), dim=1).cpu().numpy())
        if not chunks:
            return np.zeros((0, self.spec.num_classes))
        return np.concatenate(chunks)

    def predict_labels(self, images, batch_size=256):
        # np.argmax returns the lowest index on exact ties
        return np.argmax(self.probabilities(images, batch_size), axis=1)

    def predict(self, pixels):
        self.check_shape(pixels)
        probabilities = self.probabilities(np.asarray(pixels)[None])[0]
        return PredictionResult(probabilities, int(np.argmax(probabilities)))

    def loss_and_input_gradient(self, pixels, target_label):
        """Cross-entropy against ``target_label`` and its gradient w.r.t. pixels."""
        self.check_shape(pixels)
        if not 0 <= target_label < self.spec.num_classes:
            raise ConfigurationError(f"target label {target_label} outside [0, {self.spec.num_classes})")
        batch = to_batch(np.asarray(pixels), dtype=self.dtype).requires_grad_(True)
        loss = F.cross_entropy(self.network(batch), torch.tensor([target_label]))
        (gradient,) = torch.autograd.grad(loss, batch)
        return float(loss.item()), gradient[0].permute(1, 2, 0).detach().cpu().numpy()

    def accuracy(self, images):
        if not images:
            return float("nan")
        predicted = self.predict_labels([image.pixels for image in images])
        labels = np.array([image.label for image in images])
        return float(np.mean(predicted == labels))


def build(spec, seed=0, class_names=None):
    """Instantiate an untrained classifier with seed-deterministic weights."""
    plan = layer_plan(spec)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        network = _network_from_plan(plan, spec.input_side)
    return TrainedClassifier(spec, network, class_names, seed=seed)


def fit_network(network, dataset_split, cfg, num_classes, label="classifier", verbose=True):
    """Minimize cross-entropy with ADAM; returns a per-epoch log DataFrame.

    Shared by the classifier and the attention network.
    """
    labels = [image.label for image in dataset_split.train + dataset_split.test]
    if labels and max(labels) >= num_classes:
        raise ConfigurationError(f"split has label {max(labels)} but the {label} has {num_classes} classes")
    dtype = next(network.parameters()).dtype
    train_x = to_batch([image.pixels for image in dataset_split.train], dtype=dtype)
    train_y = torch.tensor([image.label for image in dataset_split.train], dtype=torch.long)
    test_x = to_batch([image.pixels for image in dataset_split.test], dtype=dtype) if dataset_split.test else None
    test_y = torch.tensor([image.label for image in dataset_split.test], dtype=torch.long)

    rows = []
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        loader = DataLoader(TensorDataset(train_x, train_y), batch_size=cfg.batch_size, shuffle=True,
                            generator=torch.Generator().manual_seed(cfg.seed))
        optimizer = torch.optim.Adam(network.parameters(), lr=cfg.learning_rate)

        for epoch in tqdm(range(1, cfg.epochs + 1), desc=f"train {label}", disable=not verbose):
            network.train()
            total, seen = 0.0, 0
            for batch_x, batch_y in loader:
                optimizer.zero_grad()
                loss = F.cross_entropy(network(batch_x), batch_y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, loss.item())
                loss.backward()
                optimizer.step()
                total += loss.item() * len(batch_y)
                seen += len(batch_y)

            network.eval()
            accuracy = float("nan")
            if test_x is not None:
                with torch.no_grad():
                    accuracy = float((network(test_x).argmax(dim=1) == test_y).double().mean().item())
            rows.append({"epoch": epoch, "train_loss": total / max(seen, 1), "test_accuracy": accuracy})
            logger.debug("%s epoch %d: loss %.4f, test accuracy %.4f", label, epoch, rows[-1]["train_loss"], accuracy)

    network.eval()
    return pd.DataFrame(rows, columns=["epoch", "train_loss", "test_accuracy"])


def train(model, dataset_split, cfg, verbose=True):
    """Train ``model`` in place; returns (model, training log)."""
    log = fit_network(model.network, dataset_split, cfg, model.spec.num_classes, label=model.spec.variant,
                      verbose=verbose)
    model.trained = True
    model.seed = cfg.seed
    if len(log):
        logger.info("Trained %s: test accuracy %.3f", model.spec.variant, log["test_accuracy"].iloc[-1])
    return model, log


def save_training_log(log, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, index=False, float_format="%.6f")


def save_checkpoint(model, path, config_hash=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "classifier",
        "spec": asdict(model.spec),
        "class_names": model.class_names,
        "seed": model.seed,
        "config_hash": config_hash,
        "state_dict": model.network.state_dict(),
    }, path)
    logger.info("Saved %s checkpoint to %s", model.spec.variant, path)
    return path


def read_checkpoint(path, kind, producer):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, producer)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except CHECKPOINT_READ_ERRORS as e:
        raise unreadable_artifact(path, producer, e) from e
    if not isinstance(payload, dict):
        raise unreadable_artifact(path, producer, "not a checkpoint dictionary")
    if payload.get("kind") != kind or payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path} is not a version {CHECKPOINT_VERSION} {kind} checkpoint")
    return payload


def checkpoint_hash(path):
    """Config hash recorded in a checkpoint, or None when absent/unreadable."""
    if not Path(path).exists():
        return None
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except CHECKPOINT_READ_ERRORS:
        return None
    return payload.get("config_hash") if isinstance(payload, dict) else None


def load_checkpoint(path, producer="train-classifier"):
    payload = read_checkpoint(path, "classifier", producer)
    model = build(ClassifierSpec(**payload["spec"]), seed=payload["seed"], class_names=payload["class_names"])
    model.network.load_state_dict(payload["state_dict"])
    model.network.eval()
    model.trained = True
    return model
