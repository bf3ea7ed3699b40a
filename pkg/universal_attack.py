"""
Universal Targeted Perturbations

Optimizes one perturbation per (source class, target class) pair over all
training images of the source class:

- TAA weights the perturbation by the target class's soft attention map and
  minimizes  lambda * ||A * delta||_p + mean CE(f(clip(x + A * delta)), target).
- RP2 learns a sparse L1 perturbation first, turns it into a binary mask
  (top fraction of pixels, optionally grown to rectangles) and re-optimizes
  under L2 restricted to that mask.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from tqdm import tqdm

from artifact_store import array_digest, load_archive, save_archive
from attention_maps import AttentionMap
from errors import AttackDivergedError, ConfigurationError, ShapeMismatchError, SignAttackError
from image_ops import to_batch, to_uint8

logger = logging.getLogger(__name__)

CHANNEL_MODES = ("grayscale-broadcast", "full-rgb")
MASK_PROVENANCE = ("learned_raw", "binarized", "rectangularized")
INIT_RANGE = 0.1


@dataclass
class Perturbation:
    """Additive noise shared by every image of the source class.

    ``delta`` is (H, W, 1) in grayscale-broadcast mode and (H, W, 3) in
    full-rgb mode.
    """

    delta: np.ndarray
    source_class: int
    target_class: int
    channel_mode: str = "grayscale-broadcast"
    method: str = "taa"

    def __post_init__(self):
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigurationError(f"unknown channel mode '{self.channel_mode}'", field_path="attack.channel_mode")

    def effective(self, weights=None):
        """The noise actually added: A * delta (same shape as delta)."""
        return weight_array(weights, self.delta.shape[:2])[:, :, None] * self.delta

    def digest(self):
        return array_digest(np.asarray(self.delta))


@dataclass(frozen=True)
class AttackObjectiveConfig:
    lambda_: float = 0.02
    p_norm: int = 2
    epochs: int = 300
    target_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigurationError("must be non-negative", field_path="attack.objective.lambda")
        if self.p_norm not in (1, 2):
            raise ConfigurationError("must be 1 or 2", field_path="attack.objective.p_norm")
        if self.epochs < 1:
            raise ConfigurationError("must be at least 1", field_path="attack.objective.epochs")


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_size: float = 0.01

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.epsilon <= 0 or self.step_size <= 0:
            raise ConfigurationError("invalid ADAM parameters", field_path="attack.optimizer")


@dataclass
class L1Mask:
    weights: np.ndarray
    provenance: str = "binarized"

    def __post_init__(self):
        if self.provenance not in MASK_PROVENANCE:
            raise ConfigurationError(f"unknown mask provenance '{self.provenance}'")

    @property
    def coverage(self):
        return float(np.mean(self.weights))


@dataclass
class EpochTrace:
    epoch: List[int] = field(default_factory=list)
    objective: List[float] = field(default_factory=list)
    asr: List[float] = field(default_factory=list)
    p_loss: List[float] = field(default_factory=list)

    def append(self, epoch, objective, asr, p_loss):
        if self.epoch and epoch <= self.epoch[-1]:
            raise ValueError("trace epochs must be strictly increasing")
        self.epoch.append(int(epoch))
        self.objective.append(float(objective))
        self.asr.append(float(asr))
        self.p_loss.append(float(p_loss))

    def __len__(self):
        return len(self.epoch)

    def to_frame(self):
        return pd.DataFrame(asdict(self), columns=["epoch", "objective", "asr", "p_loss"])

    @classmethod
    def from_arrays(cls, table):
        table = np.asarray(table, dtype=np.float64).reshape(-1, 4)
        trace = cls()
        for epoch, objective, asr, p_loss in table:
            trace.append(int(epoch), objective, asr, p_loss)
        return trace

    def to_array(self):
        return np.array([self.epoch, self.objective, self.asr, self.p_loss], dtype=np.float64).T.reshape(-1, 4)


def weight_array(weights, shape):
    """Spatial weight matrix from an AttentionMap, L1Mask, array or None (all ones)."""
    if weights is None:
        return np.ones(shape, dtype=np.float32)
    if isinstance(weights, (AttentionMap, L1Mask)):
        weights = weights.weights
    weights = np.asarray(weights)
    if weights.shape != tuple(shape):
        raise ShapeMismatchError(f"weight map shape {weights.shape} does not match image shape {tuple(shape)}")
    return weights


def apply(image, pert, weights=None):
    """clip(x + A * delta, 0, 1); a single-channel delta is broadcast over RGB."""
    pixels = getattr(image, "pixels", image)
    pixels = np.asarray(pixels)
    if pixels.shape[:2] != pert.delta.shape[:2]:
        raise ShapeMismatchError(f"image shape {pixels.shape} does not match perturbation {pert.delta.shape}")
    return np.clip(pixels + pert.effective(weights), 0.0, 1.0).astype(pixels.dtype)


def perturbation_norm(pert, weights=None, ord=2):
    """||A * delta||_p over the stored perturbation tensor."""
    return float(np.linalg.norm(pert.effective(weights).ravel().astype(np.float64), ord=ord))


def count_successes(clean_labels, adversarial_labels, true_label, target):
    """(clean correct and adversarial == target, clean correct) counts."""
    clean_labels = np.asarray(clean_labels)
    adversarial_labels = np.asarray(adversarial_labels)
    eligible = clean_labels == true_label
    success = eligible & (adversarial_labels == target)
    return int(success.sum()), int(eligible.sum())


@contextmanager
def _frozen(network):
    """Disable parameter gradients while optimizing an input."""
    flags = [p.requires_grad for p in network.parameters()]
    for p in network.parameters():
        p.requires_grad_(False)
    try:
        yield network
    finally:
        for p, flag in zip(network.parameters(), flags):
            p.requires_grad_(flag)


def _source_label(images):
    if not images:
        raise SignAttackError("attack needs at least one training image")
    labels = {image.label for image in images}
    if len(labels) != 1:
        raise ConfigurationError(f"training images mix classes {sorted(labels)}; expected one source class")
    return labels.pop()


def _optimize(model, images, weights, obj, opt, channel_mode, label="taa", verbose=True):
    """ADAM over delta for the weighted objective; returns (delta HWC, trace)."""
    if channel_mode not in CHANNEL_MODES:
        raise ConfigurationError(f"unknown channel mode '{channel_mode}'", field_path="attack.channel_mode")
    true_label = _source_label(images)
    model.check_shape(images[0].pixels)
    dtype = model.dtype
    side_h, side_w = images[0].pixels.shape[:2]
    weights = weight_array(weights, (side_h, side_w))

    pixels = to_batch([image.pixels for image in images], dtype=dtype)
    target = torch.full((len(images),), obj.target_class, dtype=torch.long)
    channels = 1 if channel_mode == "grayscale-broadcast" else 3
    generator = torch.Generator().manual_seed(obj.seed)
    delta = (torch.rand((channels, side_h, side_w), generator=generator, dtype=dtype) * 2 - 1) * INIT_RANGE
    delta.requires_grad_(True)
    mask = torch.as_tensor(np.asarray(weights), dtype=dtype).unsqueeze(0)
    optimizer = torch.optim.Adam([delta], lr=opt.step_size, betas=(opt.beta1, opt.beta2), eps=opt.epsilon)

    trace = EpochTrace()
    with _frozen(model.network) as network:
        network.eval()
        with torch.no_grad():
            clean_labels = network(pixels).argmax(dim=1).numpy()

        for epoch in tqdm(range(1, obj.epochs + 1), desc=f"{label} attack", disable=not verbose):
            optimizer.zero_grad()
            effective = mask * delta
            logits = network(torch.clamp(pixels + effective, 0.0, 1.0))
            norm = torch.linalg.vector_norm(effective, ord=obj.p_norm)
            objective = obj.lambda_ * norm + F.cross_entropy(logits, target)
            if not torch.isfinite(objective):
                raise AttackDivergedError(epoch, objective.item())
            objective.backward()
            optimizer.step()

            # statistics of the iterate that entered this epoch
            n_success, n_eligible = count_successes(clean_labels, logits.argmax(dim=1).numpy(), true_label,
                                                    obj.target_class)
            asr = n_success / n_eligible if n_eligible else float("nan")
            p_loss = torch.linalg.vector_norm(effective.detach()).item()
            trace.append(epoch, objective.item(), asr, p_loss)

    final = delta.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)
    if not np.all(np.isfinite(final)):
        raise AttackDivergedError(obj.epochs, float("nan"))
    logger.info("%s attack %d -> %d: final train ASR %.3f, P_loss %.3f", label, true_label, obj.target_class,
                trace.asr[-1], trace.p_loss[-1])
    return final, trace


def taa_optimize(model, train_images, attention_map, obj, opt, channel_mode="grayscale-broadcast", verbose=True):
    """Attention-weighted universal targeted perturbation.

    ``attention_map`` must belong to the target class.
    """
    if attention_map.class_index != obj.target_class:
        raise ConfigurationError(
            f"attention map belongs to class {attention_map.class_index}, but the target is {obj.target_class}; "
            "TAA uses the target class's map")
    source = _source_label(train_images)
    delta, trace = _optimize(model, train_images, attention_map.weights, obj, opt, channel_mode, "taa", verbose)
    return Perturbation(delta, source, obj.target_class, channel_mode, "taa"), trace


def binarize(delta, keep_fraction):
    """Binary mask keeping the top ``keep_fraction`` of pixels by |delta| summed over channels."""
    magnitude = np.abs(np.asarray(delta, dtype=np.float64)).sum(axis=-1)
    keep = int(math.ceil(keep_fraction * magnitude.size))
    order = np.argsort(-magnitude.ravel(), kind="stable")
    mask = np.zeros(magnitude.size, dtype=np.float32)
    mask[order[:keep]] = 1.0
    return L1Mask(mask.reshape(magnitude.shape), "binarized")


def rectangularize(mask):
    """Grow every connected component of the mask to its bounding box."""
    components, count = ndimage.label(mask.weights > 0)
    grown = np.zeros_like(mask.weights, dtype=np.float32)
    for box in ndimage.find_objects(components):
        if box is not None:
            grown[box] = 1.0
    logger.debug("Rectangularized %d mask components", count)
    return L1Mask(grown, "rectangularized")


def rp2_optimize(model, train_images, obj, opt, keep_fraction=0.3, use_rectangles=True, l1_lambda=None,
                 stage1_epochs=None, channel_mode="grayscale-broadcast", verbose=True):
    """Two-stage RP2 baseline: L1 perturbation -> binary mask -> masked L2 re-optimization.

    Returns (perturbation, mask, stage-2 trace).
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigurationError("must lie in (0, 1]", field_path="attack.rp2.keep_fraction")
    source = _source_label(train_images)
    stage1 = replace(obj, p_norm=1,
                     lambda_=obj.lambda_ if l1_lambda is None else l1_lambda,
                     epochs=obj.epochs if stage1_epochs is None else stage1_epochs)
    raw, _ = _optimize(model, train_images, None, stage1, opt, channel_mode, "rp2-l1", verbose)

    mask = binarize(raw, keep_fraction)
    if use_rectangles:
        mask = rectangularize(mask)
    logger.info("RP2 mask keeps %.1f%% of pixels (%s)", mask.coverage * 100, mask.provenance)

    delta, trace = _optimize(model, train_images, mask.weights, replace(obj, p_norm=2), opt, channel_mode, "rp2",
                             verbose)
    return Perturbation(delta, source, obj.target_class, channel_mode, "rp2"), mask, trace


def save_perturbation(path, pert, weights, trace=None, config=None, config_hash=None, map_digest=None):
    """Archive delta, its weight map, the epoch trace and the producing config."""
    weights = weight_array(weights, pert.delta.shape[:2]).astype(np.float32)
    arrays = {
        "delta": pert.delta.astype(np.float32),
        "weights": weights,
        "trace": (trace or EpochTrace()).to_array(),
    }
    header = {
        "config_hash": config_hash,
        "config": config or {},
        "method": pert.method,
        "channel_mode": pert.channel_mode,
        "source_class": int(pert.source_class),
        "target_class": int(pert.target_class),
        "map_digest": map_digest,
        "perturbation_digest": pert.digest(),
    }
    return save_archive(path, "perturbation", arrays, header)


def load_perturbation(path, producer="attack"):
    """Returns (perturbation, weights, trace, header)."""
    header, arrays = load_archive(path, "perturbation", producer=producer)
    pert = Perturbation(arrays["delta"], header["source_class"], header["target_class"], header["channel_mode"],
                        header["method"])
    return pert, arrays["weights"], EpochTrace.from_arrays(arrays["trace"]), header


def export_perturbation_images(pert, weights, sample_pixels, out_dir, stem, mask=None, scale=4):
    """PNG exports: the added noise (0.5 = no change), one adversarial sample and the RP2 mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = pert.effective(weights)
    noise = np.clip(effective * 0.5 + 0.5, 0.0, 1.0)
    if noise.shape[-1] == 1:
        noise = noise[:, :, 0]
    images = {
        f"{stem}_noise.png": noise,
        f"{stem}_sample.png": apply(sample_pixels, pert, weights),
    }
    if mask is not None:
        images[f"{stem}_mask.png"] = mask.weights

    paths = []
    for name, array in images.items():
        image = Image.fromarray(to_uint8(array))
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
        image.save(out_dir / name)
        paths.append(out_dir / name)
    return paths
