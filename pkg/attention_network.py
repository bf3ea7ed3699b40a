"""
Residual Attention Network

A narrow stacked residual-attention network used only as a source of soft
attention maps. Each attention module has a trunk branch T and a soft mask
branch M (bottom-up/top-down path ending in a sigmoid) combined as
H = (1 + M) * T.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from attention_maps import AttentionMap, finalize_map, select_representative
from errors import ConfigurationError, UntrainedNetworkError
from image_ops import to_batch
from sign_classifier import CHECKPOINT_VERSION, fit_network, read_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionNetworkSpec:
    stage_module_counts: Tuple[int, ...] = (1, 2, 3)
    last_stage_channels: int = 1
    num_classes: int = 26
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    input_side: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_module_counts", tuple(self.stage_module_counts))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if not self.stage_module_counts or any(count < 1 for count in self.stage_module_counts):
            raise ConfigurationError("every stage needs at least one attention module",
                                     field_path="attention.stage_module_counts")
        if len(self.stage_channels) != len(self.stage_module_counts):
            raise ConfigurationError("needs one width per stage", field_path="attention.stage_channels")
        if self.last_stage_channels < 1:
            raise ConfigurationError("must be positive", field_path="attention.last_stage_channels")
        if self.num_classes < 2:
            raise ConfigurationError("must be at least 2", field_path="attention.num_classes")

    @property
    def widths(self):
        """Trunk width per stage; the last stage is collapsed to last_stage_channels."""
        return self.stage_channels[:-1] + (self.last_stage_channels,)


@dataclass
class AttentionModuleOutput:
    trunk: torch.Tensor
    mask: torch.Tensor
    combined: torch.Tensor


def combine(trunk, mask):
    """Attention residual learning: H = (1 + M) * T."""
    return (1.0 + mask) * trunk


class ResidualUnit(nn.Module):
    """Pre-activation residual unit (BN-ReLU-conv twice)."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        residual = x if self.shortcut is None else self.shortcut(out)
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + residual


class MaskBranch(nn.Module):
    """Two downsamples, two upsamples, then a sigmoid so M lies in [0, 1]."""

    def __init__(self, channels):
        super().__init__()
        self.down1 = ResidualUnit(channels, channels)
        self.down2 = ResidualUnit(channels, channels)
        self.up1 = ResidualUnit(channels, channels)
        self.head = nn.Sequential(
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=1, bias=False),
        )

    def forward(self, x):
        d1 = self.down1(F.max_pool2d(x, 2, ceil_mode=True))
        d2 = self.down2(F.max_pool2d(d1, 2, ceil_mode=True))
        u1 = self.up1(F.interpolate(d2, size=d1.shape[-2:], mode="bilinear", align_corners=False) + d1)
        u2 = F.interpolate(u1, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.head(u2))


class AttentionModule(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.trunk = nn.Sequential(ResidualUnit(channels, channels), ResidualUnit(channels, channels))
        self.mask = MaskBranch(channels)

    def forward_parts(self, x):
        trunk = self.trunk(x)
        mask = self.mask(x)
        return AttentionModuleOutput(trunk, mask, combine(trunk, mask))

    def forward(self, x):
        return self.forward_parts(x).combined


class ResidualAttentionNetwork(nn.Module):
    """Stem residual unit, attention stages joined by residual units, dense head."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.trained = False
        widths = spec.widths

        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], kernel_size=3, padding=1, bias=False),
            ResidualUnit(widths[0], widths[0]),
        )
        self.transitions = nn.ModuleList()
        self.stages = nn.ModuleList()
        side = spec.input_side
        for index, (count, width) in enumerate(zip(spec.stage_module_counts, widths)):
            if index == 0:
                self.transitions.append(nn.Identity())
            else:
                self.transitions.append(ResidualUnit(widths[index - 1], width, stride=2))
                side = (side + 1) // 2
            self.stages.append(nn.ModuleList(AttentionModule(width) for _ in range(count)))

        self.tap_side = side
        self.head = nn.Sequential(
            nn.BatchNorm2d(widths[-1]),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(widths[-1] * side * side, 128),
            nn.ReLU(),
            nn.Linear(128, spec.num_classes),
        )

    def forward_with_taps(self, x):
        """Logits plus the (trunk, mask, combined) output of every module."""
        taps = []
        x = self.stem(x)
        for transition, stage in zip(self.transitions, self.stages):
            x = transition(x)
            for module in stage:
                parts = module.forward_parts(x)
                taps.append(parts)
                x = parts.combined
        return self.head(x), taps

    def forward(self, x):
        return self.forward_with_taps(x)[0]


def build_ran(spec, seed=0, extract=True):
    """Instantiate an untrained attention network."""
    if extract and spec.last_stage_channels != 1:
        raise ConfigurationError("must be 1 when attention maps will be extracted",
                                 field_path="attention.last_stage_channels")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        network = ResidualAttentionNetwork(spec)
    network.eval()
    return network


def train_ran(network, dataset_split, cfg, verbose=True):
    """End-to-end training of the attention network's classification head."""
    log = fit_network(network, dataset_split, cfg, network.spec.num_classes, label="attention", verbose=verbose)
    network.trained = True
    if len(log):
        logger.info("Trained attention network: test accuracy %.3f", log["test_accuracy"].iloc[-1])
    return network, log


def extract_maps(network, images, source="combined", batch_size=128):
    """Last attention module output per image at its native resolution.

    ``source`` picks the combined output H (default) or the mask M.
    """
    if not getattr(network, "trained", False):
        raise UntrainedNetworkError("attention maps need a trained network; run train-attention first")
    if network.spec.last_stage_channels != 1:
        raise ConfigurationError("must be 1 to extract maps", field_path="attention.last_stage_channels")
    if source not in ("combined", "mask"):
        raise ConfigurationError(f"unknown map source '{source}'", field_path="attention.map_source")

    dtype = next(network.parameters()).dtype
    network.eval()
    maps = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            _, taps = network.forward_with_taps(to_batch([image.pixels for image in chunk], dtype=dtype))
            tapped = getattr(taps[-1], source)[:, 0].cpu().numpy().astype(np.float64)
            for image, weights in zip(chunk, tapped):
                maps.append(AttentionMap(weights, image.label, image.image_id))
    return maps


def build_class_maps(network, images, num_classes, side, source="combined"):
    """One finalized map per class: extract, pick the representative, resize."""
    extracted = extract_maps(network, images, source=source)
    class_maps = {}
    for label in range(num_classes):
        members = [m for m in extracted if m.class_index == label]
        if not members:
            logger.warning("No training images for class %d; its attention map is skipped", label)
            continue
        class_maps[label] = finalize_map(select_representative(members), side, side)
    return class_maps


def save_ran(network, path, class_names=None, config_hash=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = asdict(network.spec)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "attention",
        "spec": {key: list(value) if isinstance(value, tuple) else value for key, value in spec.items()},
        "class_names": list(class_names or []),
        "config_hash": config_hash,
        "state_dict": network.state_dict(),
    }, path)
    logger.info("Saved attention network to %s", path)
    return path


def load_ran(path, producer="train-attention"):
    payload = read_checkpoint(path, "attention", producer)
    network = build_ran(AttentionNetworkSpec(**payload["spec"]))
    network.load_state_dict(payload["state_dict"])
    network.eval()
    network.trained = True
    return network
