"""
Single-Image Baseline Attacks

Per-image attacks used as comparison points for the universal perturbation:
FGSM (targeted, smallest flipping step on a grid), salt-and-pepper noise,
contrast reduction, Gaussian blur (untargeted searches) and a pointwise L0
minimizer. Each search evaluates its whole grid in one batch and returns the
first flipping candidate.

Running a baseline on every training image gives per-image ("Adv-1")
adversarials; their mean difference is a universal ("Adv-all") perturbation.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from tqdm import tqdm

from errors import ConfigurationError, SignAttackError
from universal_attack import Perturbation

logger = logging.getLogger(__name__)

BASELINE_METHODS = ("salt_pepper", "contrast_reduction", "gaussian_blur", "fgsm", "pointwise")
TARGETED_METHODS = ("fgsm", "pointwise")


@dataclass
class BaselineResult:
    adversarial: np.ndarray
    success: bool
    parameter: float


@dataclass(frozen=True)
class BaselineSettings:
    steps: int = 100
    fgsm_epsilon_max: float = 0.3
    blur_sigma_max: float = 5.0
    pointwise_seed_trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("must be at least 1", field_path="attack.baselines.steps")


def _pixels(image):
    return np.asarray(getattr(image, "pixels", image))


def _true_label(model, image, true_label):
    if hasattr(image, "label"):
        return image.label
    if true_label is not None:
        return true_label
    return model.predict(_pixels(image)).label


def _first_hit(model, candidates, predicate):
    """Index of the first candidate whose predicted label satisfies ``predicate``."""
    labels = model.predict_labels(np.stack(candidates))
    hits = np.flatnonzero(predicate(labels))
    return (int(hits[0]), labels) if len(hits) else (None, labels)


def fgsm(model, image, target_label, epsilon):
    """Targeted one-step attack: clip(x - epsilon * sign(dJ(f(x), target)/dx))."""
    if epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    pixels = _pixels(image)
    _, gradient = model.loss_and_input_gradient(pixels, target_label)
    return np.clip(pixels - epsilon * np.sign(gradient), 0.0, 1.0).astype(pixels.dtype)


def fgsm_search(model, image, target_label, epsilon_max=0.3, steps=100):
    """Smallest epsilon on a linear grid up to ``epsilon_max`` that reaches the target."""
    pixels = _pixels(image)
    _, gradient = model.loss_and_input_gradient(pixels, target_label)
    direction = np.sign(gradient)
    epsilons = np.linspace(0.0, epsilon_max, steps + 1)
    candidates = [np.clip(pixels - eps * direction, 0.0, 1.0).astype(pixels.dtype) for eps in epsilons]
    index, _ = _first_hit(model, candidates, lambda labels: labels == target_label)
    if index is None:
        return BaselineResult(candidates[-1], False, float(epsilon_max))
    return BaselineResult(candidates[index], True, float(epsilons[index]))


def salt_pepper_schedule(shape, seed):
    """Pixel order and salt (1) / pepper (0) value for each spatial pixel."""
    rng = np.random.RandomState(seed)
    order = rng.permutation(shape[0] * shape[1])
    values = rng.randint(0, 2, size=shape[0] * shape[1]).astype(np.float64)
    return order, values


def corrupt(pixels, order, values, count):
    """Set the first ``count`` scheduled pixels to 0 or 1 in every channel."""
    corrupted = np.array(pixels, copy=True)
    flat = corrupted.reshape(-1, corrupted.shape[-1])
    chosen = order[:count]
    flat[chosen] = values[chosen, None]
    return corrupted


def _corruption_counts(n_pixels, steps):
    return [int(math.ceil(k / steps * n_pixels)) for k in range(steps + 1)]


def salt_pepper(model, image, steps=100, seed=0, true_label=None):
    """Raise the corrupted fraction until the label leaves ``true_label`` (untargeted)."""
    pixels = _pixels(image)
    true_label = _true_label(model, image, true_label)
    order, values = salt_pepper_schedule(pixels.shape, seed)
    counts = _corruption_counts(order.size, steps)
    candidates = [corrupt(pixels, order, values, count) for count in counts]
    index, _ = _first_hit(model, candidates, lambda labels: labels != true_label)
    if index is None:
        return BaselineResult(candidates[-1], False, 1.0)
    return BaselineResult(candidates[index], True, counts[index] / order.size)


def contrast_reduction(model, image, steps=100, true_label=None):
    """Blend towards the mean pixel, (1 - t) x + t mean(x), for t on a linear grid."""
    pixels = _pixels(image)
    true_label = _true_label(model, image, true_label)
    mean = pixels.mean()
    grid = np.linspace(0.0, 1.0, steps + 1)
    candidates = [((1.0 - t) * pixels + t * mean).astype(pixels.dtype) for t in grid]
    index, _ = _first_hit(model, candidates, lambda labels: labels != true_label)
    if index is None:
        return BaselineResult(candidates[-1], False, 1.0)
    return BaselineResult(candidates[index], True, float(grid[index]))


def gaussian_kernel(sigma):
    """Normalized Gaussian truncated at radius round(3 sigma)."""
    if sigma <= 0:
        return np.ones(1)
    radius = max(int(3.0 * sigma + 0.5), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def blur(pixels, sigma):
    """Separable Gaussian blur of each channel with edge replication."""
    kernel = gaussian_kernel(sigma)
    out = np.asarray(pixels, dtype=np.float64)
    out = correlate1d(out, kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.asarray(pixels).dtype)


def gaussian_blur(model, image, sigma_max=5.0, steps=100, true_label=None):
    """Smallest sigma on a linear grid whose blur changes the label (untargeted)."""
    pixels = _pixels(image)
    true_label = _true_label(model, image, true_label)
    sigmas = np.linspace(0.0, sigma_max, steps + 1)
    candidates = [blur(pixels, sigma) for sigma in sigmas]
    index, _ = _first_hit(model, candidates, lambda labels: labels != true_label)
    if index is None:
        return BaselineResult(candidates[-1], False, float(sigma_max))
    return BaselineResult(candidates[index], True, float(sigmas[index]))


def _differing_pixels(a, b):
    return np.flatnonzero(np.any(a != b, axis=-1).ravel())


def _pointwise_seed(model, pixels, target_label, steps, seed, trials):
    """A first adversarial reaching the target: salt-and-pepper, then random images."""
    order, values = salt_pepper_schedule(pixels.shape, seed)
    candidates = [corrupt(pixels, order, values, count) for count in _corruption_counts(order.size, steps)]
    index, _ = _first_hit(model, candidates, lambda labels: labels == target_label)
    if index is not None:
        return candidates[index]

    rng = np.random.RandomState(seed)
    noise = [rng.uniform(0.0, 1.0, size=pixels.shape).astype(pixels.dtype) for _ in range(trials)]
    if not noise:
        return None
    index, _ = _first_hit(model, noise, lambda labels: labels == target_label)
    return None if index is None else noise[index]


def pointwise(model, image, target_label, steps=100, seed=0, seed_trials=200):
    """Targeted L0 minimization.

    Starting from a seed adversarial, pixels are reset to their clean values in
    seeded random order whenever the result still reaches the target; stops
    after a full pass without resets. ``parameter`` is the final L0 count.
    """
    pixels = _pixels(image)
    if model.predict(pixels).label == target_label:
        return BaselineResult(pixels.copy(), True, 0.0)

    adversarial = _pointwise_seed(model, pixels, target_label, steps, seed, seed_trials)
    if adversarial is None:
        return BaselineResult(pixels.copy(), False, 0.0)

    rng = np.random.RandomState(seed + 1)
    width = pixels.shape[1]
    changed = True
    while changed:
        changed = False
        for flat_index in rng.permutation(pixels.shape[0] * width):
            row, col = divmod(int(flat_index), width)
            if np.array_equal(adversarial[row, col], pixels[row, col]):
                continue
            candidate = adversarial.copy()
            candidate[row, col] = pixels[row, col]
            if model.predict(candidate).label == target_label:
                adversarial = candidate
                changed = True

    return BaselineResult(adversarial, True, float(len(_differing_pixels(adversarial, pixels))))


def run_single(method, model, image, target_label, settings, index=0):
    """Run one baseline on one image; ``index`` offsets the per-image seed."""
    seed = settings.seed + index
    if method == "fgsm":
        return fgsm_search(model, image, target_label, settings.fgsm_epsilon_max, settings.steps)
    if method == "salt_pepper":
        return salt_pepper(model, image, settings.steps, seed)
    if method == "contrast_reduction":
        return contrast_reduction(model, image, settings.steps)
    if method == "gaussian_blur":
        return gaussian_blur(model, image, settings.blur_sigma_max, settings.steps)
    if method == "pointwise":
        return pointwise(model, image, target_label, settings.steps, seed, settings.pointwise_seed_trials)
    raise ConfigurationError(f"unknown baseline '{method}'", field_path="attack.baselines.methods")


def average_perturbation(perts, source_class=0, target_class=0, method="average"):
    """Elementwise mean of per-image differences (x' - x)."""
    if len(perts) == 0:
        raise SignAttackError("cannot average an empty list of perturbations")
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in perts])
    delta = stacked.mean(axis=0).astype(np.float32)
    return Perturbation(delta, source_class, target_class, "full-rgb", method)


def run_adv1(method, model, images, target_label, settings, verbose=True):
    """Attack every image separately.

    Returns (per-image results, averaged perturbation). Every image enters the
    average, failed attacks with their final candidate.
    """
    if not images:
        raise SignAttackError(f"{method} needs at least one image")
    source = images[0].label
    results = []
    for index, image in enumerate(tqdm(images, desc=method, disable=not verbose)):
        results.append(run_single(method, model, image, target_label, settings, index))

    differences = [r.adversarial.astype(np.float64) - image.pixels for r, image in zip(results, images)]
    average = average_perturbation(differences, source, target_label, method)
    logger.info("%s: %d/%d per-image attacks succeeded", method, sum(r.success for r in results), len(results))
    return results, average
