import numpy as np
import pytest
import torch
import torch.nn as nn

from attention_network import AttentionNetworkSpec, build_ran, train_ran
from data.create_synthetic_signs import toy_pixels
from sign_classifier import ClassifierSpec, TrainConfig, TrainedClassifier, build, train
from sign_dataset import LabeledImage, split

TOY_SIDE = 16
TOY_CLASSES = ["left", "right"]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale reproduction checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_toy_images(per_class=30, seed=0):
    rng = np.random.RandomState(seed)
    return [
        LabeledImage(toy_pixels(label, rng, TOY_SIDE), label, f"{TOY_CLASSES[label]}/{i:03d}")
        for label in (0, 1)
        for i in range(per_class)
    ]


@pytest.fixture(scope="session")
def toy_images():
    return make_toy_images()


@pytest.fixture(scope="session")
def toy_split(toy_images):
    dataset_split = split(toy_images, 0.8, seed=0)
    dataset_split.class_names = list(TOY_CLASSES)
    return dataset_split


TOY_TRAIN = TrainConfig(epochs=30, batch_size=8, learning_rate=2e-3, seed=0)


@pytest.fixture(scope="session")
def toy_classifier(toy_split):
    model = build(ClassifierSpec("cnn", 2, TOY_SIDE), seed=0, class_names=TOY_CLASSES)
    model, _ = train(model, toy_split, TOY_TRAIN, verbose=False)
    return model


@pytest.fixture(scope="session")
def toy_ran(toy_split):
    spec = AttentionNetworkSpec((1, 1, 1), 1, 2, (8, 8, 8), TOY_SIDE)
    network = build_ran(spec, seed=0)
    network, log = train_ran(network, toy_split, TrainConfig(epochs=20, batch_size=8, learning_rate=2e-3, seed=0),
                             verbose=False)
    return network, log


def wrap(network, num_classes, side, dtype=torch.float32):
    network = network.to(dtype)
    return TrainedClassifier(ClassifierSpec("cnn", num_classes, side), network, trained=True)


@pytest.fixture
def channel_mean_model():
    """3 classes on 4x4 images: logits are 10x the per-channel means (R, G, B)."""
    linear = nn.Linear(3, 3)
    with torch.no_grad():
        linear.weight.copy_(torch.eye(3) * 10.0)
        linear.bias.zero_()
    return wrap(nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), linear), 3, 4)


@pytest.fixture
def linear_model():
    """2 classes on a 4x4 image, float64.

    w0 = 0 and w1 alternates +-0.1, so ||w1 - w0||_1 = 4.8. The bias gives
    class 0 a margin of exactly 1 on the constant 0.5 image.
    """
    n = 4 * 4 * 3
    w1 = np.where(np.arange(n) % 2 == 0, 0.1, -0.1)
    linear = nn.Linear(n, 2).double()
    with torch.no_grad():
        linear.weight.zero_()
        linear.weight[1] = torch.as_tensor(w1)
        linear.bias.copy_(torch.tensor([0.0, -float(w1.sum()) * 0.5 - 1.0]))
    return wrap(nn.Sequential(nn.Flatten(), linear), 2, 4, dtype=torch.float64)


def gray_image(value, side=4, label=0, image_id="img"):
    return LabeledImage(np.full((side, side, 3), value, dtype=np.float32), label, image_id)
