#!/usr/bin/env python3
"""
Synthetic Road-Sign Data Generator

Renders stand-in datasets so the whole pipeline can run without the real
LISA and GTSRB archives:

- a desk-scale folder_per_class set with five classes named after LISA tags,
- a restyled GTSRB-like transfer set (numeric class folders + ROI CSV),
- a tiny two-class toy set (bright square on the left or the right half).
"""

import argparse
import os

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw, ImageFilter

DESK_COUNTS = {
    "stop": 120,
    "speedLimit45": 105,
    "pedestrianCrossing": 95,
    "speedLimit65": 85,
    "keepRight": 70,
}

# GTSRB class ids for the shapes the transfer set reuses
GTSRB_IDS = {"stop": 14, "pedestrianCrossing": 27, "keepRight": 38}

DESK_SIDE = 48
GTSRB_SIDE = 56


def _octagon(cx, cy, r):
    angles = np.pi / 8 + np.arange(8) * np.pi / 4
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]


def _diamond(cx, cy, r):
    return [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]


def draw_sign(draw, name, cx, cy, r, style=0):
    """Draw one sign glyph centred at (cx, cy) with half-size r."""
    if name == "stop":
        draw.polygon(_octagon(cx, cy, r), fill=(200, 20, 30) if style == 0 else (170, 40, 40))
        draw.rectangle([cx - 0.6 * r, cy - 0.15 * r, cx + 0.6 * r, cy + 0.15 * r], fill=(245, 245, 245))
    elif name in ("speedLimit45", "speedLimit65"):
        draw.rectangle([cx - 0.75 * r, cy - r, cx + 0.75 * r, cy + r], fill=(240, 240, 240), outline=(20, 20, 20))
        draw.rectangle([cx - 0.55 * r, cy - 0.75 * r, cx + 0.55 * r, cy - 0.55 * r], fill=(20, 20, 20))
        if name == "speedLimit45":
            draw.rectangle([cx - 0.45 * r, cy - 0.2 * r, cx - 0.15 * r, cy + 0.7 * r], fill=(20, 20, 20))
            draw.rectangle([cx + 0.15 * r, cy - 0.2 * r, cx + 0.45 * r, cy + 0.1 * r], fill=(20, 20, 20))
        else:
            draw.ellipse([cx - 0.5 * r, cy - 0.1 * r, cx - 0.05 * r, cy + 0.7 * r], fill=(20, 20, 20))
            draw.rectangle([cx + 0.1 * r, cy + 0.2 * r, cx + 0.5 * r, cy + 0.7 * r], fill=(20, 20, 20))
    elif name == "pedestrianCrossing":
        draw.polygon(_diamond(cx, cy, r), fill=(250, 210, 30) if style == 0 else (230, 200, 60))
        draw.polygon([(cx, cy - 0.45 * r), (cx + 0.35 * r, cy + 0.4 * r), (cx - 0.35 * r, cy + 0.4 * r)],
                     fill=(20, 20, 20))
    elif name == "keepRight":
        draw.rectangle([cx - 0.75 * r, cy - r, cx + 0.75 * r, cy + r], fill=(235, 235, 235) if style == 0
                       else (200, 215, 240))
        draw.line([(cx - 0.4 * r, cy + 0.6 * r), (cx + 0.3 * r, cy - 0.3 * r)], fill=(20, 20, 20),
                  width=max(2, int(0.2 * r)))
        draw.polygon([(cx + 0.5 * r, cy - 0.55 * r), (cx + 0.45 * r, cy), (cx, cy - 0.5 * r)], fill=(20, 20, 20))
    else:
        raise ValueError(f"no drawing for sign '{name}'")


def render_sign(name, rng, side=DESK_SIDE, style=0):
    """One sign on a noisy background, with random position, size and lighting."""
    background = tuple(int(v) for v in rng.randint(40, 180, size=3))
    image = Image.new("RGB", (side, side), background)
    draw = ImageDraw.Draw(image)
    r = side * rng.uniform(0.33, 0.42)
    cx = side / 2 + rng.uniform(-0.06, 0.06) * side
    cy = side / 2 + rng.uniform(-0.06, 0.06) * side
    draw_sign(draw, name, cx, cy, r, style)
    if style:
        image = image.filter(ImageFilter.GaussianBlur(radius=0.8))

    pixels = np.asarray(image, dtype=np.float64) / 255.0
    pixels = pixels * rng.uniform(0.7, 1.1) + rng.normal(0.0, 0.03, size=pixels.shape)
    return Image.fromarray(np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8))


def write_desk_dataset(root, counts=None, side=DESK_SIDE, seed=42):
    """folder_per_class tree: ``root/<class>/<class>_<i>.png``."""
    counts = counts or DESK_COUNTS
    rng = np.random.RandomState(seed)
    for name, count in counts.items():
        class_dir = os.path.join(root, name)
        os.makedirs(class_dir, exist_ok=True)
        for i in range(count):
            render_sign(name, rng, side).save(os.path.join(class_dir, f"{name}_{i:04d}.png"))
    return sum(counts.values())


def write_gtsrb_standin(root, count=40, side=GTSRB_SIDE, seed=7):
    """gtsrb_dir tree with restyled signs and a GT-<id>.csv of ROI boxes per class."""
    rng = np.random.RandomState(seed)
    margin = 6
    total = 0
    for name, class_id in GTSRB_IDS.items():
        class_dir = os.path.join(root, f"{class_id:05d}")
        os.makedirs(class_dir, exist_ok=True)
        rows = []
        for i in range(count):
            frame = Image.new("RGB", (side, side), tuple(int(v) for v in rng.randint(60, 200, size=3)))
            crop = render_sign(name, rng, side - 2 * margin, style=1)
            frame.paste(crop, (margin, margin))
            filename = f"{class_id:05d}_{i:05d}.ppm"
            frame.save(os.path.join(class_dir, filename))
            rows.append({"Filename": filename, "Width": side, "Height": side,
                         "Roi.X1": margin, "Roi.Y1": margin, "Roi.X2": side - margin, "Roi.Y2": side - margin,
                         "ClassId": class_id})
        pd.DataFrame(rows).to_csv(os.path.join(class_dir, f"GT-{class_id:05d}.csv"), sep=";", index=False)
        total += count
    return total


def toy_pixels(label, rng, side=16):
    """Gray image with a bright square on the left (label 0) or right (label 1) half."""
    pixels = np.full((side, side), 0.5) + rng.normal(0.0, 0.02, size=(side, side))
    top = side // 4 + rng.randint(-1, 2)
    width = side // 2 - 2
    left = 1 if label == 0 else side // 2 + 1
    pixels[top:top + side // 2, left:left + width] = 0.95
    return np.repeat(np.clip(pixels, 0.0, 1.0)[:, :, None], 3, axis=2).astype(np.float32)


def write_toy_dataset(root, count=30, side=16, seed=0):
    rng = np.random.RandomState(seed)
    for label, name in enumerate(("left", "right")):
        class_dir = os.path.join(root, name)
        os.makedirs(class_dir, exist_ok=True)
        for i in range(count):
            pixels = np.rint(toy_pixels(label, rng, side) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(os.path.join(class_dir, f"{name}_{i:04d}.png"))
    return 2 * count


def main():
    parser = argparse.ArgumentParser(description="Render synthetic road-sign datasets")
    parser.add_argument("--out", default=os.path.dirname(os.path.abspath(__file__)),
                        help="directory receiving desk_signs/, gtsrb_standin/ and toy_signs/")
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    print("Generating desk-scale sign set...")
    n_desk = write_desk_dataset(os.path.join(args.out, "desk_signs"), seed=args.seed)
    print(f"  - {n_desk} images in {len(DESK_COUNTS)} classes")

    print("Generating GTSRB stand-in transfer set...")
    n_gtsrb = write_gtsrb_standin(os.path.join(args.out, "gtsrb_standin"), seed=args.seed + 1)
    print(f"  - {n_gtsrb} images in {len(GTSRB_IDS)} classes")

    print("Generating toy set...")
    n_toy = write_toy_dataset(os.path.join(args.out, "toy_signs"), seed=args.seed)
    print(f"  - {n_toy} images in 2 classes")

    print(f"Data written to {args.out}")


if __name__ == "__main__":
    main()
