"""Synthetic oriented-grating images for smoke tests and trend experiments."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import save_gray_image


def grating_image(rng, size: int, angle: float, noise: float, freq_range=(0.12, 0.22),
                  contrast: float = 0.35, clutter: int = 3) -> np.ndarray:
    """One grating at ``angle`` (radians), random phase/frequency, over
    class-independent blob clutter and white noise, clipped to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    freq = rng.uniform(*freq_range)
    theta = angle + rng.normal(0.0, np.deg2rad(4))
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = 0.5 + contrast * wave
    for _ in range(clutter):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(4, 10)
        img += rng.choice([-1, 1]) * 0.3 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_grating_dataset(n_train: int = 20, n_test: int = 10, num_classes: int = 3, size: int = 64,
                         noise: float = 0.35, seed: int = 0, **kw):
    """``(train_images, train_labels, test_images, test_labels)``; counts are per class."""
    rng = np.random.default_rng(seed)
    angles = [np.pi * c / num_classes for c in range(num_classes)]
    out = []
    for n in (n_train, n_test):
        imgs, labels = [], []
        for i in range(n):
            for c in range(num_classes):
                imgs.append(grating_image(rng, size, angles[c], noise, **kw))
                labels.append(c)
        out += [imgs, np.array(labels, dtype=np.int64)]
    return tuple(out)


def write_grating_dataset(root, n_train: int = 20, n_test: int = 10, num_classes: int = 3, size: int = 64,
                          noise: float = 0.35, seed: int = 0, n_val: int = 0) -> Path:
    """Write PNGs plus ``manifest.tsv`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    tr, ytr, te, yte = make_grating_dataset(n_train + n_val, n_test, num_classes, size, noise, seed)
    lines = []
    for k, (img, y) in enumerate(zip(tr, ytr)):
        split = "val" if k >= n_train * num_classes else "train"
        name = f"images/{split}_{k:04d}_c{y}.png"
        save_gray_image(img, root / name)
        lines.append(f"{name}\t{y}\t{split}")
    for k, (img, y) in enumerate(zip(te, yte)):
        name = f"images/test_{k:04d}_c{y}.png"
        save_gray_image(img, root / name)
        lines.append(f"{name}\t{y}\ttest")
    path = root / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
