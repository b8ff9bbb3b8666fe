"""Synthetic clean/dark image pairs for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio.images import quantize, save_image


def clean_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth colour gradients plus a few soft-edged rectangles and blobs.

    Channels are rescaled to a common mean so the image is roughly
    gray-world balanced, like a white-balanced photograph.
    """
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((3, size, size))
    for c in range(3):
        lo, hi = np.sort(rng.uniform(0.15, 0.85, 2))
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
        img[c] = lo + (hi - lo) * ramp
    for _ in range(3):
        y0, x0 = rng.integers(0, size - size // 4, 2)
        h, w = rng.integers(size // 6, size // 2, 2)
        color = rng.uniform(0.1, 0.95, 3)
        mask = np.zeros((size, size))
        mask[y0:y0 + h, x0:x0 + w] = 1.0
        img = img * (1 - mask) + color[:, None, None] * mask
    for _ in range(2):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.08, 0.2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        color = rng.uniform(0.1, 0.95, 3)
        img = img * (1 - blob) + color[:, None, None] * blob
    means = img.mean(axis=(1, 2))
    img = img * (means.mean() / means)[:, None, None]
    return np.clip(img, 0.0, 1.0)


def darken(v: np.ndarray, scale: float = 0.3, gamma: float = 1.8) -> np.ndarray:
    return scale * np.power(v, gamma)


def make_pairs(n: int = 5, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (dark, clean) float32 pairs, both quantised to 8 bits."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        clean = quantize(clean_image(rng, size)).astype(np.float32) / 255
        dark = quantize(darken(clean)).astype(np.float32) / 255
        pairs.append((dark, clean))
    return pairs


def write_dataset(root, n: int = 5, size: int = 64, seed: int = 0, ext: str = ".png") -> Path:
    """Write pairs in the ``{train,test}/{low,high}`` layout (same images in both splits)."""
    root = Path(root)
    for sub in ("train/low", "test/low", "test/high"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, (dark, clean) in enumerate(make_pairs(n, size, seed)):
        name = f"synth{i:03d}{ext}"
        save_image(dark, root / "train" / "low" / name)
        save_image(dark, root / "test" / "low" / name)
        save_image(clean, root / "test" / "high" / name)
    return root
