"""Procedural texture images for desk-scale training runs.

Each image mixes smooth colour gradients with a few patches of stripes,
checkerboards and rings, so that high-frequency content is localized and
the attention branch has something to find.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np

from .imaging import png_write, write_manifest


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, cx, cy = rng.uniform(0.2, 0.8, 3), rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.3, 0.3, 3)
    img = c0[:, None, None] + cx[:, None, None] * xx + cy[:, None, None] * yy
    return np.clip(img, 0.05, 0.95)


def _pattern(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = rng.integers(3)
    period = rng.uniform(4.0, 9.0)
    if kind == 0:
        theta = rng.uniform(0, np.pi)
        t = np.cos(theta) * xx + np.sin(theta) * yy
        return 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * t / period))
    if kind == 1:
        cell = max(2, int(period / 2))
        return (((yy // cell) + (xx // cell)) % 2).astype(np.float64)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    rad = np.hypot(yy - cy, xx - cx)
    return 0.5 + 0.5 * np.sin(2 * np.pi * rad / period)


def texture_image(rng: np.random.Generator, size: int = 96, n_patches: int = 3) -> np.ndarray:
    """One (3, size, size) image in [0, 1]."""
    img = _smooth_background(rng, size)
    for _ in range(n_patches):
        ph, pw = rng.integers(size // 4, size // 2 + 1, size=2)
        y0, x0 = rng.integers(0, size - ph + 1), rng.integers(0, size - pw + 1)
        lo, hi = rng.uniform(0.0, 0.4, 3), rng.uniform(0.6, 1.0, 3)
        pat = _pattern(rng, ph, pw)
        img[:, y0 : y0 + ph, x0 : x0 + pw] = lo[:, None, None] + (hi - lo)[:, None, None] * pat[None]
    return img


def make_corpus(n: int = 20, size: int = 96, seed: int = 0) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [texture_image(rng, size) for _ in range(n)]


def write_corpus(out_dir, n: int = 20, size: int = 96, seed: int = 0, n_val: int = 4) -> Tuple[Path, Path]:
    """Write ``n`` PNGs plus ``train.txt``/``val.txt`` manifests; return the manifest paths.

    The last ``n_val`` images form the validation split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(make_corpus(n, size, seed)):
        name = f"texture_{i:03d}.png"
        png_write(out_dir / name, img)
        names.append(name)
    train, val = out_dir / "train.txt", out_dir / "val.txt"
    write_manifest(train, names[: n - n_val])
    write_manifest(val, names[n - n_val :])
    return train, val
