"""Synthetic two-domain image folders (discs vs. squares) for smoke runs."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, ImageDraw


def make_shapes_domain(folder: str, shape: str, n: int, side: int = 64, seed: int = 0) -> list:
    """Write ``n`` PNGs of a random-colour ``shape`` ("disc" or "square") on a noisy background."""
    os.makedirs(folder, exist_ok=True)
    rng = np.random.default_rng([seed, 0 if shape == "disc" else 1])
    paths = []
    for i in range(n):
        bg = rng.integers(0, 80, size=(side, side, 3), dtype=np.uint8)
        im = Image.fromarray(bg, "RGB")
        draw = ImageDraw.Draw(im)
        r = int(rng.integers(side // 6, side // 3))
        cx, cy = rng.integers(r, side - r, size=2)
        color = tuple(int(v) for v in rng.integers(120, 256, size=3))
        box = (int(cx - r), int(cy - r), int(cx + r), int(cy + r))
        if shape == "disc":
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
        path = os.path.join(folder, f"{shape}_{i:03d}.png")
        im.save(path)
        paths.append(path)
    return paths
