"""Burn a predicted mask boundary into a grayscale image."""

import numpy as np
from PIL import Image


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-connected background neighbour."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def write_overlay(image: np.ndarray, mask: np.ndarray, path, color=(255, 0, 0)) -> None:
    gray = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[mask_boundary(mask)] = color
    Image.fromarray(rgb).save(path)
