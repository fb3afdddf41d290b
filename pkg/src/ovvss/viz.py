"""Color-coded mask rendering with a deterministic per-class palette."""

from __future__ import annotations

import colorsys

import numpy as np
from PIL import Image


def class_color(index, num_classes):
    """RGB for one class: fully saturated hue at index / num_classes."""
    r, g, b = colorsys.hsv_to_rgb(index / num_classes, 1.0, 1.0)
    return round(r * 255), round(g * 255), round(b * 255)


def class_palette(num_classes):
    return [class_color(i, num_classes) for i in range(num_classes)]


def colorize_mask(mask, num_classes, ignore_index=255):
    """Index mask -> RGBA overlay; ignored pixels are fully transparent."""
    mask = np.asarray(mask)
    out = np.zeros((*mask.shape, 4), dtype=np.uint8)
    palette = class_palette(num_classes)
    for idx in np.unique(mask):
        if idx == ignore_index:
            continue
        if idx >= num_classes:
            raise ValueError(f"mask value {idx} outside the {num_classes}-class palette")
        out[mask == idx] = (*palette[idx], 255)
    return out


def save_overlay(mask, num_classes, out_path, ignore_index=255):
    Image.fromarray(colorize_mask(mask, num_classes, ignore_index), "RGBA").save(out_path)
    return out_path
