"""Binary PGM/PPM emission for heatmaps and box overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .boxes import Box


def to_u8(values: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D grid into uint8 0..255 (constant grids -> 0)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary P5, maxval 255."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6, maxval 255; rgb shape (H, W, 3)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def upsample_nearest(values: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a 2-D grid (inspection only)."""
    h, w = values.shape
    oh, ow = out_hw
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return values[np.ix_(rows, cols)]


def draw_box(rgb: np.ndarray, box: Box, color: tuple[int, int, int]) -> None:
    """Paint a 1-px rectangle outline in place; clips to the image."""
    h, w, _ = rgb.shape
    x0 = int(np.clip(round(box.x0), 0, w - 1))
    y0 = int(np.clip(round(box.y0), 0, h - 1))
    x1 = int(np.clip(round(box.x1) - 1, 0, w - 1))
    y1 = int(np.clip(round(box.y1) - 1, 0, h - 1))
    rgb[y0, x0 : x1 + 1] = color
    rgb[y1, x0 : x1 + 1] = color
    rgb[y0 : y1 + 1, x0] = color
    rgb[y0 : y1 + 1, x1] = color


def overlay(
    image: np.ndarray,
    heat: np.ndarray | None,
    pred_box: Box | None,
    gt_boxes: list[Box],
) -> np.ndarray:
    """Grayscale image with optional heat tint, green prediction, red truth."""
    base = to_u8(image)
    rgb = np.stack([base, base, base], axis=-1).astype(np.int64)
    if heat is not None:
        hot = upsample_nearest(heat, image.shape).astype(np.float64)
        hot = to_u8(hot).astype(np.int64)
        rgb[..., 0] = np.minimum(255, rgb[..., 0] + hot // 2)
    rgb = rgb.astype(np.uint8)
    for gt in gt_boxes:
        draw_box(rgb, gt, (255, 0, 0))
    if pred_box is not None:
        draw_box(rgb, pred_box, (0, 255, 0))
    return rgb
