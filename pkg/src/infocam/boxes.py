"""Thresholding, connected components, bounding boxes, and the metrics.

Pipeline: min-max normalize an intensity map, keep cells above a fraction
of the range, take the largest connected component, wrap it in the smallest
half-open box, scale the corners into image pixels, then score IoU against
ground truth. A localization counts when IoU exceeds 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maps import IntensityMap

SPACE_FEATURE = "feature-grid"
SPACE_IMAGE = "image-pixels"

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box:
    """Axis-aligned half-open rectangle [x0,x1) x [y0,y1)."""

    x0: float
    y0: float
    x1: float
    y1: float
    space: str = SPACE_FEATURE

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if min(self.x0, self.y0) < 0:
            raise ValueError("box coordinates must be non-negative")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def corners(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def threshold_mask(
    imap: IntensityMap | np.ndarray, fraction: float = 0.2, raw: bool = False
) -> np.ndarray:
    """Boolean grid of cells strictly above the intensity threshold.

    Default mode min-max normalizes the map to [0,1] first (constant maps
    become all-true), making "fraction of the maximum" well-defined for
    negative-valued maps and invariant under positive affine rescaling.
    Raw mode compares against fraction * max(values) directly, for ablation.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    values = imap.values if isinstance(imap, IntensityMap) else np.asarray(imap)
    values = values.astype(np.float64)
    if raw:
        return values > fraction * values.max()
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.ones(values.shape, dtype=bool)
    return (values - lo) / (hi - lo) > fraction


def label_components(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Label connected true-cells 1..n (0 = background), union-find two-pass."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent: list[int] = [0]

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    next_label = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            neighbors = []
            if r > 0 and mask[r - 1, c]:
                neighbors.append(labels[r - 1, c])
            if c > 0 and mask[r, c - 1]:
                neighbors.append(labels[r, c - 1])
            if connectivity == 8 and r > 0:
                if c > 0 and mask[r - 1, c - 1]:
                    neighbors.append(labels[r - 1, c - 1])
                if c < w - 1 and mask[r - 1, c + 1]:
                    neighbors.append(labels[r - 1, c + 1])
            if not neighbors:
                labels[r, c] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                lab = min(neighbors)
                labels[r, c] = lab
                for other in neighbors:
                    union(lab, other)
    # Second pass: collapse to root labels, renumbered compactly.
    remap = {0: 0}
    compact = 0
    for r in range(h):
        for c in range(w):
            if labels[r, c]:
                root = find(labels[r, c])
                if root not in remap:
                    compact += 1
                    remap[root] = compact
                labels[r, c] = remap[root]
    return labels


def largest_component(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Boolean mask of the maximum-cardinality component.

    Size ties break toward the component whose minimum (row, col) comes
    first in row-major order. An empty input yields an all-false mask.
    """
    labels = label_components(mask, connectivity)
    n = labels.max()
    if n == 0:
        return np.zeros(labels.shape, dtype=bool)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    best = None
    for lab in range(1, n + 1):  # labels are assigned in row-major discovery
        if best is None or sizes[lab] > sizes[best]:
            best = lab
    return labels == best


def bounding_box(
    imap: IntensityMap | np.ndarray,
    fraction: float = 0.2,
    connectivity: int = 4,
    raw: bool = False,
) -> Box:
    """Smallest half-open box over the largest thresholded component.

    Falls back to the 1x1 box at the map argmax when the mask is empty
    (possible only in raw mode), so evaluation never aborts.
    """
    values = imap.values if isinstance(imap, IntensityMap) else np.asarray(imap)
    mask = threshold_mask(values, fraction, raw=raw)
    comp = largest_component(mask, connectivity)
    if not comp.any():
        r, c = np.unravel_index(int(np.argmax(values)), values.shape)
        return Box(float(c), float(r), float(c + 1), float(r + 1))
    rows, cols = np.nonzero(comp)
    return Box(
        x0=float(cols.min()),
        y0=float(rows.min()),
        x1=float(cols.max() + 1),
        y1=float(rows.max() + 1),
    )


def to_image_space(
    b: Box, feat_hw: tuple[int, int], img_hw: tuple[int, int]
) -> Box:
    """Scale box corners linearly from the feature grid into image pixels."""
    if b.space != SPACE_FEATURE:
        raise ValueError("box is not in feature-grid space")
    fh, fw = feat_hw
    ih, iw = img_hw
    if fh <= 0 or fw <= 0:
        raise ValueError("feature grid must be non-empty")
    sx = iw / fw
    sy = ih / fh
    return Box(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy, space=SPACE_IMAGE)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; disjoint boxes score 0."""
    if a.space != b.space:
        raise ValueError(f"boxes in different spaces: {a.space} vs {b.space}")
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def best_iou(pred: Box, gt_boxes: list[Box]) -> float:
    """Highest IoU of the prediction against any ground-truth box."""
    if not gt_boxes:
        raise ValueError("need at least one ground-truth box")
    return max(iou(pred, gt) for gt in gt_boxes)


@dataclass
class LocalizationResult:
    """Outcome for one sample under one evaluation mode."""

    sample_id: str
    used_label: int
    predicted_box: Box
    iou: float
    true_label: int
    pred_label: int | None = None

    @property
    def correct(self) -> bool:
        return self.iou > IOU_THRESHOLD


def evaluate(results: list[LocalizationResult], mode: str = "gt_loc") -> float:
    """Localization accuracy as a percentage.

    gt_loc counts IoU > 0.5 with the true label's map; top1_loc additionally
    requires the predicted label to equal the true label (and the IoU to
    have been computed with the predicted label's map, which is the
    caller's responsibility).
    """
    if not results:
        raise ValueError("cannot evaluate an empty result list")
    if mode == "gt_loc":
        hits = sum(1 for r in results if r.correct)
    elif mode == "top1_loc":
        hits = sum(
            1 for r in results if r.correct and r.pred_label == r.true_label
        )
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return 100.0 * hits / len(results)
