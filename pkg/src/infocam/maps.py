"""Intensity-map mathematics.

A class activation map weighs final-conv feature grids by the head row of
one class; its spatial sum is exactly that class's softmax input. The
information-theoretic refinements replace the single class row with a
difference against the other classes (averaged, or the per-window least
likely one) and aggregate over a square sliding region before thresholding.

All computation is float64; log-sum-exp is always max-shifted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KIND_CAM = "cam"
KIND_INFOCAM = "infocam"
KIND_INFOCAM_PLUS = "infocam_plus"


@dataclass
class FeatureStack:
    """Final-conv feature grids, shape (K, H, W)."""

    features: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3 or min(self.features.shape) < 1:
            raise ValueError(f"features must be (K,H,W), got {self.features.shape}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


@dataclass
class ClassifierHead:
    """Linear head over sum-pooled features: weights (M, K), optional bias (M,).

    The weights are in sum-pool space: logit_y = sum_k w[y,k] * sum_ab g_k(a,b)
    (+ bias_y), which makes the spatial sum of a class map equal the logit.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    multilabel: bool = False

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be (M,K), got {self.weights.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError("bias length must match number of classes")
        min_classes = 1 if self.multilabel else 2
        if self.num_classes < min_classes:
            raise ValueError(f"need at least {min_classes} classes")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_features(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class RegionSpec:
    """Square aggregation window of edge length `side`.

    `anchor` is "centered" (stride-1 window centered on each grid point,
    zero-padded at borders; side must be odd) or "topleft" (window hangs
    down-right from each point, supporting even sides exactly).
    """

    side: int = 1
    anchor: str = "centered"

    def __post_init__(self) -> None:
        if self.side < 1:
            raise ValueError("region side must be positive")
        if self.anchor not in ("centered", "topleft"):
            raise ValueError(f"unknown anchor {self.anchor!r}")
        if self.anchor == "centered" and self.side % 2 == 0:
            raise ValueError("centered regions need an odd side; use topleft "
                             "anchoring for even sides")


@dataclass
class IntensityMap:
    """One (H, W) grid of per-location intensities for one label."""

    values: np.ndarray
    label: int
    kind: str
    region_side: int = 1

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"map values must be 2-D, got {self.values.shape}")


def _check_pair(fs: FeatureStack, head: ClassifierHead, y: int) -> None:
    if head.num_features != fs.features.shape[0]:
        raise ValueError(
            f"head expects K={head.num_features} features, "
            f"stack has {fs.features.shape[0]}"
        )
    if not 0 <= y < head.num_classes:
        raise ValueError(f"label {y} outside [0, {head.num_classes})")


def _check_region(fs: FeatureStack, region: RegionSpec) -> None:
    h, w = fs.grid_shape
    if region.side > min(h, w):
        raise ValueError(f"region side {region.side} exceeds grid {h}x{w}")


def cam(fs: FeatureStack, head: ClassifierHead, y: int) -> IntensityMap:
    """Class activation map: values[a,b] = sum_k w[y,k] * g_k(a,b)."""
    _check_pair(fs, head, y)
    values = np.tensordot(head.weights[y], fs.features, axes=1)
    return IntensityMap(values=values, label=y, kind=KIND_CAM, region_side=1)


def logits(fs: FeatureStack, head: ClassifierHead) -> np.ndarray:
    """Softmax inputs n, one per class: n = W @ sum_ab(g) (+ bias)."""
    if head.num_features != fs.features.shape[0]:
        raise ValueError("feature count mismatch between stack and head")
    pooled = fs.features.sum(axis=(1, 2))
    n = head.weights @ pooled
    if head.bias is not None:
        n = n + head.bias
    return n


def logsumexp(n: np.ndarray) -> float:
    """Max-shifted log(sum(exp(n)))."""
    n = np.asarray(n, dtype=np.float64)
    m = float(np.max(n))
    return m + float(np.log(np.sum(np.exp(n - m))))


def pmi(n: np.ndarray, y: int) -> float:
    """Pointwise mutual information of (x, y) from the logit vector.

    Under a uniform label prior this is n_y - logsumexp(n) + log(M);
    it is bounded above by log(M) and exp(pmi) sums to M over labels.
    """
    n = np.asarray(n, dtype=np.float64)
    if n.ndim != 1 or n.shape[0] < 2:
        raise ValueError("need a logit vector with M >= 2")
    if not 0 <= y < n.shape[0]:
        raise ValueError(f"label {y} outside [0, {n.shape[0]})")
    if not np.all(np.isfinite(n)):
        raise ValueError("logits must be finite")
    return float(n[y]) - logsumexp(n) + float(np.log(n.shape[0]))


def estimate_mi(
    samples: list[tuple[FeatureStack, int]], head: ClassifierHead
) -> float:
    """Mutual-information estimate: mean pointwise MI over (stack, label) pairs."""
    if not samples:
        raise ValueError("cannot estimate mutual information from no samples")
    if head.multilabel:
        raise ValueError("mutual-information estimate needs a softmax head")
    return float(
        np.mean([pmi(logits(fs, head), y) for fs, y in samples])
    )


def box_filter(values: np.ndarray, region: RegionSpec) -> np.ndarray:
    """Sliding-window sum over `region`, zero padding outside the grid.

    Centered anchoring keeps the output aligned with the input grid;
    topleft anchoring sums the side x side window whose top-left corner
    sits at each point. Output shape equals input shape either way.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    s = region.side
    if s == 1:
        return values.copy()
    if region.anchor == "centered":
        lo = s // 2
        hi = s - 1 - lo
    else:
        lo, hi = 0, s - 1
    padded = np.zeros((h + s - 1, w + s - 1), dtype=np.float64)
    padded[lo : lo + h, lo : lo + w] = values
    windows = np.lib.stride_tricks.sliding_window_view(padded, (s, s))
    return windows.sum(axis=(2, 3))


def class_region_sums(
    fs: FeatureStack, head: ClassifierHead, region: RegionSpec
) -> np.ndarray:
    """Per-class window logit sums S_m, shape (M, H, W).

    S_m[a,b] is the sum of class m's pointwise map over the window at (a,b).
    """
    point_maps = np.tensordot(head.weights, fs.features, axes=1)  # (M,H,W)
    return np.stack([box_filter(pm, region) for pm in point_maps])


def infocam(
    fs: FeatureStack, head: ClassifierHead, y: int, region: RegionSpec
) -> IntensityMap:
    """Window intensity: class-y map minus the mean of all other classes' maps.

    Decomposes pointwise, so it is the plain map of the modified weight row
    w[y] - mean_{y' != y} w[y'], box-filtered over the region.
    """
    _check_pair(fs, head, y)
    _check_region(fs, region)
    m = head.num_classes
    if m < 2:
        raise ValueError("intensity difference needs at least 2 classes")
    others = (head.weights.sum(axis=0) - head.weights[y]) / (m - 1)
    diff = np.tensordot(head.weights[y] - others, fs.features, axes=1)
    values = box_filter(diff, region)
    return IntensityMap(values=values, label=y, kind=KIND_INFOCAM,
                        region_side=region.side)


def infocam_plus(
    fs: FeatureStack,
    head: ClassifierHead,
    y: int,
    region: RegionSpec,
    exclude_label: bool = False,
) -> IntensityMap:
    """Window intensity against the per-window least-likely class.

    For each window R: values[a,b] = S_y(R) - min_m S_m(R), the argmin taken
    over every class (ties -> smallest index). `exclude_label` drops y from
    the argmin domain, for ablation.
    """
    _check_pair(fs, head, y)
    _check_region(fs, region)
    if head.num_classes < 2:
        raise ValueError("intensity difference needs at least 2 classes")
    sums = class_region_sums(fs, head, region)
    if exclude_label:
        candidates = np.delete(sums, y, axis=0)
    else:
        candidates = sums
    values = sums[y] - candidates.min(axis=0)
    return IntensityMap(values=values, label=y, kind=KIND_INFOCAM_PLUS,
                        region_side=region.side)


def multilabel_infocam(
    fs: FeatureStack, head: ClassifierHead, label: int, region: RegionSpec
) -> IntensityMap:
    """Per-label window intensity for a sigmoid (multi-label) head.

    For a binary present/absent task the between-label difference collapses
    to the label's own logit, so the window intensity is the region sum of
    that label's plain map; the aggregation is the only delta vs the map
    itself.
    """
    if not head.multilabel:
        raise ValueError("multilabel window intensity needs a sigmoid head")
    _check_pair(fs, head, label)
    _check_region(fs, region)
    values = box_filter(cam(fs, head, label).values, region)
    return IntensityMap(values=values, label=label, kind=KIND_INFOCAM,
                        region_side=region.side)


def compute_map(
    fs: FeatureStack,
    head: ClassifierHead,
    y: int,
    kind: str,
    region: RegionSpec,
    exclude_label: bool = False,
) -> IntensityMap:
    """Dispatch on map kind; plain maps ignore the region entirely."""
    if kind == KIND_CAM:
        return cam(fs, head, y)
    if kind == KIND_INFOCAM:
        if head.multilabel:
            return multilabel_infocam(fs, head, y, region)
        return infocam(fs, head, y, region)
    if kind == KIND_INFOCAM_PLUS:
        if head.multilabel:
            return multilabel_infocam(fs, head, y, region)
        return infocam_plus(fs, head, y, region, exclude_label=exclude_label)
    raise ValueError(f"unknown map kind {kind!r}")
