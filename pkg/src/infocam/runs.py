"""Batch orchestration: training runs, localization sweeps, ablations,
and validation of externally exported feature manifests.

These functions sit between the pure math modules and the CLI/service:
they read manifests or checkpoints, fan out over samples, and aggregate
metrics into JSON- and CSV-ready structures.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .arrayio import Manifest, load_manifest, read_array
from .boxes import (
    Box,
    LocalizationResult,
    SPACE_IMAGE,
    best_iou,
    evaluate,
    largest_component,
    threshold_mask,
    to_image_space,
)
from .maps import (
    ClassifierHead,
    FeatureStack,
    IntensityMap,
    KIND_CAM,
    KIND_INFOCAM,
    RegionSpec,
    box_filter,
    cam,
    compute_map,
    logits as head_logits,
)
from .nn import Network, TrainConfig, predict_logits, train


@dataclass
class LocalizeOptions:
    """Pipeline knobs. Thresholding defaults to raw 20%-of-max, which is
    what the box protocol means by "exceeding" a fraction of the map
    maximum; min-max-normalized mode is available for maps whose zero level
    should float with the map range."""

    kind: str = KIND_INFOCAM
    region_side: int = 3
    region_anchor: str = "centered"
    threshold: float = 0.2
    connectivity: int = 4
    raw_threshold: bool = True
    exclude_true_label: bool = False
    target_digit: int | None = None
    dump_images: int = 0

    def region(self) -> RegionSpec:
        if self.kind == KIND_CAM:
            return RegionSpec(1)
        return RegionSpec(self.region_side, self.region_anchor)


def localize_map(
    imap: IntensityMap | np.ndarray, opts: LocalizeOptions
) -> tuple[Box, bool]:
    """Threshold -> largest component -> box; reports fallback use."""
    values = imap.values if isinstance(imap, IntensityMap) else np.asarray(imap)
    mask = threshold_mask(values, opts.threshold, raw=opts.raw_threshold)
    comp = largest_component(mask, opts.connectivity)
    if comp.any():
        rows, cols = np.nonzero(comp)
        return (
            Box(float(cols.min()), float(rows.min()),
                float(cols.max() + 1), float(rows.max() + 1)),
            False,
        )
    r, c = np.unravel_index(int(np.argmax(values)), values.shape)
    return Box(float(c), float(r), float(c + 1), float(r + 1)), True


def _gt_boxes_for(entry, label: int) -> list[Box]:
    return [
        Box(b[0], b[1], b[2], b[3], space=SPACE_IMAGE)
        for lab, b in zip(entry.labels, entry.gt_boxes)
        if lab == label
    ]


def _all_gt_boxes(entry) -> list[Box]:
    return [Box(b[0], b[1], b[2], b[3], space=SPACE_IMAGE) for b in entry.gt_boxes]


@dataclass
class SampleSource:
    """Uniform access to (features, head, logits) per manifest sample.

    Packed rank-4 feature files are read once and sliced per sample.
    """

    manifest: Manifest
    network: Network | None = None

    def __post_init__(self) -> None:
        self._cache: dict[str, np.ndarray] = {}
        if self.network is None:
            weights = self.manifest.load_weights()
            if weights is None:
                raise ValueError(
                    "manifest carries no classifier head; supply a checkpoint"
                )
            head_mode = self.manifest.extra.get("head_mode", "softmax")
            self._head = ClassifierHead(
                weights,
                self.manifest.load_bias(),
                multilabel=head_mode != "softmax",
            )
        else:
            self._head = None  # grid-size dependent; built on first forward

    def sample_ids(self) -> list[str]:
        return [e.id for e in self.manifest.samples]

    def features_of(self, entry) -> np.ndarray:
        if entry.index is None:
            return self.manifest.load_features(entry)
        if entry.features not in self._cache:
            self._cache[entry.features] = read_array(
                self.manifest.resolve(entry.features)
            )
        return np.ascontiguousarray(self._cache[entry.features][entry.index])

    def get(self, entry) -> tuple[FeatureStack, ClassifierHead, np.ndarray]:
        if self.network is None:
            fs = FeatureStack(self.features_of(entry))
            return fs, self._head, head_logits(fs, self._head)
        image = self.features_of(entry)
        n, fs = self.network.forward_single(image)
        if self._head is None:
            self._head = self.network.cam_head(fs.grid_shape)
        return fs, self._head, n


def run_localize(
    manifest: Manifest,
    opts: LocalizeOptions,
    network: Network | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Full localization pass over a manifest; returns records + summary.

    With a target digit, only samples containing it are scored and its map
    is used for the ground-truth metric; otherwise each sample's first
    label is its principal label. The top-1 metric always uses the map of
    the argmax-logit class and requires that class to be correct.
    """
    src = SampleSource(manifest, network)
    region = opts.region()
    records: list[dict] = []
    gt_results: list[LocalizationResult] = []
    top1_results: list[LocalizationResult] = []
    fallbacks = 0
    dumped = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for entry in manifest.samples:
        if opts.target_digit is not None and opts.target_digit not in entry.labels:
            continue
        fs, head, n = src.get(entry)
        true_label = (
            opts.target_digit if opts.target_digit is not None else entry.labels[0]
        )
        pred_label = int(np.argmax(n))
        img_hw = entry.image_size

        gt_map = compute_map_for_cell(fs, head, true_label, opts.kind, region,
                                      exclude_label=opts.exclude_true_label)
        gt_box_feat, fell_back = localize_map(gt_map, opts)
        fallbacks += fell_back
        gt_box = to_image_space(gt_box_feat, fs.grid_shape, img_hw)
        gt_iou = best_iou(gt_box, _gt_boxes_for(entry, true_label))
        gt_results.append(
            LocalizationResult(entry.id, true_label, gt_box, gt_iou,
                               true_label, pred_label)
        )

        if pred_label == true_label:
            top1_box, top1_iou = gt_box, gt_iou
        else:
            pred_map = compute_map_for_cell(fs, head, pred_label, opts.kind,
                                            region,
                                            exclude_label=opts.exclude_true_label)
            top1_box_feat, _ = localize_map(pred_map, opts)
            top1_box = to_image_space(top1_box_feat, fs.grid_shape, img_hw)
            pred_gt = _gt_boxes_for(entry, pred_label) or _all_gt_boxes(entry)
            top1_iou = best_iou(top1_box, pred_gt)
        top1_results.append(
            LocalizationResult(entry.id, pred_label, top1_box, top1_iou,
                               true_label, pred_label)
        )

        records.append({
            "id": entry.id,
            "label": int(true_label),
            "pred_label": pred_label,
            "box": [round(v, 6) for v in gt_box.corners()],
            "iou": round(gt_iou, 6),
            "correct": bool(gt_iou > 0.5),
        })

        if out_dir is not None and dumped < opts.dump_images:
            image = src.features_of(entry)
            canvas = image[0] if image.ndim == 3 else image
            rgb = imageio.overlay(
                canvas,
                imageio.upsample_nearest(gt_map.values, canvas.shape),
                gt_box,
                _gt_boxes_for(entry, true_label),
            )
            imageio.write_ppm(out_dir / f"{entry.id}_overlay.ppm", rgb)
            imageio.write_pgm(
                out_dir / f"{entry.id}_heatmap.pgm",
                imageio.to_u8(gt_map.values),
            )
            dumped += 1

    if not gt_results:
        raise ValueError("no sample matched the requested evaluation")
    summary = {
        "kind": opts.kind,
        "region_side": region.side,
        "threshold": opts.threshold,
        "connectivity": opts.connectivity,
        "samples": len(gt_results),
        "gt_loc": round(evaluate(gt_results, "gt_loc"), 4),
        "top1_loc": round(evaluate(top1_results, "top1_loc"), 4),
        "fallback_fraction": round(fallbacks / len(gt_results), 6),
    }
    if out_dir is not None:
        write_results(out_dir, records, summary)
    return {"records": records, "summary": summary}


def write_results(out_dir: str | Path, records: list[dict], summary: dict) -> None:
    """Emit the JSON record list and a metric,value CSV summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.json").write_text(
        json.dumps({"records": records, "summary": summary},
                   indent=2, sort_keys=True) + "\n"
    )
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(summary):
            writer.writerow([key, summary[key]])


def run_train(
    manifest_path: str | Path,
    head_mode: str,
    cfg: TrainConfig,
    out_dir: str | Path,
    test_manifest_path: str | Path | None = None,
) -> dict:
    """Train the stock network on a packed dataset manifest.

    Saves a checkpoint plus a JSON log; when a test manifest is given the
    log carries per-digit presence accuracy in the summary table layout.
    """
    from .datagen import read_dataset
    from .nn import default_network, save_checkpoint

    images, presence, _ = read_dataset(manifest_path)
    if head_mode == "softmax":
        if np.any(presence.sum(axis=1) > 1):
            raise ValueError(
                "softmax head needs single-label samples; this dataset is "
                "multi-label — train with sigmoid or pc-sigmoid"
            )
        targets = presence.argmax(axis=1)
    else:
        targets = presence
    net = default_network(head_mode=head_mode, seed=cfg.seed,
                          init_scale=cfg.weight_init_scale,
                          num_classes=presence.shape[1])
    if head_mode != "softmax":
        # Start each head at its prior-matched operating point so no steps
        # are spent learning label frequencies: plain sigmoid reaches
        # sigma(b) = p at b = logit(p); the prior-corrected head subtracts
        # logit(p) from the logits, so it needs twice the offset.
        priors = np.clip(presence.mean(axis=0), 1e-6, 1 - 1e-6)
        log_odds = np.log(priors / (1.0 - priors))
        tail_bias = net.layers[-1].bias
        if head_mode == "sigmoid":
            tail_bias.value[:] = log_odds
        else:
            net.set_priors(priors)
            tail_bias.value[:] = 2.0 * log_odds
    history = train(net, images, targets, cfg)

    result = {"history": history, "head_mode": head_mode}
    if test_manifest_path is not None:
        test_images, test_presence, _ = read_dataset(test_manifest_path)
        acc = per_digit_accuracy(net, test_images, test_presence)
        result["per_digit_accuracy"] = [round(a, 4) for a in acc]
        result["mean_accuracy"] = round(float(np.mean(acc)), 4)
    save_checkpoint(out_dir, net, history)
    (Path(out_dir) / "metrics.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n"
    )
    return result


def per_digit_accuracy(net: Network, images: np.ndarray,
                       presence: np.ndarray) -> list[float]:
    """Binary presence accuracy per digit over an evaluation set."""
    n = predict_logits(net, images)
    pred = net.predict_presence(n)
    return [float(np.mean(pred[:, d] == presence[:, d]))
            for d in range(presence.shape[1])]


def accuracy_table(accuracies: list[float], row_label: str) -> str:
    """Render the per-digit accuracy row in the summary-table layout."""
    header = "type      " + " ".join(f"{d:>5d}" for d in range(len(accuracies)))
    row = f"{row_label:<10}" + " ".join(f"{a:5.2f}" for a in accuracies)
    return header + "\n" + row


ABLATION_CELLS = (
    {"region": False, "subtraction": False},
    {"region": False, "subtraction": True},
    {"region": True, "subtraction": False},
    {"region": True, "subtraction": True},
)


def run_ablation(
    manifest: Manifest,
    opts: LocalizeOptions,
    network: Network | None = None,
) -> dict:
    """2x2 grid over the region window and the between-class subtraction.

    Baseline (no region, no subtraction) is the plain class map; the full
    cell is the window-aggregated difference map. Arrows mark movement vs
    the baseline, per metric.
    """
    if opts.region_side < 2:
        raise ValueError("ablation needs a region side > 1 for the region cells")
    cells = []
    for cell in ABLATION_CELLS:
        side = opts.region_side if cell["region"] else 1
        run = run_localize(
            manifest,
            _ablation_opts(opts, side, cell["subtraction"]),
            network=network,
        )
        cells.append({**cell, "region_side": side, **run["summary"]})
    base = cells[0]
    for cell in cells[1:]:
        for metric in ("gt_loc", "top1_loc"):
            delta = cell[metric] - base[metric]
            cell[f"{metric}_arrow"] = "up" if delta > 0 else (
                "down" if delta < 0 else "flat")
    return {"cells": cells}


def _ablation_opts(opts: LocalizeOptions, side: int, subtraction: bool
                   ) -> LocalizeOptions:
    from dataclasses import replace

    kind = KIND_INFOCAM if subtraction else KIND_CAM
    new = replace(opts, kind=kind, region_side=side)
    if not subtraction and side > 1:
        new = replace(new, kind="cam_region")
    return new


def ablation_table(cells: list[dict]) -> str:
    lines = ["region  subtraction  gt_loc       top1_loc"]
    arrows = {"up": "^", "down": "v", "flat": "=", None: " "}
    for cell in cells:
        ra = "Y" if cell["region"] else "N"
        sa = "Y" if cell["subtraction"] else "N"
        ga = arrows[cell.get("gt_loc_arrow")]
        ta = arrows[cell.get("top1_loc_arrow")]
        lines.append(
            f"{ra:<7} {sa:<12} {cell['gt_loc']:6.2f} {ga}     "
            f"{cell['top1_loc']:6.2f} {ta}"
        )
    return "\n".join(lines)


def run_export_check(
    manifest_path: str | Path,
    opts: LocalizeOptions | None = None,
    logit_tolerance: float = 1e-3,
) -> dict:
    """Validate an externally exported feature manifest.

    Recomputes every sample's logits from the exported features and head
    and compares them to the exporter's own recorded logits; then runs the
    localization pipeline end to end and reports box validity and how often
    the empty-mask fallback fired.
    """
    manifest = load_manifest(manifest_path)
    opts = opts or LocalizeOptions()
    weights = manifest.load_weights()
    if weights is None:
        raise ValueError("exported manifest must carry a weights entry")
    head_mode = manifest.extra.get("head_mode", "softmax")
    head = ClassifierHead(weights, manifest.load_bias(),
                          multilabel=head_mode != "softmax")
    max_diff = 0.0
    checked = 0
    for entry in manifest.samples:
        if entry.logits is None:
            continue
        fs = FeatureStack(manifest.load_features(entry))
        ours = head_logits(fs, head)
        theirs = read_array(manifest.resolve(entry.logits))
        max_diff = max(max_diff, float(np.max(np.abs(ours - theirs))))
        checked += 1
    loc = run_localize(manifest, opts)
    boxes_valid = all(
        r["box"][0] < r["box"][2] and r["box"][1] < r["box"][3]
        for r in loc["records"]
    )
    return {
        "samples": len(manifest.samples),
        "logits_checked": checked,
        "max_logit_abs_diff": max_diff,
        "logit_check_pass": bool(checked > 0 and max_diff <= logit_tolerance),
        "fallback_fraction": loc["summary"]["fallback_fraction"],
        "boxes_valid": boxes_valid,
        "localization_summary": loc["summary"],
    }


def compute_map_for_cell(fs: FeatureStack, head: ClassifierHead, label: int,
                         kind: str, region: RegionSpec,
                         exclude_label: bool = False) -> IntensityMap:
    """compute_map plus the ablation-only region-without-subtraction cell."""
    if kind == "cam_region":
        values = box_filter(cam(fs, head, label).values, region)
        return IntensityMap(values=values, label=label, kind="cam_region",
                            region_side=region.side)
    return compute_map(fs, head, label, kind, region, exclude_label=exclude_label)
