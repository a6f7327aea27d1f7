"""HTTP service exposing the inference surface: intensity maps, single-map
localization, pointwise mutual information, and metric aggregation.

Batch work (dataset synthesis, training) stays on the CLI; this service
wraps the per-request math so external clients and UIs can query maps and
boxes without linking the package.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .boxes import LocalizationResult, SPACE_IMAGE, best_iou, evaluate
from .boxes import Box, to_image_space
from .maps import ClassifierHead, FeatureStack, RegionSpec, pmi
from .runs import LocalizeOptions, compute_map_for_cell, localize_map

app = FastAPI(
    title="infocam",
    description="Intensity maps and weakly supervised localization",
    version="0.1.0",
)

MapKind = Literal["cam", "infocam", "infocam_plus"]


class MapRequest(BaseModel):
    features: list[list[list[float]]] = Field(description="(K,H,W) feature grids")
    weights: list[list[float]] = Field(description="(M,K) head in sum-pool space")
    bias: list[float] | None = None
    label: int = 0
    kind: MapKind = "infocam"
    region_side: int = 1
    region_anchor: Literal["centered", "topleft"] = "centered"
    multilabel: bool = False
    exclude_true_label: bool = False


class MapResponse(BaseModel):
    values: list[list[float]]
    label: int
    kind: str
    region_side: int


class LocalizeRequest(MapRequest):
    threshold: float = 0.2
    connectivity: Literal[4, 8] = 4
    raw_threshold: bool = True
    image_size: tuple[int, int] | None = None
    gt_boxes: list[list[float]] | None = None


class BoxModel(BaseModel):
    x0: float
    y0: float
    x1: float
    y1: float
    space: str


class LocalizeResponse(BaseModel):
    box_feature_space: BoxModel
    box_image_space: BoxModel | None
    used_fallback: bool
    iou: float | None
    correct: bool | None


class PmiRequest(BaseModel):
    logits: list[float]
    label: int


class EvalSample(BaseModel):
    true_label: int
    pred_label: int | None = None
    iou: float


class EvalRequest(BaseModel):
    samples: list[EvalSample]
    mode: Literal["gt_loc", "top1_loc"] = "gt_loc"


def _build_inputs(req: MapRequest) -> tuple[FeatureStack, ClassifierHead]:
    try:
        fs = FeatureStack(np.asarray(req.features, dtype=np.float64))
        head = ClassifierHead(
            np.asarray(req.weights, dtype=np.float64),
            None if req.bias is None else np.asarray(req.bias, dtype=np.float64),
            multilabel=req.multilabel,
        )
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return fs, head


def _compute(req: MapRequest):
    fs, head = _build_inputs(req)
    try:
        region = (RegionSpec(1) if req.kind == "cam"
                  else RegionSpec(req.region_side, req.region_anchor))
        return fs, compute_map_for_cell(
            fs, head, req.label, req.kind, region,
            exclude_label=req.exclude_true_label,
        )
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/maps", response_model=MapResponse)
def maps(req: MapRequest) -> MapResponse:
    _, imap = _compute(req)
    return MapResponse(
        values=imap.values.tolist(),
        label=imap.label,
        kind=imap.kind,
        region_side=imap.region_side,
    )


@app.post("/localize", response_model=LocalizeResponse)
def localize(req: LocalizeRequest) -> LocalizeResponse:
    fs, imap = _compute(req)
    opts = LocalizeOptions(
        kind=req.kind,
        region_side=req.region_side,
        threshold=req.threshold,
        connectivity=req.connectivity,
        raw_threshold=req.raw_threshold,
    )
    try:
        feat_box, fell_back = localize_map(imap, opts)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    img_box = None
    iou_val = None
    correct = None
    if req.image_size is not None:
        img_box = to_image_space(feat_box, fs.grid_shape, tuple(req.image_size))
        if req.gt_boxes:
            gts = [Box(*b, space=SPACE_IMAGE) for b in req.gt_boxes]
            iou_val = best_iou(img_box, gts)
            correct = iou_val > 0.5
    return LocalizeResponse(
        box_feature_space=BoxModel(**{
            "x0": feat_box.x0, "y0": feat_box.y0,
            "x1": feat_box.x1, "y1": feat_box.y1, "space": feat_box.space,
        }),
        box_image_space=None if img_box is None else BoxModel(**{
            "x0": img_box.x0, "y0": img_box.y0,
            "x1": img_box.x1, "y1": img_box.y1, "space": img_box.space,
        }),
        used_fallback=fell_back,
        iou=iou_val,
        correct=correct,
    )


@app.post("/pmi")
def pmi_endpoint(req: PmiRequest) -> dict:
    try:
        value = pmi(np.asarray(req.logits, dtype=np.float64), req.label)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return {"pmi": value, "upper_bound": float(np.log(len(req.logits)))}


@app.post("/evaluate")
def evaluate_endpoint(req: EvalRequest) -> dict:
    results = [
        LocalizationResult(
            sample_id=str(i),
            used_label=s.true_label,
            predicted_box=Box(0.0, 0.0, 1.0, 1.0, space=SPACE_IMAGE),
            iou=s.iou,
            true_label=s.true_label,
            pred_label=s.pred_label,
        )
        for i, s in enumerate(req.samples)
    ]
    try:
        accuracy = evaluate(results, req.mode)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return {"mode": req.mode, "accuracy": accuracy, "samples": len(results)}
