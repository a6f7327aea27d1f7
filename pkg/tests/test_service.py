"""HTTP service: request/response contracts over the inference surface."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from infocam.service import app

client = TestClient(app)


FEATURES = [[[1.0, 2.0], [3.0, 4.0]]]  # (K=1, H=2, W=2)
WEIGHTS = [[2.0], [1.0]]


class TestHealth:
    def test_ok(self):
        r = client.get("/health")
        assert r.status_code == 200
        assert r.json() == {"status": "ok"}


class TestMaps:
    def test_cam_values(self):
        r = client.post("/maps", json={
            "features": FEATURES, "weights": WEIGHTS, "label": 0,
            "kind": "cam",
        })
        assert r.status_code == 200
        body = r.json()
        assert body["values"] == [[2.0, 4.0], [6.0, 8.0]]
        assert body["kind"] == "cam"
        assert body["region_side"] == 1

    def test_infocam_window(self):
        r = client.post("/maps", json={
            "features": [[[1.0]]], "weights": [[2.0], [1.0], [0.0]],
            "label": 0, "kind": "infocam", "region_side": 1,
        })
        assert r.json()["values"] == [[1.5]]

    def test_shape_mismatch_is_422(self):
        r = client.post("/maps", json={
            "features": FEATURES, "weights": [[1.0, 2.0]], "label": 0,
            "kind": "cam",
        })
        assert r.status_code == 422

    def test_bad_kind_is_422(self):
        r = client.post("/maps", json={
            "features": FEATURES, "weights": WEIGHTS, "kind": "gradcam",
        })
        assert r.status_code == 422


class TestLocalize:
    def test_box_and_iou(self):
        features = np.zeros((1, 7, 7))
        features[0, 2:5, 2:5] = 1.0
        r = client.post("/localize", json={
            "features": features.tolist(), "weights": [[1.0], [0.0]],
            "label": 0, "kind": "cam", "threshold": 0.2,
            "image_size": [28, 28],
            "gt_boxes": [[8.0, 8.0, 20.0, 20.0]],
        })
        assert r.status_code == 200
        body = r.json()
        assert body["box_feature_space"]["x0"] == 2.0
        assert body["box_image_space"]["x1"] == 20.0
        assert body["iou"] == pytest.approx(1.0)
        assert body["correct"] is True
        assert body["used_fallback"] is False

    def test_without_image_size(self):
        r = client.post("/localize", json={
            "features": FEATURES, "weights": WEIGHTS, "label": 0,
            "kind": "cam",
        })
        body = r.json()
        assert body["box_image_space"] is None
        assert body["iou"] is None


class TestPmi:
    def test_value_and_bound(self):
        r = client.post("/pmi", json={"logits": [1.0, 0.0], "label": 0})
        body = r.json()
        assert body["pmi"] == pytest.approx(0.3798854930417224, abs=1e-12)
        assert body["upper_bound"] == pytest.approx(np.log(2))

    def test_single_class_rejected(self):
        r = client.post("/pmi", json={"logits": [1.0], "label": 0})
        assert r.status_code == 422


class TestEvaluate:
    def test_counting(self):
        r = client.post("/evaluate", json={
            "samples": [
                {"true_label": 1, "pred_label": 1, "iou": 0.6},
                {"true_label": 2, "pred_label": 0, "iou": 0.7},
            ],
            "mode": "gt_loc",
        })
        assert r.json()["accuracy"] == 100.0
        r = client.post("/evaluate", json={
            "samples": [
                {"true_label": 1, "pred_label": 1, "iou": 0.6},
                {"true_label": 2, "pred_label": 0, "iou": 0.7},
            ],
            "mode": "top1_loc",
        })
        assert r.json()["accuracy"] == 50.0

    def test_empty_rejected(self):
        r = client.post("/evaluate", json={"samples": [], "mode": "gt_loc"})
        assert r.status_code == 422
