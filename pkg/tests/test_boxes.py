"""Thresholding, components, boxes, IoU, and the two accuracies."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infocam.boxes import (
    Box,
    LocalizationResult,
    SPACE_IMAGE,
    best_iou,
    bounding_box,
    evaluate,
    iou,
    label_components,
    largest_component,
    threshold_mask,
    to_image_space,
)


def flood_fill_components(mask, connectivity=4):
    """Independent BFS labeling oracle."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                 if (dr, dc) != (0, 0)]
    current = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and labels[r, c] == 0:
                current += 1
                queue = [(r, c)]
                labels[r, c] = current
                while queue:
                    qr, qc = queue.pop()
                    for dr, dc in steps:
                        nr, nc = qr + dr, qc + dc
                        if (0 <= nr < h and 0 <= nc < w and mask[nr, nc]
                                and labels[nr, nc] == 0):
                            labels[nr, nc] = current
                            queue.append((nr, nc))
    return labels


def components_as_sets(labels):
    return {
        frozenset(zip(*np.nonzero(labels == lab)))
        for lab in range(1, labels.max() + 1)
    }


class TestThresholdMask:
    def test_hand_normalization(self):
        values = np.array([[0.0, 10.0], [2.0, 9.0]])
        mask = threshold_mask(values, 0.2)
        # normalized [[0,1],[0.2,0.9]]; 0.2 excluded by the strict compare
        assert mask.tolist() == [[False, True], [False, True]]

    def test_constant_map_all_true(self):
        assert threshold_mask(np.full((3, 4), 7.0), 0.2).all()

    def test_all_negative_map(self):
        values = np.array([[-11.0, -1.0], [-6.0, -9.0]])
        mask = threshold_mask(values, 0.2)
        # min-max sends [-11,-1] to [0,1]: normalized [[0,1],[0.5,0.2]]
        assert mask.tolist() == [[False, True], [True, False]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6),
           st.floats(0.01, 100.0), st.floats(-50.0, 50.0))
    def test_positive_affine_invariance(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(5, 6))
        base = threshold_mask(values, 0.3)
        scaled = threshold_mask(alpha * values + beta, 0.3)
        assert np.array_equal(base, scaled)

    def test_raw_mode(self):
        values = np.array([[0.0, 10.0], [2.0, 9.0]])
        mask = threshold_mask(values, 0.2, raw=True)
        assert mask.tolist() == [[False, True], [False, True]]
        assert not threshold_mask(-np.ones((2, 2)), 0.2, raw=True).any()

    def test_fraction_domain(self):
        with pytest.raises(ValueError):
            threshold_mask(np.ones((2, 2)), 0.0)
        with pytest.raises(ValueError):
            threshold_mask(np.ones((2, 2)), 1.0)


class TestComponents:
    def test_larger_component_wins(self):
        mask = np.array([
            [1, 1, 0, 1],
            [1, 0, 0, 1],
            [0, 0, 0, 1],
            [0, 0, 1, 1],
        ], dtype=bool)
        comp = largest_component(mask)
        assert comp.sum() == 5
        assert comp[0, 3] and comp[3, 2]
        assert not comp[0, 0]

    def test_diagonal_connectivity(self):
        mask = np.array([[1, 0], [0, 1]], dtype=bool)
        assert label_components(mask, 4).max() == 2
        assert label_components(mask, 8).max() == 1

    def test_tie_breaks_to_first_in_row_major(self):
        mask = np.array([
            [0, 1, 0, 0],
            [0, 1, 0, 1],
            [0, 0, 0, 1],
        ], dtype=bool)
        comp = largest_component(mask)
        assert comp[0, 1] and comp[1, 1]
        assert not comp[1, 3]

    def test_empty_mask(self):
        comp = largest_component(np.zeros((3, 3), dtype=bool))
        assert not comp.any()

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_flood_fill_oracle(self, connectivity):
        rng = np.random.default_rng(connectivity)
        for _ in range(200):
            mask = rng.random((16, 16)) < rng.uniform(0.2, 0.8)
            ours = label_components(mask, connectivity)
            oracle = flood_fill_components(mask, connectivity)
            assert components_as_sets(ours) == components_as_sets(oracle)


class TestBoundingBox:
    def test_from_threshold_example(self):
        values = np.array([[0.0, 10.0], [2.0, 9.0]])
        box = bounding_box(values, 0.2)
        assert box.corners() == [1.0, 0.0, 2.0, 2.0]

    def test_single_point(self):
        mask_values = np.zeros((6, 6))
        mask_values[3, 4] = 1.0
        box = bounding_box(mask_values, 0.5, raw=True)
        assert box.corners() == [4.0, 3.0, 5.0, 4.0]

    def test_full_grid(self):
        box = bounding_box(np.full((7, 7), 3.0), 0.2)
        assert box.corners() == [0.0, 0.0, 7.0, 7.0]

    def test_empty_mask_falls_back_to_argmax(self):
        values = -np.arange(9.0).reshape(3, 3) - 1.0  # max -1 at (0,0)
        box = bounding_box(values, 0.2, raw=True)
        assert box.corners() == [0.0, 0.0, 1.0, 1.0]

    def test_covers_component_minimally(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            values = rng.normal(size=(9, 9))
            box = bounding_box(values, 0.3)
            comp = largest_component(threshold_mask(values, 0.3))
            rows, cols = np.nonzero(comp)
            assert box.x0 == cols.min() and box.x1 == cols.max() + 1
            assert box.y0 == rows.min() and box.y1 == rows.max() + 1


class TestToImageSpace:
    def test_linear_scaling(self):
        box = to_image_space(Box(1, 1, 5, 5), (7, 7), (224, 224))
        assert box.corners() == [32.0, 32.0, 160.0, 160.0]
        assert box.space == SPACE_IMAGE

    def test_full_grid_maps_to_full_image(self):
        box = to_image_space(Box(0, 0, 14, 7), (7, 14), (28, 56))
        assert box.corners() == [0.0, 0.0, 56.0, 28.0]

    def test_single_cell(self):
        box = to_image_space(Box(0, 0, 1, 1), (7, 7), (224, 224))
        assert box.corners() == [0.0, 0.0, 32.0, 32.0]

    def test_preserves_iou_exactly(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            a = sorted(rng.uniform(0, 7, size=2))
            b = sorted(rng.uniform(0, 7, size=2))
            c = sorted(rng.uniform(0, 7, size=2))
            d = sorted(rng.uniform(0, 7, size=2))
            if a[0] == a[1] or b[0] == b[1] or c[0] == c[1] or d[0] == d[1]:
                continue
            b1 = Box(a[0], b[0], a[1], b[1])
            b2 = Box(c[0], d[0], c[1], d[1])
            s1 = to_image_space(b1, (7, 7), (224, 224))
            s2 = to_image_space(b2, (7, 7), (224, 224))
            assert iou(s1, s2) == pytest.approx(iou(b1, b2), abs=1e-12)

    def test_rejects_image_space_box(self):
        with pytest.raises(ValueError):
            to_image_space(Box(0, 0, 1, 1, space=SPACE_IMAGE), (7, 7), (14, 14))


class TestIoU:
    def test_identity(self):
        b = Box(1, 2, 5, 8)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 2, 2), Box(5, 5, 8, 8)) == 0.0

    def test_half_overlap(self):
        a = Box(0, 0, 10, 10)
        b = Box(0, 5, 10, 15)
        assert iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_pixel_count_oracle(self):
        # integer boxes: count cells in a rasterized grid
        rng = np.random.default_rng(41)
        for _ in range(30):
            x = np.sort(rng.integers(0, 20, size=4))
            y = np.sort(rng.integers(0, 20, size=4))
            if x[0] == x[1] or x[2] == x[3] or y[0] == y[1] or y[2] == y[3]:
                continue
            a = Box(int(x[0]), int(y[0]), int(x[1]), int(y[1]))
            b = Box(int(x[2]), int(y[2]), int(x[3]), int(y[3]))
            grid_a = np.zeros((25, 25), dtype=bool)
            grid_b = np.zeros((25, 25), dtype=bool)
            grid_a[int(a.y0):int(a.y1), int(a.x0):int(a.x1)] = True
            grid_b[int(b.y0):int(b.y1), int(b.x0):int(b.x1)] = True
            inter = np.sum(grid_a & grid_b)
            union = np.sum(grid_a | grid_b)
            assert iou(a, b) == pytest.approx(inter / union, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        xs = np.sort(rng.uniform(0, 10, size=4))
        ys = np.sort(rng.uniform(0, 10, size=4))
        a = Box(xs[0], ys[0], xs[1] + 0.1, ys[1] + 0.1)
        b = Box(xs[2], ys[2], xs[3] + 0.1, ys[3] + 0.1)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    def test_mixed_spaces_rejected(self):
        with pytest.raises(ValueError):
            iou(Box(0, 0, 1, 1), Box(0, 0, 1, 1, space=SPACE_IMAGE))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            Box(3, 0, 3, 1)
        with pytest.raises(ValueError):
            Box(-1, 0, 3, 1)


def _result(i, true_label, pred_label, iou_value):
    return LocalizationResult(
        sample_id=str(i), used_label=true_label,
        predicted_box=Box(0, 0, 1, 1, space=SPACE_IMAGE),
        iou=iou_value, true_label=true_label, pred_label=pred_label)


class TestEvaluate:
    def test_counting(self):
        results = [_result(0, 1, 1, 0.6), _result(1, 2, 2, 0.4)]
        assert evaluate(results, "gt_loc") == 50.0
        assert evaluate(results, "top1_loc") == 50.0

    def test_wrong_label_counts_only_for_gt(self):
        results = [_result(0, 1, 3, 0.8)]
        assert evaluate(results, "gt_loc") == 100.0
        assert evaluate(results, "top1_loc") == 0.0

    def test_boundary_is_strict(self):
        assert evaluate([_result(0, 1, 1, 0.5)], "gt_loc") == 0.0

    def test_independent_recount(self):
        rng = np.random.default_rng(51)
        results = [
            _result(i, int(rng.integers(3)), int(rng.integers(3)),
                    float(rng.random()))
            for i in range(200)
        ]
        gt = evaluate(results, "gt_loc")
        top1 = evaluate(results, "top1_loc")
        gt_count = sum(1 for r in results if r.iou > 0.5)
        top1_count = sum(
            1 for r in results if r.iou > 0.5 and r.pred_label == r.true_label)
        assert abs(gt - 100.0 * gt_count / 200) <= 1e-12
        assert abs(top1 - 100.0 * top1_count / 200) <= 1e-12

    def test_best_iou_any_match(self):
        pred = Box(0, 0, 4, 4, space=SPACE_IMAGE)
        gts = [Box(10, 10, 12, 12, space=SPACE_IMAGE),
               Box(0, 0, 4, 5, space=SPACE_IMAGE)]
        assert best_iou(pred, gts) == pytest.approx(0.8)

    def test_empty_inputs(self):
        with pytest.raises(ValueError):
            evaluate([], "gt_loc")
        with pytest.raises(ValueError):
            best_iou(Box(0, 0, 1, 1), [])
