import itertools

import numpy as np
import pytest
import torch
import torch.nn as nn

from config_manager import InferenceConfig
from data_manager import CELL_STRIDE, ImageTile, extract_instance_patches
from dataset_manager import DatasetManager
from exceptions import ConfigError, InferenceError
from inference_manager import (
    CentroidCandidate, ScoredInstanceMask, assemble_labelmap, candidates_from_map, mask_iou, nms,
    predict_centroids, predict_instance, predict_tile,
)
from model_manager import build_instance_net


def box_mask(x0, y0, x1, y1, size=64):
    mask = np.zeros((size, size), dtype=np.float32)
    mask[y0:y1, x0:x1] = 1.0
    return mask


def placed_iou_oracle(a, b):
    """在大画布上放置两个掩膜后直接数像素"""
    offset = 200
    canvas_a = np.zeros((600, 600), dtype=bool)
    canvas_b = np.zeros((600, 600), dtype=bool)
    for canvas, m in ((canvas_a, a), (canvas_b, b)):
        x, y = m.origin
        canvas[y + offset:y + offset + 64, x + offset:x + offset + 64] = m.mask >= 0.5
    union = (canvas_a | canvas_b).sum()
    return (canvas_a & canvas_b).sum() / union if union else 0.0


def greedy_oracle(masks, threshold):
    order = sorted(range(len(masks)), key=lambda k: (-masks[k].score, k))
    kept = []
    for k in order:
        if all(placed_iou_oracle(masks[k], masks[j]) < threshold for j in kept):
            kept.append(k)
    return kept


class ConstantNet(nn.Module):
    """固定输出的测试网络"""

    def __init__(self, output):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros(1))
        self.register_buffer('output', torch.as_tensor(output, dtype=torch.float32))

    def forward(self, x):
        return self.output.expand(x.shape[0], *self.output.shape) + 0 * self.anchor


class TestCandidates:

    def test_sorted_by_score(self):
        activation = np.zeros((32, 32))
        activation[1, 2] = 0.9
        activation[3, 0] = 0.6
        activation[0, 0] = 0.4
        candidates = candidates_from_map(activation, 0.5)
        assert [c.cell for c in candidates] == [(1, 2), (3, 0)]
        assert candidates[0].pixel == (20, 12)
        assert candidates[0].score == pytest.approx(0.9)

    def test_ties_in_row_major_order(self):
        activation = np.zeros((32, 32))
        activation[5, 1] = activation[2, 7] = 0.8
        assert [c.cell for c in candidates_from_map(activation)] == [(2, 7), (5, 1)]

    @pytest.mark.parametrize('threshold', [0.0, 1.0, -0.2])
    def test_threshold_range(self, threshold):
        with pytest.raises(ConfigError):
            candidates_from_map(np.zeros((32, 32)), threshold)

    def test_non_finite(self):
        activation = np.zeros((32, 32))
        activation[0, 0] = np.nan
        with pytest.raises(InferenceError):
            candidates_from_map(activation)


class TestMaskIoU:

    def test_identical(self):
        m = ScoredInstanceMask(box_mask(10, 10, 30, 30), (0, 0), 0.9)
        assert mask_iou(m, m) == 1.0

    def test_disjoint_windows(self):
        a = ScoredInstanceMask(np.ones((64, 64)), (0, 0), 0.9)
        b = ScoredInstanceMask(np.ones((64, 64)), (100, 0), 0.8)
        assert mask_iou(a, b) == 0.0

    def test_shifted_windows(self):
        a = ScoredInstanceMask(np.ones((64, 64)), (0, 0), 0.9)
        b = ScoredInstanceMask(np.ones((64, 64)), (32, 0), 0.8)
        assert mask_iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        a = ScoredInstanceMask(np.zeros((64, 64)), (0, 0), 0.9)
        assert mask_iou(a, a) == 0.0


class TestNMS:

    def _random_masks(self, rng, n=6):
        masks = []
        for score in rng.permutation(n) / n + 0.05:
            x0, y0 = rng.integers(8, 30, size=2)
            w, h = rng.integers(10, 30, size=2)
            origin = tuple(int(v) for v in rng.integers(-10, 11, size=2))
            masks.append(ScoredInstanceMask(box_mask(x0, y0, x0 + w, y0 + h), origin, float(score)))
        return masks

    def test_matches_greedy_oracle_on_all_subsets(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            masks = self._random_masks(rng)
            for r in range(len(masks) + 1):
                for subset in itertools.combinations(range(len(masks)), r):
                    chosen = [masks[k] for k in subset]
                    kept = nms(chosen, 0.5)
                    expected = [chosen[k] for k in greedy_oracle(chosen, 0.5)]
                    assert [id(m) for m in kept] == [id(m) for m in expected]

                    # 子集、互相 IoU 低于阈值、幂等
                    assert all(any(m is c for c in chosen) for m in kept)
                    for a, b in itertools.combinations(kept, 2):
                        assert mask_iou(a, b) < 0.5
                    assert [id(m) for m in nms(kept, 0.5)] == [id(m) for m in kept]
                    # 被抑制的掩膜一定与某个得分不低于它的保留掩膜重叠
                    for m in chosen:
                        if not any(m is k for k in kept):
                            assert any(k.score >= m.score and mask_iou(k, m) >= 0.5 for k in kept)

    def test_near_duplicate_suppressed(self):
        a = ScoredInstanceMask(box_mask(10, 10, 40, 40), (0, 0), 0.9)
        b = ScoredInstanceMask(box_mask(11, 10, 41, 40), (0, 0), 0.7)
        c = ScoredInstanceMask(box_mask(10, 10, 40, 40), (150, 150), 0.8)
        assert [id(m) for m in nms([b, a, c])] == [id(a), id(c)]

    def test_invalid_threshold(self):
        with pytest.raises(ConfigError):
            nms([], 1.5)


class TestLabelMap:

    def test_higher_score_wins_overlap(self):
        low = ScoredInstanceMask(box_mask(0, 0, 40, 40), (0, 0), 0.6)
        high = ScoredInstanceMask(box_mask(20, 20, 60, 60), (0, 0), 0.9)
        labels, foreground = assemble_labelmap([high, low], 256)
        assert labels.dtype == np.int32
        assert labels[30, 30] == 1
        assert labels[5, 5] == 2
        assert labels[50, 50] == 1
        assert foreground.sum() == 40 * 40 * 2 - 20 * 20

    def test_clipped_at_tile_edge(self):
        m = ScoredInstanceMask(np.ones((64, 64), dtype=np.float32), (-32, 240), 0.9)
        labels, foreground = assemble_labelmap([m], 256)
        assert foreground.sum() == 32 * 16
        assert labels[255, 0] == 1

    def test_empty(self):
        labels, foreground = assemble_labelmap([], 256)
        assert labels.max() == 0
        assert not foreground.any()


def _tile():
    return ImageTile(pixels=np.zeros((256, 256, 3), np.float32), annotations=[], tile_id='blank')


class TestPredict:

    def test_predict_centroids_single_cell(self):
        activation = np.zeros((1, 32, 32), dtype=np.float32)
        activation[0, 16, 16] = 0.9
        candidates = predict_centroids(ConstantNet(activation), _tile())
        assert len(candidates) == 1
        assert candidates[0].cell == (16, 16)
        assert candidates[0].pixel == (132, 132)

    def test_predict_centroids_threshold_and_order(self):
        activation = np.zeros((1, 32, 32), dtype=np.float32)
        activation[0, 2, 3] = 0.4
        activation[0, 10, 1] = 0.6
        activation[0, 20, 30] = 0.7
        candidates = predict_centroids(ConstantNet(activation), _tile(), threshold=0.5)
        assert [c.cell for c in candidates] == [(20, 30), (10, 1)]
        assert candidates[0].score == pytest.approx(0.7)

    def test_predict_instance_origin(self):
        net = build_instance_net()
        candidate = CentroidCandidate(cell=(0, 0), pixel=(4, 4), score=0.8)
        mask = predict_instance(net, _tile(), candidate)
        assert mask.origin == (-28, -28)
        assert mask.mask.shape == (64, 64)
        assert mask.score == 0.8

    def test_constant_networks(self):
        activation = np.zeros((1, 32, 32), dtype=np.float32)
        activation[0, 4, 6] = 0.9
        activation[0, 4, 7] = 0.7
        instance = box_mask(22, 22, 42, 42)[None]
        prediction = predict_tile(ConstantNet(activation), ConstantNet(instance), _tile(), InferenceConfig())
        assert len(prediction.candidates) == 2
        # 相邻单元的两个掩膜 IoU = 240 / 560 < 0.5，都保留
        assert len(prediction.masks) == 2
        assert prediction.label_map.max() == 2
        assert prediction.masks[0].origin == (52 - 32, 36 - 32)
        assert prediction.to_record()['instances'][0]['pixels'] == 400

    def test_nothing_detected(self):
        prediction = predict_tile(ConstantNet(np.zeros((1, 32, 32))), build_instance_net(), _tile())
        assert prediction.candidates == []
        assert prediction.masks == []
        assert not prediction.foreground.any()

    def test_non_finite_instance_output(self):
        activation = np.zeros((1, 32, 32), dtype=np.float32)
        activation[0, 0, 0] = 0.9
        bad = np.full((1, 64, 64), np.nan, dtype=np.float32)
        with pytest.raises(InferenceError):
            predict_tile(ConstantNet(activation), ConstantNet(bad), _tile())


def test_predict_instance_matches_training_forward(synthetic_dir, instance_set):
    net = build_instance_net().eval()
    tiles = DatasetManager(synthetic_dir).load_tiles('train')
    pairs = [(tile, p) for tile in tiles for p in extract_instance_patches(tile)]
    for k in (0, len(pairs) - 1):
        tile, patch = pairs[k]
        cx, cy = patch.center
        candidate = CentroidCandidate(cell=(cy // CELL_STRIDE, cx // CELL_STRIDE), pixel=(cx, cy), score=1.0)
        with torch.no_grad():
            expected = net(torch.from_numpy(instance_set.train_x[k:k + 1]))[0, 0].numpy()
        predicted = predict_instance(net, tile, candidate)
        assert np.array_equal(predicted.mask, expected)
        assert predicted.origin == (cx - 32, cy - 32)
