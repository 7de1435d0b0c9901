#!/usr/bin/env python3
"""
推理管理器
预测流程：质心检测 → 逐质心切片解码 → 掩膜放置 → 非极大值抑制 → 瓦片标签图
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from config_manager import InferenceConfig
from data_manager import CELL_STRIDE, PATCH_SIZE, ImageTile, crop_window
from exceptions import ConfigError, InferenceError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CentroidCandidate:
    """质心候选：网格单元 (i, j)、瓦片像素 (x, y) = (8j+4, 8i+4)、得分"""

    cell: Tuple[int, int]
    pixel: Tuple[int, int]
    score: float


@dataclass
class ScoredInstanceMask:
    """放置在瓦片上的 64×64 软掩膜，origin 为左上角 (x, y)"""

    mask: np.ndarray
    origin: Tuple[int, int]
    score: float

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.mask >= threshold


@dataclass
class TilePrediction:
    """一个瓦片的完整预测结果"""

    tile_id: str
    candidates: List[CentroidCandidate]
    masks: List[ScoredInstanceMask]
    label_map: np.ndarray
    foreground: np.ndarray
    centroid_map: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self) -> Dict[str, Any]:
        return {
            'tile_id': self.tile_id,
            'candidates': [{'cell': list(c.cell), 'pixel': list(c.pixel), 'score': c.score}
                           for c in self.candidates],
            'instances': [{'id': k + 1, 'origin': list(m.origin), 'score': m.score,
                           'pixels': int(m.binary().sum())} for k, m in enumerate(self.masks)],
        }


def _check_threshold(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} 必须在 (0, 1) 内: {value}")


def _to_input(array: np.ndarray, net: nn.Module) -> torch.Tensor:
    """H×W×3 → 1×3×H×W，与网络参数同 dtype"""
    param = next(net.parameters())
    chw = np.ascontiguousarray(array.transpose(2, 0, 1)[None])
    return torch.from_numpy(chw).to(device=param.device, dtype=param.dtype)


def candidates_from_map(activation: np.ndarray, threshold: float = 0.5,
                        cell_stride: int = CELL_STRIDE) -> List[CentroidCandidate]:
    """取出激活值 ≥ 阈值的单元，按得分降序（同分按行优先顺序）"""
    _check_threshold('检测阈值', threshold)
    activation = np.asarray(activation)
    if not np.all(np.isfinite(activation)):
        raise InferenceError("质心激活图包含非有限值")
    rows, cols = np.nonzero(activation >= threshold)
    candidates = [
        CentroidCandidate(cell=(int(i), int(j)),
                          pixel=(int(cell_stride * j + cell_stride // 2), int(cell_stride * i + cell_stride // 2)),
                          score=float(activation[i, j]))
        for i, j in zip(rows, cols)
    ]
    return sorted(candidates, key=lambda c: -c.score)


@torch.no_grad()
def centroid_activation(net: nn.Module, tile: ImageTile) -> np.ndarray:
    """质心网络在评估模式下的 32×32 激活图"""
    net.eval()
    return net(_to_input(tile.pixels, net))[0, 0].cpu().numpy()


def predict_centroids(net: nn.Module, tile: ImageTile, threshold: float = 0.5) -> List[CentroidCandidate]:
    return candidates_from_map(centroid_activation(net, tile), threshold)


def _checked_masks(out: torch.Tensor) -> np.ndarray:
    masks = out[:, 0].cpu().numpy()
    if not np.all(np.isfinite(masks)):
        raise InferenceError("实例网络输出包含非有限值")
    return masks


@torch.no_grad()
def predict_instance(net: nn.Module, tile: ImageTile, candidate: CentroidCandidate) -> ScoredInstanceMask:
    """以候选像素为中心截取 64×64 窗口（与训练相同的补零规则）并解码掩膜"""
    net.eval()
    x, y = candidate.pixel
    patch = crop_window(tile.pixels, x, y, PATCH_SIZE)
    mask = _checked_masks(net(_to_input(patch, net)))[0]
    half = PATCH_SIZE // 2
    return ScoredInstanceMask(mask=mask, origin=(x - half, y - half), score=candidate.score)


@torch.no_grad()
def predict_instances(net: nn.Module, tile: ImageTile, candidates: Sequence[CentroidCandidate],
                      batch_size: int = 64) -> List[ScoredInstanceMask]:
    """批量版 predict_instance，结果顺序与候选一致"""
    net.eval()
    half = PATCH_SIZE // 2
    results: List[ScoredInstanceMask] = []
    for start in range(0, len(candidates), batch_size):
        chunk = candidates[start:start + batch_size]
        patches = np.stack([crop_window(tile.pixels, c.pixel[0], c.pixel[1], PATCH_SIZE) for c in chunk])
        param = next(net.parameters())
        batch = torch.from_numpy(np.ascontiguousarray(patches.transpose(0, 3, 1, 2))).to(
            device=param.device, dtype=param.dtype)
        for c, mask in zip(chunk, _checked_masks(net(batch))):
            results.append(ScoredInstanceMask(mask=mask, origin=(c.pixel[0] - half, c.pixel[1] - half),
                                              score=c.score))
    return results


def _overlap(a: ScoredInstanceMask, b: ScoredInstanceMask):
    """两个窗口在瓦片坐标中的重叠区域，分别返回在 a、b 内的切片"""
    (ax, ay), (bx, by) = a.origin, b.origin
    ah, aw = a.mask.shape
    bh, bw = b.mask.shape
    x0, x1 = max(ax, bx), min(ax + aw, bx + bw)
    y0, y1 = max(ay, by), min(ay + ah, by + bh)
    if x0 >= x1 or y0 >= y1:
        return None
    return ((slice(y0 - ay, y1 - ay), slice(x0 - ax, x1 - ax)),
            (slice(y0 - by, y1 - by), slice(x0 - bx, x1 - bx)))


def mask_iou(a: ScoredInstanceMask, b: ScoredInstanceMask, threshold: float = 0.5) -> float:
    """放置后二值掩膜的 IoU，两者都为空时为 0"""
    a_bin, b_bin = a.binary(threshold), b.binary(threshold)
    union = int(a_bin.sum()) + int(b_bin.sum())
    region = _overlap(a, b)
    inter = 0 if region is None else int((a_bin[region[0]] & b_bin[region[1]]).sum())
    union -= inter
    return inter / union if union else 0.0


def nms(masks: Sequence[ScoredInstanceMask], iou_threshold: float = 0.5,
        mask_threshold: float = 0.5) -> List[ScoredInstanceMask]:
    """
    贪心非极大值抑制

    按 (得分降序, 输入顺序) 依次考察，与任一已保留掩膜的二值 IoU ≥ 阈值即丢弃。
    输出按保留顺序排列。
    """
    _check_threshold('NMS IoU 阈值', iou_threshold)
    order = sorted(range(len(masks)), key=lambda k: (-masks[k].score, k))
    kept: List[ScoredInstanceMask] = []
    for k in order:
        candidate = masks[k]
        if all(mask_iou(candidate, other, mask_threshold) < iou_threshold for other in kept):
            kept.append(candidate)
    if len(kept) < len(masks):
        logger.debug(f"NMS 抑制了 {len(masks) - len(kept)} 个掩膜")
    return kept


def assemble_labelmap(masks: Sequence[ScoredInstanceMask], tile_size: int = 256,
                      mask_threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """
    合成整数标签图：第 k 个掩膜的前景像素标为 k+1，重叠像素归得分更高者

    Returns:
        (标签图 int32, 前景并集 bool)
    """
    labels = np.zeros((tile_size, tile_size), dtype=np.int32)
    priority = sorted(range(len(masks)), key=lambda k: (-masks[k].score, k))
    # 低优先级先画，高优先级覆盖
    for k in reversed(priority):
        m = masks[k]
        x, y = m.origin
        h, w = m.mask.shape
        r0, r1 = max(y, 0), min(y + h, tile_size)
        c0, c1 = max(x, 0), min(x + w, tile_size)
        if r0 >= r1 or c0 >= c1:
            continue
        window = m.binary(mask_threshold)[r0 - y:r1 - y, c0 - x:c1 - x]
        labels[r0:r1, c0:c1][window] = k + 1
    return labels, labels > 0


def predict_tile(centroid_net: nn.Module, instance_net: nn.Module, tile: ImageTile,
                 config: Optional[InferenceConfig] = None) -> TilePrediction:
    """完整预测流程；没有检测到质心时返回空结果"""
    config = config or InferenceConfig()
    activation = centroid_activation(centroid_net, tile)
    candidates = candidates_from_map(activation, config.detection_threshold)
    masks = predict_instances(instance_net, tile, candidates, config.batch_size)
    survivors = nms(masks, config.nms_iou, config.mask_threshold)
    label_map, foreground = assemble_labelmap(survivors, tile.size, config.mask_threshold)
    logger.debug(f"瓦片 {tile.tile_id}: {len(candidates)} 个候选, NMS 后 {len(survivors)} 个实例")
    return TilePrediction(tile_id=tile.tile_id, candidates=candidates, masks=survivors,
                          label_map=label_map, foreground=foreground, centroid_map=activation)
