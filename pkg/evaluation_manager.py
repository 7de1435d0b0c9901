#!/usr/bin/env python3
"""
评估管理器
混淆矩阵、像素准确率、前景 IoU、质心匹配、三阶段评估报告以及解码器对比实验
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from config_manager import InferenceConfig, NetConfig, TrainConfig
from data_manager import ImageTile, build_centroid_targets, extract_instance_patches, rasterize_instances
from dataset_manager import DatasetManager, TrainingSet, parallel_map
from exceptions import ConfigError, EmptyDataset, InvalidTarget, ShapeMismatch
from inference_manager import centroid_activation, predict_tile
from model_manager import load_checkpoint
from training_manager import LossLog, train_instance

logger = logging.getLogger(__name__)

STAGES = ('centroid', 'instance', 'overall')
STAGE_TITLES = {'centroid': '质心阶段', 'instance': '实例阶段（真值切片）', 'overall': '端到端'}


@dataclass
class ConfusionMatrix:
    """二值像素混淆矩阵"""

    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError(f"混淆矩阵计数不能为负: {self}")

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp,
                               self.fn + other.fn, self.tp + other.tp)

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self) -> float:
        """(tn + tp) / total；空矩阵记为 0"""
        return (self.tn + self.tp) / self.total if self.total else 0.0

    def percentages(self) -> Dict[str, float]:
        total = self.total or 1
        return {key: 100.0 * getattr(self, key) / total for key in ('tn', 'fp', 'fn', 'tp')}

    def to_dict(self) -> Dict[str, Any]:
        return {'tn': self.tn, 'fp': self.fp, 'fn': self.fn, 'tp': self.tp,
                'total': self.total, 'accuracy': self.accuracy, 'percentages': self.percentages()}

    def render_table(self, title: str = '') -> str:
        """2×2 百分比表：行为真值，列为预测"""
        pct = self.percentages()
        lines = [title] if title else []
        lines += [
            f"{'':>8}{'预测 0':>12}{'预测 1':>12}",
            f"{'真值 0':>8}{pct['tn']:>11.2f}%{pct['fp']:>11.2f}%",
            f"{'真值 1':>8}{pct['fn']:>11.2f}%{pct['tp']:>11.2f}%",
            f"准确率 {100.0 * self.accuracy:.2f}%（{self.total} 像素）",
        ]
        return '\n'.join(lines)


def _as_binary(array: np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype != bool:
        if not np.all((array == 0) | (array == 1)):
            raise InvalidTarget(f"{name} 必须是二值数组")
        array = array.astype(bool)
    return array


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"预测形状 {pred.shape} 与真值形状 {gt.shape} 不一致")
    return _as_binary(pred, '预测'), _as_binary(gt, '真值')


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred, gt = _check_pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionMatrix(tn=int(pred.size) - tp - fp - fn, fp=fp, fn=fn, tp=tp)


def centroid_confusion(pred_grid: np.ndarray, gt_grid: np.ndarray, distance_threshold: int = 0,
                       scores: Optional[np.ndarray] = None) -> ConfusionMatrix:
    """
    质心网格的混淆矩阵

    阈值为 0 时逐单元比较；阈值 t > 0 时，预测单元与 Chebyshev 距离 ≤ t 的真值单元
    一对一贪心匹配（先按距离，再按预测得分降序），匹配上的记 tp，其余预测记 fp，
    其余真值记 fn。
    """
    pred, gt = _check_pair(pred_grid, gt_grid)
    if distance_threshold <= 0:
        return confusion(pred, gt)

    pred_cells = np.argwhere(pred)
    gt_cells = np.argwhere(gt)
    score_of = (np.asarray(scores)[pred] if scores is not None
                else np.zeros(len(pred_cells)))
    pairs = []
    for p, pc in enumerate(pred_cells):
        for g, gc in enumerate(gt_cells):
            distance = int(np.max(np.abs(pc - gc)))
            if distance <= distance_threshold:
                pairs.append((distance, -float(score_of[p]), p, g))
    used_pred, used_gt = set(), set()
    for _, _, p, g in sorted(pairs):
        if p not in used_pred and g not in used_gt:
            used_pred.add(p)
            used_gt.add(g)
    tp = len(used_pred)
    fp = len(pred_cells) - tp
    fn = len(gt_cells) - tp
    return ConfusionMatrix(tn=int(pred.size) - tp - fp - fn, fp=fp, fn=fn, tp=tp)


def iou_counts(pred: np.ndarray, gt: np.ndarray) -> Tuple[int, int]:
    """(交集像素数, 并集像素数)"""
    pred, gt = _check_pair(pred, gt)
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt))


def foreground_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """前景 IoU，两者都为空时为 1"""
    inter, union = iou_counts(pred, gt)
    return inter / union if union else 1.0


# ---------------------------------------------------------------------------
# 流水线评估
# ---------------------------------------------------------------------------

class Predictor(Protocol):
    """评估所需的三个预测接口"""

    def centroid_map(self, tile: ImageTile) -> np.ndarray:
        """32×32 质心得分"""

    def instance_masks(self, images: np.ndarray) -> np.ndarray:
        """N×64×64×3 切片 → N×64×64 软掩膜"""

    def foreground(self, tile: ImageTile) -> np.ndarray:
        """256×256 端到端前景"""


class NetworkPredictor:
    """用训练好的两个网络实现 Predictor"""

    def __init__(self, centroid_net: nn.Module, instance_net: nn.Module,
                 config: Optional[InferenceConfig] = None):
        self.centroid_net = centroid_net.eval()
        self.instance_net = instance_net.eval()
        self.config = config or InferenceConfig()

    def centroid_map(self, tile: ImageTile) -> np.ndarray:
        return centroid_activation(self.centroid_net, tile)

    @torch.no_grad()
    def instance_masks(self, images: np.ndarray) -> np.ndarray:
        if len(images) == 0:
            return np.zeros((0,) + images.shape[1:3], dtype=np.float32)
        dtype = next(self.instance_net.parameters()).dtype
        out = []
        for start in range(0, len(images), self.config.batch_size):
            chunk = images[start:start + self.config.batch_size].transpose(0, 3, 1, 2)
            batch = torch.from_numpy(np.ascontiguousarray(chunk)).to(dtype=dtype)
            out.append(self.instance_net(batch)[:, 0].cpu().numpy())
        return np.concatenate(out)

    def foreground(self, tile: ImageTile) -> np.ndarray:
        return predict_tile(self.centroid_net, self.instance_net, tile, self.config).foreground


@dataclass
class TileEvaluation:
    """单个瓦片的三阶段结果"""

    tile_id: str
    centroid: ConfusionMatrix
    instance: ConfusionMatrix
    overall: ConfusionMatrix
    intersection: int
    union: int

    @property
    def iou(self) -> float:
        return self.intersection / self.union if self.union else 1.0

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {'tile_id': self.tile_id, 'iou': self.iou}
        for stage in STAGES:
            cm: ConfusionMatrix = getattr(self, stage)
            record.update({f'{stage}_{key}': getattr(cm, key) for key in ('tn', 'fp', 'fn', 'tp')})
            record[f'{stage}_accuracy'] = cm.accuracy
        return record


@dataclass
class EvalReport:
    """三阶段评估报告（微平均）"""

    centroid: ConfusionMatrix
    instance: ConfusionMatrix
    overall: ConfusionMatrix
    iou: float
    tiles: List[TileEvaluation] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def stages(self) -> Dict[str, ConfusionMatrix]:
        return {stage: getattr(self, stage) for stage in STAGES}

    def tile_frame(self) -> pd.DataFrame:
        return pd.DataFrame([tile.to_record() for tile in self.tiles])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'stages': {stage: cm.to_dict() for stage, cm in self.stages().items()},
            'foreground_iou': self.iou,
            'tiles': [tile.to_record() for tile in self.tiles],
            'config': self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def render_text(self) -> str:
        blocks = [cm.render_table(STAGE_TITLES[stage]) for stage, cm in self.stages().items()]
        blocks.append(f"前景 IoU {self.iou:.4f}（{len(self.tiles)} 个测试瓦片）")
        return '\n\n'.join(blocks) + '\n'


def evaluate_tile(tile: ImageTile, predictor: Predictor, config: InferenceConfig,
                  distance_threshold: int = 0) -> TileEvaluation:
    scores = np.asarray(predictor.centroid_map(tile))
    gt_grid = build_centroid_targets(tile).values > 0.5
    centroid_cm = centroid_confusion(scores >= config.detection_threshold, gt_grid,
                                     distance_threshold, scores)

    instance_cm = ConfusionMatrix()
    patches = extract_instance_patches(tile)
    if patches:
        soft = predictor.instance_masks(np.stack([p.image for p in patches]))
        for patch, mask in zip(patches, soft):
            instance_cm = instance_cm + confusion(mask >= config.mask_threshold, patch.mask > 0.5)

    pred = np.asarray(predictor.foreground(tile), dtype=bool)
    gt = rasterize_instances(tile)
    inter, union = iou_counts(pred, gt)
    return TileEvaluation(tile_id=tile.tile_id, centroid=centroid_cm, instance=instance_cm,
                          overall=confusion(pred, gt), intersection=inter, union=union)


def evaluate_tiles(tiles: Sequence[ImageTile], predictor: Predictor,
                   config: Optional[InferenceConfig] = None, workers: int = 1,
                   distance_threshold: int = 0, config_echo: Optional[Dict[str, Any]] = None) -> EvalReport:
    """
    对一组瓦片做三阶段评估

    每个瓦片独立计算，按输入顺序累加计数后再求准确率和 IoU。
    实例阶段在真值质心切片上评估，与质心误差无关。
    """
    if not tiles:
        raise EmptyDataset("没有可评估的瓦片")
    config = config or InferenceConfig()
    results = parallel_map(lambda tile: evaluate_tile(tile, predictor, config, distance_threshold),
                           list(tiles), workers)
    totals = {stage: ConfusionMatrix() for stage in STAGES}
    inter = union = 0
    for result in results:
        for stage in STAGES:
            totals[stage] = totals[stage] + getattr(result, stage)
        inter += result.intersection
        union += result.union
    report = EvalReport(**totals, iou=inter / union if union else 1.0, tiles=results,
                        config=config_echo or {'inference': config.model_dump(mode='json'),
                                               'distance_threshold': distance_threshold})
    logger.info(f"评估完成: {len(results)} 个瓦片, 总体准确率 {report.overall.accuracy:.4f}, IoU {report.iou:.4f}")
    return report


def evaluate_pipeline(dataset: DatasetManager, centroid_ckpt: Optional[Path], instance_ckpt: Optional[Path],
                      config: Optional[InferenceConfig] = None, workers: int = 1,
                      config_echo: Optional[Dict[str, Any]] = None) -> EvalReport:
    """在测试划分上评估训练好的检查点"""
    if centroid_ckpt is None or instance_ckpt is None:
        raise ConfigError("评估需要同时提供质心网络和实例网络检查点")
    centroid_net, _ = load_checkpoint(centroid_ckpt)
    instance_net, _ = load_checkpoint(instance_ckpt)
    predictor = NetworkPredictor(centroid_net, instance_net, config)
    return evaluate_tiles(dataset.load_tiles('test'), predictor, predictor.config, workers,
                          config_echo=config_echo)


# ---------------------------------------------------------------------------
# 解码器对比
# ---------------------------------------------------------------------------

@dataclass
class DecoderComparison:
    """固定解码器与转置卷积解码器的损失曲线"""

    logs: Dict[str, LossLog]
    parameter_counts: Dict[str, int]

    def test_loss_frame(self) -> pd.DataFrame:
        """按轮次对齐的测试损失，每个运行一列"""
        frame = None
        for label, log in self.logs.items():
            column = log.to_frame()[['epoch', 'test_loss']].rename(columns={'test_loss': label})
            frame = column if frame is None else frame.merge(column, on='epoch', how='outer')
        return frame.sort_values('epoch').reset_index(drop=True)

    def final_test_losses(self) -> Dict[str, float]:
        return {label: log.entries[-1].test_loss for label, log in self.logs.items()}


def compare_decoders(dataset: TrainingSet, budgets: Sequence[int] = (200_000, 300_000),
                     config: Optional[TrainConfig] = None, net_config: Optional[NetConfig] = None,
                     out_dir: Optional[Path] = None, progress: bool = False) -> DecoderComparison:
    """
    在相同主干、损失、种子和数据顺序下训练固定解码器和每个预算的转置卷积解码器
    """
    config = config or TrainConfig.instance_defaults()
    runs: List[Tuple[str, str, Optional[int]]] = [('vec2instance', 'vec2instance', None)]
    runs += [(f'transpose_conv_{budget}', 'transpose_conv', budget) for budget in budgets]
    logs: Dict[str, LossLog] = {}
    counts: Dict[str, int] = {}
    for label, kind, budget in runs:
        logger.info(f"对比实验: 训练 {label}")
        run_dir = Path(out_dir) / label if out_dir is not None else None
        trained, log = train_instance(dataset, config, kind, budget, net_config, run_dir, progress)
        if run_dir is not None:
            log.to_csv(run_dir / 'loss_log.csv')
        logs[label] = log
        counts[label] = sum(p.numel() for p in trained.model.parameters() if p.requires_grad)
    return DecoderComparison(logs=logs, parameter_counts=counts)
