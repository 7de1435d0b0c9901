#!/usr/bin/env python3
"""
训练管理器
损失函数、损失日志、两个网络的小批量 Adam 训练循环、检查点、
解码器直接拟合以及有限差分梯度检查
"""

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from tqdm import tqdm

from config_manager import NetConfig, TrainConfig
from dataset_manager import TrainingSet
from exceptions import (
    ConfigError, EmptyDataset, InvalidTarget, InvalidWeights, ShapeMismatch, TrainingError,
)
from model_manager import (
    MASK_DECODER, DecoderConfig, build_centroid_net, build_decoder, build_instance_net,
    coordinate_grid, model_metadata, save_checkpoint,
)

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ['epoch', 'train_loss', 'test_loss', 'seconds']


# ---------------------------------------------------------------------------
# 损失函数
# ---------------------------------------------------------------------------

def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"预测形状 {tuple(pred.shape)} 与目标形状 {tuple(target.shape)} 不一致")


def _pixel_weights(target: torch.Tensor, w_pos: float, w_neg: float) -> torch.Tensor:
    if not torch.all((target == 0) | (target == 1)):
        raise InvalidTarget("加权 RMSE 的目标必须是 0/1")
    return torch.where(target == 1, torch.full_like(target, w_pos), torch.full_like(target, w_neg))


def squared_error_sums(pred: torch.Tensor, target: torch.Tensor,
                       weights: Optional[Tuple[float, float]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """返回 (Σ w·(p−t)², Σ w)，用于跨批次精确累计 RMSE"""
    _check_shapes(pred, target)
    squared = (pred - target) ** 2
    if weights is None:
        return squared.sum(), torch.tensor(float(squared.numel()), dtype=squared.dtype)
    w = _pixel_weights(target, *weights)
    return (w * squared).sum(), w.sum()


def rmse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """sqrt(mean((pred − target)²))"""
    _check_shapes(pred, target)
    return torch.sqrt(torch.mean((pred - target) ** 2))


def weighted_rmse(pred: torch.Tensor, target: torch.Tensor,
                  w_pos: float = 0.66, w_neg: float = 0.33) -> torch.Tensor:
    """sqrt(Σ w·(p−t)² / Σ w)，目标为 1 的像素权重 w_pos，其余 w_neg"""
    total, weight = squared_error_sums(pred, target, (w_pos, w_neg))
    if weight.item() == 0:
        raise InvalidWeights("全部像素权重为零")
    return torch.sqrt(total / weight)


# ---------------------------------------------------------------------------
# 损失日志
# ---------------------------------------------------------------------------

@dataclass
class LossEntry:
    epoch: int
    train_loss: float
    test_loss: float
    seconds: float


@dataclass
class LossLog:
    """逐轮训练/测试损失"""

    entries: List[LossEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, epoch: int, train_loss: float, test_loss: float, seconds: float) -> None:
        if self.entries and epoch <= self.entries[-1].epoch:
            raise ValueError(f"轮次必须递增: {epoch}")
        if not (math.isfinite(train_loss) and math.isfinite(test_loss)):
            raise ValueError(f"第 {epoch} 轮损失不是有限值")
        self.entries.append(LossEntry(epoch, float(train_loss), float(test_loss), float(seconds)))

    def losses(self) -> List[Tuple[int, float, float]]:
        """去掉耗时后的损失序列，用于确定性比较"""
        return [(e.epoch, e.train_loss, e.test_loss) for e in self.entries]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(e) for e in self.entries], columns=LOSS_LOG_COLUMNS)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Path) -> 'LossLog':
        try:
            frame = pd.read_csv(path, float_precision='round_trip')
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            logger.error(f"读取损失日志失败: {e}")
            raise ConfigError(f"无法读取损失日志 {path}: {e}") from e
        missing = [c for c in LOSS_LOG_COLUMNS if c not in frame.columns]
        if missing:
            raise ConfigError(f"损失日志 {path} 缺少列: {', '.join(missing)}")
        log = cls()
        for row in frame.itertuples(index=False):
            log.append(int(row.epoch), float(row.train_loss), float(row.test_loss), float(row.seconds))
        return log


# ---------------------------------------------------------------------------
# 训练循环
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    """训练结果：最终模型及检查点位置"""

    model: nn.Module
    metadata: dict
    path: Optional[Path] = None
    best_path: Optional[Path] = None


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """每轮重新洗牌的样本顺序，只取决于 (seed, epoch)"""
    return np.random.default_rng([seed, epoch]).permutation(n)


@torch.no_grad()
def evaluate_loss(model: nn.Module, x: np.ndarray, y: np.ndarray, batch_size: int,
                  weights: Optional[Tuple[float, float]] = None, device: str = 'cpu') -> float:
    """评估模式下整个数据集上的（加权）RMSE"""
    model.eval()
    dtype = next(model.parameters()).dtype
    total, weight = 0.0, 0.0
    for start in range(0, len(x), batch_size):
        xb = torch.from_numpy(x[start:start + batch_size]).to(device=device, dtype=dtype)
        yb = torch.from_numpy(y[start:start + batch_size]).to(device=device, dtype=dtype)
        s, w = squared_error_sums(model(xb), yb, weights)
        total += s.item()
        weight += w.item()
    if weight == 0:
        raise InvalidWeights("全部像素权重为零")
    return math.sqrt(total / weight)


def fit_model(model: nn.Module, dataset: TrainingSet, config: TrainConfig,
              weights: Optional[Tuple[float, float]] = None, out_dir: Optional[Path] = None,
              progress: bool = False, **metadata) -> Tuple[TrainedModel, LossLog]:
    """
    小批量 Adam 训练，每轮记录训练/测试损失

    每 checkpoint_every 轮以及最后一轮写 last.h5，测试损失创新低时写 best_test.h5。
    出现非有限损失时中止，已写出的检查点保留。单线程下给定种子结果确定。
    """
    if len(dataset.train_x) == 0:
        raise EmptyDataset("训练集为空")
    if len(dataset.test_x) == 0:
        raise EmptyDataset("测试集为空")

    torch.set_num_threads(config.threads)
    device = config.device
    model.to(device)
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
    train_x = torch.from_numpy(dataset.train_x)
    train_y = torch.from_numpy(dataset.train_y)
    n = len(train_x)

    log = LossLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    last_path: Optional[Path] = None
    best_path: Optional[Path] = None
    best = math.inf

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in tqdm(range(1, config.epochs + 1), desc='训练', disable=not progress):
            start = time.perf_counter()
            model.train()
            order = torch.from_numpy(epoch_permutation(config.seed, epoch, n))
            batch_losses = []
            for batch, offset in enumerate(range(0, n, config.batch_size)):
                index = order[offset:offset + config.batch_size]
                xb = train_x[index].to(device=device, dtype=dtype)
                yb = train_y[index].to(device=device, dtype=dtype)
                optimizer.zero_grad()
                pred = model(xb)
                loss = weighted_rmse(pred, yb, *weights) if weights else rmse(pred, yb)
                if not torch.isfinite(loss):
                    message = (f"第 {epoch} 轮第 {batch} 批出现非有限损失，"
                               f"上一轮损失 {log.entries[-1].train_loss if log.entries else None}，"
                               f"最近检查点 {last_path}")
                    logger.error(message)
                    if out_dir is not None:
                        log.to_csv(out_dir / 'loss_log.csv')
                    raise TrainingError(message)
                loss.backward()
                optimizer.step()
                batch_losses.append(loss.item())

            train_loss = float(np.mean(batch_losses))
            test_loss = evaluate_loss(model, dataset.test_x, dataset.test_y, config.batch_size, weights, device)
            if not math.isfinite(test_loss):
                raise TrainingError(f"第 {epoch} 轮测试损失不是有限值，最近检查点 {last_path}")
            log.append(epoch, train_loss, test_loss, time.perf_counter() - start)
            logger.info(f"第 {epoch}/{config.epochs} 轮: 训练损失 {train_loss:.5f}, 测试损失 {test_loss:.5f}")

            if out_dir is not None:
                if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                    last_path = save_checkpoint(out_dir / 'last.h5', model, epoch=epoch,
                                                loss_log='loss_log.csv', **metadata)
                    log.to_csv(out_dir / 'loss_log.csv')
                if test_loss < best:
                    best_path = save_checkpoint(out_dir / 'best_test.h5', model, epoch=epoch,
                                                loss_log='loss_log.csv', selection='best_test', **metadata)
            best = min(best, test_loss)

    model.eval()
    result = TrainedModel(model=model, metadata=model_metadata(model, epoch=config.epochs, **metadata),
                          path=last_path, best_path=best_path)
    return result, log


def train_centroid(dataset: TrainingSet, config: Optional[TrainConfig] = None,
                   net_config: Optional[NetConfig] = None, out_dir: Optional[Path] = None,
                   progress: bool = False) -> Tuple[TrainedModel, LossLog]:
    """训练质心估计网络，损失为加权 RMSE"""
    config = config or TrainConfig.centroid_defaults()
    net_config = (net_config or NetConfig()).model_copy(update={'seed': config.seed})
    model = build_centroid_net(net_config)
    logger.info(f"开始训练质心网络: {len(dataset.train_x)} 个训练瓦片, {len(dataset.test_x)} 个测试瓦片")
    return fit_model(model, dataset, config, weights=(config.w_pos, config.w_neg),
                     out_dir=out_dir, progress=progress)


def train_instance(dataset: TrainingSet, config: Optional[TrainConfig] = None,
                   decoder_kind: str = 'vec2instance', budget: Optional[int] = None,
                   net_config: Optional[NetConfig] = None, out_dir: Optional[Path] = None,
                   progress: bool = False) -> Tuple[TrainedModel, LossLog]:
    """训练实例网络（端到端，梯度经解码器回传到主干），损失为 RMSE"""
    config = config or TrainConfig.instance_defaults()
    net_config = (net_config or NetConfig()).model_copy(update={'seed': config.seed})
    model = build_instance_net(net_config, decoder_kind, budget)
    logger.info(f"开始训练实例网络（{decoder_kind}）: {len(dataset.train_x)} 个训练切片, "
                f"{len(dataset.test_x)} 个测试切片")
    return fit_model(model, dataset, config, weights=None, out_dir=out_dir, progress=progress)


# ---------------------------------------------------------------------------
# 解码器直接拟合与梯度检查
# ---------------------------------------------------------------------------

def init_decoder_params(config: DecoderConfig = MASK_DECODER, seed: int = 0) -> torch.Tensor:
    """随机初始化参数向量：隐层超平面铺满 [-1,1]²，输出层小权重"""
    g = torch.Generator().manual_seed(seed)
    d, h, o = config.input_dim, config.hidden_units, config.output_dim
    w1 = torch.randn(d * h, generator=g) * 3.0
    b1 = (torch.rand(h, generator=g) * 2.0 - 1.0) * 3.0
    w2 = torch.randn(h * o, generator=g) / math.sqrt(h)
    b2 = torch.zeros(o)
    return torch.cat([w1, b1, w2, b2])


def fit_decoder_params(target: np.ndarray, config: DecoderConfig = MASK_DECODER, steps: int = 5000,
                       lr: float = 1e-2, seed: int = 0) -> Tuple[torch.Tensor, List[float]]:
    """
    直接用梯度下降拟合一个参数向量，使解码结果逼近目标

    Args:
        target: S×S（掩膜）或 S×S×o（如 RGB）数组，值在 [0,1]

    Returns:
        (参数向量, 每步 RMSE)
    """
    target_t = torch.as_tensor(np.asarray(target, dtype=np.float32))
    size = target_t.shape[0]
    target_t = target_t.reshape(1, size * size, config.output_dim)
    coords = coordinate_grid(size).reshape(-1, 2)
    decoder = build_decoder(config)
    params = init_decoder_params(config, seed).unsqueeze(0).requires_grad_(True)
    optimizer = torch.optim.Adam([params], lr=lr)
    history = []
    for _ in range(steps):
        optimizer.zero_grad()
        loss = rmse(decoder(params, coords), target_t)
        loss.backward()
        optimizer.step()
        history.append(loss.item())
    return params.detach()[0], history


@dataclass
class GradientCheck:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return abs(self.analytic - self.numeric) / scale if scale > 0 else 0.0

    def passed(self, rtol: float = 1e-2, atol: float = 1e-6) -> bool:
        return abs(self.analytic - self.numeric) <= rtol * max(abs(self.analytic), abs(self.numeric)) + atol


def gradient_check(model: nn.Module, x: torch.Tensor, y: torch.Tensor, n_params: int = 20,
                   step: float = 1e-5, seed: int = 0,
                   loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = rmse,
                   reference_dtype: Optional[torch.dtype] = None) -> List[GradientCheck]:
    """
    随机抽取 n_params 个标量参数，比较自动微分梯度与中心差分

    给定 reference_dtype 时，自动微分梯度仍在原模型上计算，中心差分改在
    同一组权重转换到该精度的副本上计算。float32 模型配合 float64 副本时，
    差分不会被 float32 的舍入吞掉。
    """
    model.eval()
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(seed).choice(int(offsets[-1]), size=n_params, replace=False)

    model.zero_grad()
    loss_fn(model(x), y).backward()

    reference, ref_x, ref_y = model, x, y
    if reference_dtype is not None:
        reference = copy.deepcopy(model).to(reference_dtype).eval()
        ref_x, ref_y = x.to(reference_dtype), y.to(reference_dtype)
    ref_params = dict(reference.named_parameters())

    checks = []
    for flat in sorted(int(k) for k in picks):
        which = int(np.searchsorted(offsets, flat, side='right') - 1)
        name, param = named[which]
        local = flat - int(offsets[which])
        values = ref_params[name].data.view(-1)
        original = values[local].item()
        with torch.no_grad():
            values[local] = original + step
            plus = loss_fn(reference(ref_x), ref_y).item()
            values[local] = original - step
            minus = loss_fn(reference(ref_x), ref_y).item()
            values[local] = original
        checks.append(GradientCheck(name, local, param.grad.view(-1)[local].item(), (plus - minus) / (2 * step)))
    return checks
