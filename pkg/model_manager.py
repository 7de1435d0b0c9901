#!/usr/bin/env python3
"""
模型管理器
构建质心估计 CNN、实例分割 CNN（超网络）、固定坐标 MLP 解码器、转置卷积对照解码器，
以及检查点的保存和读取
"""

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import h5py
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config_manager import NetConfig
from exceptions import ConfigError, ShapeMismatch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# 3×3 卷积宽度（四组，每组两层）和 1×1 卷积宽度
RECONCILED_WIDTHS = (32, 32, 32, 32, 64, 64, 64, 64)
LISTED_CENTROID_WIDTHS = (32, 32, 32, 32, 32, 32, 32, 32)
CENTROID_HEAD = (64, 64, 1)
LISTED_CENTROID_HEAD = (32, 32, 1)
INSTANCE_HEAD = (64, 64, 257)

DECODER_KINDS = ('vec2instance', 'transpose_conv')
# 转置卷积解码器预算的允许误差
BUDGET_TOLERANCE = 0.05


@dataclass(frozen=True)
class LayerSpec:
    """一层的描述：conv / pool / dropout"""

    kind: str
    filters: int = 0
    kernel: int = 3
    dilation: int = 1
    activation: str = 'relu'
    rate: float = 0.0


def trunk_layer_specs(widths: Sequence[int], head_widths: Sequence[int], dropout: float,
                      final_activation: str) -> List[LayerSpec]:
    """
    四组 3×3 卷积（第一组不膨胀，其余 2×2 膨胀），组内两层之间为 dropout，
    前三组后接 2×2 最大池化；最后是三层 1×1 卷积
    """
    specs: List[LayerSpec] = []
    for stage in range(4):
        dilation = 1 if stage == 0 else 2
        specs.append(LayerSpec('conv', widths[2 * stage], 3, dilation))
        specs.append(LayerSpec('dropout', rate=dropout))
        specs.append(LayerSpec('conv', widths[2 * stage + 1], 3, dilation))
        if stage < 3:
            specs.append(LayerSpec('pool'))
    for index, width in enumerate(head_widths):
        activation = final_activation if index == len(head_widths) - 1 else 'relu'
        specs.append(LayerSpec('conv', width, 1, 1, activation))
    return specs


_ACTIVATIONS = {'relu': nn.ReLU, 'linear': nn.Identity, 'sigmoid': nn.Sigmoid}


def build_sequential(specs: Sequence[LayerSpec], in_channels: int = 3) -> nn.Sequential:
    """按层描述构建网络，卷积一律 same 填充"""
    layers: List[nn.Module] = []
    channels = in_channels
    for spec in specs:
        if spec.kind == 'conv':
            padding = spec.dilation * (spec.kernel // 2)
            layers.append(nn.Conv2d(channels, spec.filters, spec.kernel,
                                    padding=padding, dilation=spec.dilation))
            layers.append(_ACTIVATIONS[spec.activation]())
            channels = spec.filters
        elif spec.kind == 'pool':
            layers.append(nn.MaxPool2d(2))
        elif spec.kind == 'dropout':
            layers.append(nn.Dropout(spec.rate))
        else:
            raise ConfigError(f"未知层类型: {spec.kind}")
    return nn.Sequential(*layers)


def count_parameters(net: nn.Module) -> int:
    """可训练参数个数"""
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def _seeded(seed: int, factory):
    """在独立随机状态中构建网络，不影响全局随机数"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


# ---------------------------------------------------------------------------
# 质心估计 CNN
# ---------------------------------------------------------------------------

class CentroidNet(nn.Module):
    """256×256×3 → 32×32×1，输出层 ReLU"""

    def __init__(self, config: NetConfig):
        super().__init__()
        widths = RECONCILED_WIDTHS if config.reconciled_widths else LISTED_CENTROID_WIDTHS
        head = CENTROID_HEAD if config.reconciled_widths else LISTED_CENTROID_HEAD
        self.config = config
        self.layers = build_sequential(trunk_layer_specs(widths, head, config.dropout, 'relu'))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def build_centroid_net(config: Optional[NetConfig] = None) -> CentroidNet:
    config = config or NetConfig()
    net = _seeded(config.seed, lambda: CentroidNet(config))
    logger.debug(f"质心网络构建完成，参数量 {count_parameters(net)}")
    return net


# ---------------------------------------------------------------------------
# 坐标 MLP 解码器
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    """单隐层坐标 MLP 的形状"""

    input_dim: int = 2
    hidden_units: int = 64
    output_dim: int = 1
    hidden_activation: str = 'relu'
    output_activation: str = 'sigmoid'

    def __post_init__(self):
        if min(self.input_dim, self.hidden_units, self.output_dim) < 1:
            raise ConfigError(f"解码器维度必须为正: {self}")

    @property
    def parameter_count(self) -> int:
        d, h, o = self.input_dim, self.hidden_units, self.output_dim
        return d * h + h + h * o + o


MASK_DECODER = DecoderConfig()
# 人脸 RGB 场：6h + 3 = 2307
FACE_DECODER = DecoderConfig(input_dim=2, hidden_units=384, output_dim=3)


@lru_cache(maxsize=8)
def coordinate_grid(size: int = 64) -> torch.Tensor:
    """
    S×S×2 归一化坐标，[..., 0] 为 x（沿列），[..., 1] 为 y（沿行），两端取到 ±1

    结果被缓存，调用方不得原地修改。
    """
    axis = torch.linspace(-1.0, 1.0, size)
    ys, xs = torch.meshgrid(axis, axis, indexing='ij')
    return torch.stack([xs, ys], dim=-1)


def split_params(params: torch.Tensor, config: DecoderConfig = MASK_DECODER):
    """
    参数向量按 W1(d×h 行优先)、b1、W2(h×o 行优先)、b2 的顺序切分

    Args:
        params: (B, P) 参数向量
    """
    d, h, o = config.input_dim, config.hidden_units, config.output_dim
    if params.shape[-1] != config.parameter_count:
        raise ShapeMismatch(f"参数向量长度应为 {config.parameter_count}，实际为 {params.shape[-1]}")
    batch = params.shape[0]
    w1, b1, w2, b2 = torch.split(params, [d * h, h, h * o, o], dim=-1)
    return w1.reshape(batch, d, h), b1, w2.reshape(batch, h, o), b2


class CoordinateDecoder(nn.Module):
    """固定解码器：没有可训练参数，权重和偏置全部由输入的参数向量给出"""

    def __init__(self, config: DecoderConfig = MASK_DECODER):
        super().__init__()
        self.config = config
        self.hidden = _ACTIVATIONS[config.hidden_activation]()
        self.output = _ACTIVATIONS[config.output_activation]()

    @property
    def parameter_count(self) -> int:
        return self.config.parameter_count

    def forward(self, params: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """
        Args:
            params: (B, P) 参数向量
            coords: (N, d) 坐标

        Returns:
            (B, N, o)
        """
        if coords.shape[-1] != self.config.input_dim:
            raise ShapeMismatch(f"坐标维度应为 {self.config.input_dim}，实际为 {coords.shape[-1]}")
        w1, b1, w2, b2 = split_params(params, self.config)
        coords = coords.to(params.dtype)
        hidden = self.hidden(torch.matmul(coords.unsqueeze(0), w1) + b1.unsqueeze(1))
        return self.output(torch.matmul(hidden, w2) + b2.unsqueeze(1))


def build_decoder(config: DecoderConfig = MASK_DECODER) -> CoordinateDecoder:
    return CoordinateDecoder(config)


def decode_mask(params: torch.Tensor, grid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    out(x, y) = σ(relu([x y]·W1 + b1)·W2 + b2)

    Args:
        params: (257,) 或 (B, 257)
        grid: S×S×2 坐标网格，默认 64×64

    Returns:
        (S, S) 或 (B, 1, S, S)
    """
    grid = coordinate_grid(64) if grid is None else grid
    single = params.dim() == 1
    batch = params.unsqueeze(0) if single else params
    size = grid.shape[0]
    out = build_decoder(MASK_DECODER)(batch, grid.reshape(-1, 2))
    masks = out.reshape(batch.shape[0], 1, size, size)
    return masks[0, 0] if single else masks


class FixedMaskDecoder(nn.Module):
    """(B, 257) → (B, 1, 64, 64)，网格作为非持久缓冲区"""

    def __init__(self, size: int = 64):
        super().__init__()
        self.decoder = CoordinateDecoder(MASK_DECODER)
        self.register_buffer('grid', coordinate_grid(size).clone(), persistent=False)

    def forward(self, params: torch.Tensor) -> torch.Tensor:
        size = self.grid.shape[0]
        out = self.decoder(params, self.grid.reshape(-1, 2))
        return out.reshape(params.shape[0], 1, size, size)


# ---------------------------------------------------------------------------
# 转置卷积对照解码器
# ---------------------------------------------------------------------------

def ablation_parameter_count(width: int, vector_length: int = 257) -> int:
    """Linear(P→8·8·c) + 2×ConvT(c→c, 4×4) + ConvT(c→1, 4×4) 的参数量"""
    c = width
    return (vector_length + 1) * 64 * c + 2 * (16 * c * c + c) + 16 * c + 1


def layer_parameter_count(specs: Sequence[LayerSpec], in_channels: int = 3) -> int:
    """按层描述计算卷积层参数量（权重 + 偏置）"""
    total, channels = 0, in_channels
    for spec in specs:
        if spec.kind == 'conv':
            total += (spec.kernel * spec.kernel * channels + 1) * spec.filters
            channels = spec.filters
    return total


@lru_cache(maxsize=1)
def instance_trunk_parameter_count() -> int:
    """实例网络卷积主干的参数量（182,945）"""
    return layer_parameter_count(trunk_layer_specs(RECONCILED_WIDTHS, INSTANCE_HEAD, 0.0, 'linear'))


def ablation_total_parameter_count(width: int) -> int:
    """主干 + 转置卷积解码器，即整个对照网络的可训练参数量"""
    return instance_trunk_parameter_count() + ablation_parameter_count(width)


class TransposeConvDecoder(nn.Module):
    """参数向量 → 8×8×c → 16 → 32 → 64，可训练上采样解码器"""

    def __init__(self, width: int, vector_length: int = 257):
        super().__init__()
        self.width = width
        self.fc = nn.Linear(vector_length, 8 * 8 * width)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(width, 1, 4, stride=2, padding=1), nn.Sigmoid(),
        )

    def forward(self, params: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc(params)).reshape(params.shape[0], self.width, 8, 8)
        return self.up(x)


def ablation_width_for_budget(budget: int) -> int:
    """
    选择整网参数量（主干 + 解码器）最接近预算的宽度，误差超过 5% 时报错

    预算按整网计，与固定解码器网络（182,945，解码器无参数）在同一尺度上比较。
    """
    best = min(range(1, 1025), key=lambda c: abs(ablation_total_parameter_count(c) - budget))
    count = ablation_total_parameter_count(best)
    if abs(count - budget) > BUDGET_TOLERANCE * budget:
        raise ConfigError(f"参数预算 {budget} 无法在 ±5% 内满足（最接近 {count}）")
    return best


def build_ablation_decoder(budget: int, seed: Optional[int] = None) -> TransposeConvDecoder:
    """按整网预算构建转置卷积解码器；seed 为 None 时使用当前随机状态"""
    width = ablation_width_for_budget(budget)
    if seed is None:
        decoder = TransposeConvDecoder(width)
    else:
        decoder = _seeded(seed, lambda: TransposeConvDecoder(width))
    logger.info(f"转置卷积解码器: 预算 {budget}, 宽度 {width}, "
                f"整网参数量 {ablation_total_parameter_count(width)}")
    return decoder


# ---------------------------------------------------------------------------
# 实例分割 CNN
# ---------------------------------------------------------------------------

class Vec2InstanceNet(nn.Module):
    """
    卷积主干输出 8×8×257 参数图，取中心 (4, 4) 处的 257 维向量交给解码器

    解码器可以是固定坐标 MLP（无可训练参数）或转置卷积对照解码器。
    """

    def __init__(self, config: NetConfig, decoder: nn.Module, decoder_kind: str = 'vec2instance'):
        super().__init__()
        self.config = config
        self.decoder_kind = decoder_kind
        self.trunk = build_sequential(trunk_layer_specs(RECONCILED_WIDTHS, INSTANCE_HEAD,
                                                        config.dropout, 'linear'))
        self.decoder = decoder

    def parameter_vectors(self, x: torch.Tensor) -> torch.Tensor:
        feature_map = self.trunk(x)
        cy, cx = feature_map.shape[2] // 2, feature_map.shape[3] // 2
        return feature_map[:, :, cy, cx]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.parameter_vectors(x))


def build_instance_net(config: Optional[NetConfig] = None, decoder_kind: str = 'vec2instance',
                       budget: Optional[int] = None) -> Vec2InstanceNet:
    """
    构建端到端实例网络 64×64×3 → 64×64×1

    decoder_kind='transpose_conv' 时需要给出整网参数预算（主干 + 解码器）。
    """
    config = config or NetConfig()
    if decoder_kind not in DECODER_KINDS:
        raise ConfigError(f"未知解码器类型: {decoder_kind}")
    if decoder_kind == 'transpose_conv' and budget is None:
        raise ConfigError("转置卷积解码器需要参数预算")

    def _factory():
        # 先初始化主干，保证不同解码器下主干初值一致
        net = Vec2InstanceNet(config, nn.Identity(), decoder_kind)
        net.decoder = FixedMaskDecoder() if decoder_kind == 'vec2instance' else build_ablation_decoder(budget)
        return net

    net = _seeded(config.seed, _factory)
    logger.debug(f"实例网络构建完成（{decoder_kind}），参数量 {count_parameters(net)}")
    return net


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

def model_metadata(model: nn.Module, **extra: Any) -> Dict[str, Any]:
    """生成检查点元数据：架构标识、宽度方案、种子等"""
    config: NetConfig = model.config
    metadata: Dict[str, Any] = {
        'version': CHECKPOINT_VERSION,
        'reconciled_widths': config.reconciled_widths,
        'dropout': config.dropout,
        'seed': config.seed,
    }
    if isinstance(model, CentroidNet):
        metadata['architecture'] = 'centroid_net'
    else:
        metadata['architecture'] = model.decoder_kind
        if isinstance(model.decoder, TransposeConvDecoder):
            metadata['budget'] = ablation_total_parameter_count(model.decoder.width)
            metadata['decoder_width'] = model.decoder.width
    metadata.update(extra)
    return metadata


def save_checkpoint(path: Path, model: nn.Module, **extra: Any) -> Path:
    """
    保存检查点：parameters 组下每个张量一个数据集，metadata 属性为 JSON 字符串

    Args:
        path: .h5 文件路径
        extra: 额外元数据（epoch、loss_log 等）
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = model_metadata(model, **extra)
    try:
        with h5py.File(path, 'w') as f:
            f.attrs['metadata'] = json.dumps(metadata, sort_keys=True)
            group = f.create_group('parameters')
            for name, tensor in model.state_dict().items():
                group.create_dataset(name, data=tensor.detach().cpu().numpy())
    except Exception as e:
        logger.error(f"保存检查点失败: {e}")
        raise
    return path


def build_from_metadata(metadata: Dict[str, Any]) -> nn.Module:
    config = NetConfig(reconciled_widths=metadata.get('reconciled_widths', True),
                       dropout=metadata.get('dropout', 0.25), seed=metadata.get('seed', 0))
    architecture = metadata.get('architecture')
    if architecture == 'centroid_net':
        return build_centroid_net(config)
    if architecture == 'vec2instance':
        return build_instance_net(config)
    if architecture == 'transpose_conv':
        return build_instance_net(config, 'transpose_conv', budget=metadata['budget'])
    raise ConfigError(f"未知架构: {architecture}")


def load_checkpoint(path: Path) -> Tuple[nn.Module, Dict[str, Any]]:
    """读取检查点并重建网络（评估模式）"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"检查点不存在: {path}")
    try:
        with h5py.File(path, 'r') as f:
            metadata = json.loads(f.attrs['metadata'])
            state = {name: torch.from_numpy(np.array(ds)) for name, ds in f['parameters'].items()}
    except (OSError, KeyError, json.JSONDecodeError) as e:
        logger.error(f"读取检查点失败: {e}")
        raise ConfigError(f"无法读取检查点 {path}: {e}") from e
    if metadata.get('version') != CHECKPOINT_VERSION:
        raise ConfigError(f"检查点版本不受支持: {metadata.get('version')}")
    model = build_from_metadata(metadata)
    model.load_state_dict(state)
    model.eval()
    return model, metadata
