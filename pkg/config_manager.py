#!/usr/bin/env python3
"""
配置管理器
集中定义数据过滤、合成数据、网络、训练、推理和运行配置
优先级：默认值 < 环境变量(V2I_*) < JSON 配置文件 < 命令行参数
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from exceptions import ConfigError

logger = logging.getLogger(__name__)

# 合成数据支持的建筑形状
SHAPE_KINDS = ('rectangle', 'l_shape', 'rotated_rectangle')


class FilterConfig(BaseModel):
    """数据过滤规则"""

    min_buildings: int = Field(3, ge=0)
    max_instance_size: int = Field(64, ge=1)
    drop_oversized: bool = True


class SynthConfig(BaseModel):
    """合成瓦片参数"""

    tile_size: int = Field(256, ge=64)
    min_instances: int = Field(5, ge=0)
    max_instances: int = Field(10, ge=0)
    min_size: int = Field(10, ge=3)
    max_size: int = Field(40, ge=3, le=64)
    shapes: Tuple[str, ...] = SHAPE_KINDS
    noise_std: float = Field(0.04, ge=0.0)
    margin: int = Field(2, ge=0)
    placement_retries: int = Field(200, ge=1)

    @field_validator('shapes')
    @classmethod
    def _check_shapes(cls, value):
        unknown = [s for s in value if s not in SHAPE_KINDS]
        if unknown or not value:
            raise ValueError(f"未知形状: {unknown}")
        return tuple(value)

    @model_validator(mode='after')
    def _check_ranges(self):
        if self.min_instances > self.max_instances:
            raise ValueError("min_instances 不能大于 max_instances")
        if self.min_size > self.max_size:
            raise ValueError("min_size 不能大于 max_size")
        return self


class NetConfig(BaseModel):
    """网络构建参数"""

    reconciled_widths: bool = True
    dropout: float = Field(0.25, ge=0.0, lt=1.0)
    seed: int = 0


class TrainConfig(BaseModel):
    """训练参数"""

    epochs: int = Field(100, ge=1)
    batch_size: int = Field(50, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    w_pos: float = Field(0.66, ge=0.0)
    w_neg: float = Field(0.33, ge=0.0)
    seed: int = 0
    checkpoint_every: int = Field(10, ge=1)
    device: str = 'cpu'
    threads: int = Field(1, ge=1)

    @classmethod
    def centroid_defaults(cls, **kwargs) -> 'TrainConfig':
        return cls(**{'epochs': 100, 'batch_size': 50, **kwargs})

    @classmethod
    def instance_defaults(cls, **kwargs) -> 'TrainConfig':
        return cls(**{'epochs': 1000, 'batch_size': 500, **kwargs})


class InferenceConfig(BaseModel):
    """推理阈值"""

    detection_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    mask_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    nms_iou: float = Field(0.5, gt=0.0, lt=1.0)
    batch_size: int = Field(64, ge=1)


class RunConfig(BaseSettings):
    """一次命令行运行的完整配置，写入每个产物旁边用于溯源"""

    model_config = SettingsConfigDict(env_prefix='V2I_', extra='forbid')

    data_dir: Path = Path('data')
    out_dir: Path = Path('runs')
    seed: int = 0
    workers: int = Field(1, ge=1)
    centroid_checkpoint: Optional[Path] = None
    instance_checkpoint: Optional[Path] = None
    filter: FilterConfig = Field(default_factory=FilterConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    centroid_train: TrainConfig = Field(default_factory=TrainConfig.centroid_defaults)
    instance_train: TrainConfig = Field(default_factory=TrainConfig.instance_defaults)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    ablation_budgets: List[int] = Field(default_factory=lambda: [200_000, 300_000])

    @classmethod
    def load(cls, config_path: Optional[Path] = None,
             overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        合并配置文件和命令行覆盖项

        Args:
            config_path: JSON 配置文件路径（可选）
            overrides: 嵌套字典形式的覆盖项，值为 None 的项被忽略

        Returns:
            RunConfig
        """
        values: Dict[str, Any] = {}
        if config_path is not None:
            try:
                values = json.loads(Path(config_path).read_text(encoding='utf-8'))
            except (OSError, json.JSONDecodeError) as e:
                logger.error(f"读取配置文件失败: {e}")
                raise ConfigError(f"无法读取配置文件 {config_path}: {e}") from e
            if not isinstance(values, dict):
                raise ConfigError(f"配置文件顶层必须是 JSON 对象: {config_path}")
        _deep_update(values, overrides or {})
        try:
            config = cls(**values)
        except ValidationError as e:
            raise ConfigError(f"配置无效: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e
        return config.with_seed(config.seed)

    def with_seed(self, seed: int) -> 'RunConfig':
        """运行种子统一下发到网络和训练配置"""
        return self.model_copy(update={
            'seed': seed,
            'net': self.net.model_copy(update={'seed': seed}),
            'centroid_train': self.centroid_train.model_copy(update={'seed': seed}),
            'instance_train': self.instance_train.model_copy(update={'seed': seed}),
        })

    def echo(self) -> Dict[str, Any]:
        return json.loads(json.dumps(self.model_dump(mode='json'), sort_keys=True))


def _deep_update(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in updates.items():
        if value is None:
            continue
        if isinstance(value, dict):
            nested = base.setdefault(key, {})
            if not isinstance(nested, dict):
                raise ConfigError(f"配置项 {key} 必须是 JSON 对象")
            _deep_update(nested, value)
        else:
            base[key] = value
    return base
