#!/usr/bin/env python3
"""
数据集管理器
负责数据集清单、瓦片过滤、训练/测试划分、合成数据生成以及训练数组的组装
"""

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config_manager import FilterConfig, SynthConfig
from data_manager import (
    SKIP_REASONS, ImageTile, InstancePatch, Polygon, build_centroid_targets, count_skipped_instances,
    extract_instance_patches, load_tile, rasterize_polygon, save_tile,
)
from exceptions import ConfigError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
TRAIN_FRACTION = 2.0 / 3.0


@dataclass
class ManifestEntry:
    """清单中的一个瓦片"""

    tile_id: str
    image: str
    annotation: str
    split: str = 'unassigned'
    # 仅在内存中缓存，不写入清单
    polygons: Optional[List[Polygon]] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict[str, str]:
        return {'tile_id': self.tile_id, 'image': self.image,
                'annotation': self.annotation, 'split': self.split}


@dataclass
class DatasetManifest:
    """瓦片清单 + 划分 + 过滤配置"""

    entries: List[ManifestEntry]
    filter_config: FilterConfig = field(default_factory=FilterConfig)
    root: Path = Path('.')

    def split_entries(self, split: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    def load_annotations(self) -> 'DatasetManifest':
        """读入每个瓦片的多边形（像素坐标）"""
        for entry in self.entries:
            if entry.polygons is None:
                path = self.root / entry.annotation
                try:
                    record = json.loads(path.read_text(encoding='utf-8'))
                except (OSError, json.JSONDecodeError) as e:
                    logger.error(f"读取标注失败: {e}")
                    raise ConfigError(f"无法读取标注 {path}: {e}") from e
                entry.polygons = [Polygon.coerce(inst['polygon']) for inst in record.get('instances', [])]
        return self

    def to_json(self) -> str:
        payload = {
            'version': MANIFEST_VERSION,
            'entries': [entry.to_dict() for entry in self.entries],
            'filter_config': self.filter_config.model_dump(mode='json'),
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding='utf-8')

    @classmethod
    def load(cls, path: Path) -> 'DatasetManifest':
        try:
            payload = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"读取数据集清单失败: {e}")
            raise ConfigError(f"无法读取数据集清单 {path}: {e}") from e
        entries = [ManifestEntry(**entry) for entry in payload['entries']]
        return cls(entries=entries, filter_config=FilterConfig(**payload.get('filter_config', {})),
                   root=Path(path).parent)


def split_manifest(manifest: DatasetManifest, seed: int,
                   train_fraction: float = TRAIN_FRACTION) -> DatasetManifest:
    """按瓦片随机划分训练/测试集，训练集占 2/3"""
    order = np.random.default_rng(seed).permutation(len(manifest.entries))
    n_train = int(round(len(order) * train_fraction))
    train_ids = {manifest.entries[k].tile_id for k in order[:n_train]}
    for entry in manifest.entries:
        entry.split = 'train' if entry.tile_id in train_ids else 'test'
    logger.info(f"数据集划分完成: 训练 {n_train} 个瓦片, 测试 {len(order) - n_train} 个瓦片")
    return manifest


def filter_tiles(manifest: DatasetManifest) -> DatasetManifest:
    """
    过滤瓦片

    去掉实例数少于 min_buildings 的瓦片，以及（drop_oversized 时）含有外接矩形
    超过 max_instance_size 的实例的瓦片。保留瓦片的划分不变。
    """
    manifest.load_annotations()
    config = manifest.filter_config
    kept = []
    for entry in manifest.entries:
        count = len(entry.polygons)
        if count < config.min_buildings:
            logger.info(f"瓦片 {entry.tile_id} 只有 {count} 个建筑，已移除")
            continue
        if config.drop_oversized and any(
                max(poly.extent) > config.max_instance_size for poly in entry.polygons):
            logger.info(f"瓦片 {entry.tile_id} 含有超过 {config.max_instance_size} 像素的建筑，已移除")
            continue
        kept.append(entry)
    logger.info(f"瓦片过滤完成: 保留 {len(kept)}/{len(manifest.entries)}")
    return DatasetManifest(entries=kept, filter_config=config, root=manifest.root)


# ---------------------------------------------------------------------------
# 合成数据
# ---------------------------------------------------------------------------

def _shape_vertices(rng: np.random.Generator, kind: str, config: SynthConfig) -> np.ndarray:
    """生成以外接矩形中心为原点的形状顶点"""
    w = float(rng.integers(config.min_size, config.max_size + 1))
    h = float(rng.integers(config.min_size, config.max_size + 1))
    if kind == 'rectangle':
        pts = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    elif kind == 'l_shape':
        cw = w * rng.uniform(0.35, 0.65)
        ch = h * rng.uniform(0.35, 0.65)
        pts = np.array([[0, 0], [w, 0], [w, ch], [cw, ch], [cw, h], [0, h]], dtype=np.float64)
        quarter = int(rng.integers(4))
        rot = np.array([[0, -1], [1, 0]], dtype=np.float64)
        for _ in range(quarter):
            pts = pts @ rot.T
    else:
        angle = rng.uniform(0.0, math.pi)
        rot = np.array([[math.cos(angle), -math.sin(angle)],
                        [math.sin(angle), math.cos(angle)]])
        pts = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64) @ rot.T
        extent = (pts.max(axis=0) - pts.min(axis=0)).max()
        if extent > config.max_size:
            pts *= config.max_size / extent
    return pts - (pts.max(axis=0) + pts.min(axis=0)) / 2.0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """带低频渐变的地表背景"""
    base = rng.uniform(0.15, 0.45, size=3)
    gradient = rng.uniform(-0.08, 0.08, size=(2, 3))
    ramp = np.linspace(-1.0, 1.0, size)
    image = (base[None, None, :]
             + ramp[None, :, None] * gradient[0][None, None, :]
             + ramp[:, None, None] * gradient[1][None, None, :])
    return image


def _boxes_overlap(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def generate_synthetic_tile(seed: int, config: Optional[SynthConfig] = None,
                            tile_id: Optional[str] = None) -> ImageTile:
    """
    生成一个合成瓦片

    建筑形状取自 config.shapes，互不重叠（外接矩形加 margin 不相交），全部完整
    落在瓦片内。多次尝试仍无法放置时减少实例数并记录在 meta['synthetic'] 中。
    结果只取决于 (seed, config)。
    """
    config = config or SynthConfig()
    rng = np.random.default_rng(seed)
    size = config.tile_size
    requested = int(rng.integers(config.min_instances, config.max_instances + 1))
    image = _background(rng, size)

    polygons: List[Polygon] = []
    boxes: List[Tuple[float, float, float, float]] = []
    for _ in range(requested):
        placed = False
        for _ in range(config.placement_retries):
            kind = config.shapes[int(rng.integers(len(config.shapes)))]
            local = _shape_vertices(rng, kind, config)
            half = (local.max(axis=0) - local.min(axis=0)) / 2.0
            low = config.margin + half
            high = size - config.margin - half
            if np.any(low >= high):
                continue
            center = rng.uniform(low, high)
            pts = local + center
            box = (pts[:, 0].min() - config.margin, pts[:, 1].min() - config.margin,
                   pts[:, 0].max() + config.margin, pts[:, 1].max() + config.margin)
            if any(_boxes_overlap(box, other) for other in boxes):
                continue
            polygons.append(Polygon(tuple(map(tuple, pts))))
            boxes.append(box)
            placed = True
            break
        if not placed:
            logger.info(f"种子 {seed}: 第 {len(polygons) + 1} 个建筑放置失败，实例数减少为 {len(polygons)}")
            break

    for poly in polygons:
        mask = rasterize_polygon(poly, size) > 0.5
        roof = rng.uniform(0.55, 0.95) * np.ones(3) + rng.uniform(-0.05, 0.05, size=3)
        # 屋顶右下方的阴影
        shadow = np.roll(mask, (2, 2), axis=(0, 1)) & ~mask
        image[shadow] *= 0.5
        image[mask] = roof
        edge = mask & ~ndimage.binary_erosion(mask)
        image[edge] *= 0.8

    image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    pixels = np.clip(image, 0.0, 1.0).astype(np.float32)
    return ImageTile(
        pixels=pixels,
        annotations=polygons,
        tile_id=tile_id or f'synth_{seed}',
        meta={'synthetic': {'seed': int(seed), 'requested': requested, 'placed': len(polygons)}},
    )


def _tile_seeds(seed: int, n_tiles: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n_tiles)]


def parallel_map(func: Callable, items: Sequence, workers: int) -> List:
    """按输入顺序返回结果"""
    if workers <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def write_synthetic_dataset(out_dir: Path, n_tiles: int, seed: int,
                            synth_config: Optional[SynthConfig] = None,
                            filter_config: Optional[FilterConfig] = None,
                            workers: int = 1) -> DatasetManifest:
    """
    生成合成数据集目录：tiles/*.png、annotations/*.json、manifest.json

    相同 (n_tiles, seed, 配置) 产生逐字节一致的目录。
    """
    out_dir = Path(out_dir)
    synth_config = synth_config or SynthConfig()
    seeds = _tile_seeds(seed, n_tiles)

    def _write(index: int) -> ManifestEntry:
        tile_id = f'synth_{index:05d}'
        tile = generate_synthetic_tile(seeds[index], synth_config, tile_id=tile_id)
        image = f'tiles/{tile_id}.png'
        annotation = f'annotations/{tile_id}.json'
        save_tile(tile, out_dir / image, out_dir / annotation)
        return ManifestEntry(tile_id=tile_id, image=image, annotation=annotation,
                             polygons=list(tile.annotations))

    try:
        entries = parallel_map(_write, list(range(n_tiles)), workers)
    except Exception as e:
        logger.error(f"生成合成数据集失败: {e}")
        raise
    manifest = DatasetManifest(entries=entries, filter_config=filter_config or FilterConfig(), root=out_dir)
    manifest = split_manifest(filter_tiles(manifest), seed)
    manifest.save(out_dir / 'manifest.json')
    logger.info(f"合成数据集已写入 {out_dir}: {len(manifest.entries)} 个瓦片")
    return manifest


def preprocess_dataset(source_dir: Path, out_dir: Path, seed: int,
                       filter_config: Optional[FilterConfig] = None,
                       workers: int = 1) -> DatasetManifest:
    """
    预处理外部数据：source_dir/images/*.png + source_dir/annotations/*.json

    瓦片重采样到 256×256 并按像素坐标写出，然后过滤、划分、保存清单。
    """
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    images = sorted((source_dir / 'images').glob('*.png'))
    if not images:
        raise ConfigError(f"{source_dir / 'images'} 下没有 PNG 瓦片")

    def _convert(image_path: Path) -> ManifestEntry:
        annotation_path = source_dir / 'annotations' / f'{image_path.stem}.json'
        tile = load_tile(image_path, annotation_path)
        image = f'tiles/{tile.tile_id}.png'
        annotation = f'annotations/{tile.tile_id}.json'
        save_tile(tile, out_dir / image, out_dir / annotation)
        return ManifestEntry(tile_id=tile.tile_id, image=image, annotation=annotation,
                             polygons=list(tile.annotations))

    entries = parallel_map(_convert, images, workers)
    manifest = DatasetManifest(entries=entries, filter_config=filter_config or FilterConfig(), root=out_dir)
    manifest = split_manifest(filter_tiles(manifest), seed)
    manifest.save(out_dir / 'manifest.json')
    return manifest


# ---------------------------------------------------------------------------
# 训练数组
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    """NCHW float32 数组形式的训练/测试数据"""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def centroid_arrays(tiles: Sequence[ImageTile]) -> Tuple[np.ndarray, np.ndarray]:
    """瓦片 → (N×3×256×256, N×1×32×32)"""
    if not tiles:
        return np.zeros((0, 3, 256, 256), np.float32), np.zeros((0, 1, 32, 32), np.float32)
    x = np.stack([tile.pixels.transpose(2, 0, 1) for tile in tiles]).astype(np.float32)
    y = np.stack([build_centroid_targets(tile).values[None] for tile in tiles]).astype(np.float32)
    return x, y


def patch_arrays(patches: Sequence[InstancePatch]) -> Tuple[np.ndarray, np.ndarray]:
    """实例切片 → (N×3×64×64, N×1×64×64)"""
    if not patches:
        return np.zeros((0, 3, 64, 64), np.float32), np.zeros((0, 1, 64, 64), np.float32)
    x = np.stack([patch.image.transpose(2, 0, 1) for patch in patches]).astype(np.float32)
    y = np.stack([patch.mask[None] for patch in patches]).astype(np.float32)
    return x, y


def centroid_training_set(train_tiles: Sequence[ImageTile], test_tiles: Sequence[ImageTile]) -> TrainingSet:
    return TrainingSet(*centroid_arrays(train_tiles), *centroid_arrays(test_tiles))


def instance_training_set(train_tiles: Sequence[ImageTile], test_tiles: Sequence[ImageTile]) -> TrainingSet:
    """切片只来自各自划分的瓦片，不会跨越训练/测试集"""
    train = [p for tile in train_tiles for p in extract_instance_patches(tile)]
    test = [p for tile in test_tiles for p in extract_instance_patches(tile)]
    return TrainingSet(*patch_arrays(train), *patch_arrays(test))


class DatasetManager:
    """数据集管理类：按清单读取瓦片并组装训练数组"""

    def __init__(self, data_dir: Path, workers: int = 1):
        self.data_dir = Path(data_dir)
        self.workers = workers
        self.manifest = DatasetManifest.load(self.data_dir / 'manifest.json')
        self._tiles: Dict[str, List[ImageTile]] = {}

    def load_tiles(self, split: str) -> List[ImageTile]:
        """读取某个划分的全部瓦片，顺序与清单一致"""
        if split not in self._tiles:
            entries = self.manifest.split_entries(split)
            self._tiles[split] = parallel_map(
                lambda e: load_tile(self.data_dir / e.image, self.data_dir / e.annotation),
                entries, self.workers)
            logger.info(f"已读取 {split} 划分 {len(entries)} 个瓦片")
        return self._tiles[split]

    def get_tile(self, tile_id: str) -> ImageTile:
        for entry in self.manifest.entries:
            if entry.tile_id == tile_id:
                return load_tile(self.data_dir / entry.image, self.data_dir / entry.annotation)
        raise ConfigError(f"清单中没有瓦片 {tile_id}")

    def centroid_set(self) -> TrainingSet:
        return centroid_training_set(self.load_tiles('train'), self.load_tiles('test'))

    def instance_set(self) -> TrainingSet:
        return instance_training_set(self.load_tiles('train'), self.load_tiles('test'))

    def get_statistics(self) -> Dict[str, float]:
        """数据集统计：质心碰撞数、按原因统计的跳过实例数、全零预测基线 RMSE"""
        stats: Dict[str, float] = {}
        for split in ('train', 'test'):
            tiles = self.load_tiles(split)
            patches = [p for tile in tiles for p in extract_instance_patches(tile)]
            grids = [build_centroid_targets(tile) for tile in tiles]
            foreground = float(np.mean([p.mask.mean() for p in patches])) if patches else 0.0
            stats[f'{split}_tiles'] = len(tiles)
            stats[f'{split}_instances'] = sum(len(tile.annotations) for tile in tiles)
            stats[f'{split}_patches'] = len(patches)
            stats[f'{split}_centroid_collisions'] = sum(grid.collisions for grid in grids)
            skipped = sum((count_skipped_instances(tile) for tile in tiles), Counter())
            for reason in SKIP_REASONS:
                stats[f'{split}_skipped_{reason}'] = skipped[reason]
            stats[f'{split}_patch_foreground_fraction'] = foreground
            stats[f'{split}_zero_baseline_rmse'] = math.sqrt(foreground)
        return stats
