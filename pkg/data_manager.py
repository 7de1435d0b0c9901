#!/usr/bin/env python3
"""
数据管理器
负责瓦片与标注的读写、多边形栅格化、质心计算、质心目标网格和实例切片
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from exceptions import ConfigError, EmptyMask, InvalidPolygon, InvalidTransform

logger = logging.getLogger(__name__)

TILE_SIZE = 256
PATCH_SIZE = 64
CELL_STRIDE = 8


@dataclass(frozen=True)
class Polygon:
    """像素坐标下的单外环多边形（不支持洞）"""

    vertices: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        vertices = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, 'vertices', vertices)
        if len(vertices) < 3:
            raise InvalidPolygon(f"多边形至少需要3个顶点，实际为 {len(vertices)}")
        pts = np.asarray(vertices, dtype=np.float64)
        if not np.all(np.isfinite(pts)):
            raise InvalidPolygon("多边形包含非有限坐标")
        if np.linalg.matrix_rank(pts - pts.mean(axis=0)) < 2:
            raise InvalidPolygon("多边形顶点全部共线")

    @classmethod
    def coerce(cls, value: Union['Polygon', Sequence[Sequence[float]]]) -> 'Polygon':
        if isinstance(value, Polygon):
            return value
        try:
            return cls(tuple((x, y) for x, y in value))
        except (TypeError, ValueError) as e:
            raise InvalidPolygon(f"无法解析多边形: {e}") from e

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        pts = np.asarray(self.vertices)
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    @property
    def extent(self) -> Tuple[float, float]:
        """外接矩形的宽和高"""
        xmin, ymin, xmax, ymax = self.bounds
        return xmax - xmin, ymax - ymin

    def scaled(self, sx: float, sy: float) -> 'Polygon':
        return Polygon(tuple((x * sx, y * sy) for x, y in self.vertices))

    def to_list(self) -> List[List[float]]:
        return [[x, y] for x, y in self.vertices]


@dataclass(frozen=True)
class GeoTransform:
    """地理坐标到像素坐标的仿射变换：x = a·lon + b·lat + c；y = d·lon + e·lat + f"""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    @property
    def determinant(self) -> float:
        return self.a * self.e - self.b * self.d

    @classmethod
    def identity(cls) -> 'GeoTransform':
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass
class ImageTile:
    """RGB 瓦片及其实例标注，像素值在 [0,1]"""

    pixels: np.ndarray
    annotations: List[Polygon]
    tile_id: str
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])

    @cached_property
    def instance_masks(self) -> List[np.ndarray]:
        """每个标注在整幅瓦片上的栅格掩膜，瓦片外部分被裁掉"""
        return [rasterize_polygon(poly, self.size) for poly in self.annotations]


@dataclass
class CentroidGrid:
    """下采样质心网格，cell_stride 个输入像素对应一个单元"""

    values: np.ndarray
    collisions: int = 0
    cell_stride: int = CELL_STRIDE


@dataclass
class InstancePatch:
    """以实例质心为中心的 64×64 切片"""

    image: np.ndarray
    mask: np.ndarray
    source_tile: str
    center: Tuple[int, int]


def rasterize_polygon(poly: Union[Polygon, Sequence[Sequence[float]]], size: int) -> np.ndarray:
    """
    扫描线奇偶规则栅格化

    像素 (i, j) 的中心点 (j+0.5, i+0.5) 在多边形内部时取 1。每条扫描线上先求出
    与各条边的交点并排序，再统计中心点右侧交点个数的奇偶。边的取舍采用半开区间
    (yi > y) != (yj > y)，因此水平边不产生交点，顶点只计一次。

    Args:
        poly: 多边形或顶点列表
        size: 网格边长

    Returns:
        size×size 的 float32 二值掩膜
    """
    poly = Polygon.coerce(poly)
    if size < 1:
        raise ConfigError(f"网格边长必须为正: {size}")

    pts = np.asarray(poly.vertices, dtype=np.float64)
    xi, yi = pts[:, 0], pts[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    centers = np.arange(size, dtype=np.float64) + 0.5

    mask = np.zeros((size, size), dtype=np.float32)
    ymin, ymax = yi.min(), yi.max()
    for row in range(size):
        y = centers[row]
        if y < ymin or y > ymax:
            continue
        active = (yi > y) != (yj > y)
        if not active.any():
            continue
        crossings = np.sort((xj[active] - xi[active]) * (y - yi[active])
                            / (yj[active] - yi[active]) + xi[active])
        # 中心点右侧（严格大于）的交点个数为奇数即在内部
        right = len(crossings) - np.searchsorted(crossings, centers, side='right')
        mask[row] = (right % 2 == 1)
    return mask


def compute_centroid(mask: np.ndarray) -> Tuple[int, int]:
    """前景像素坐标均值，四舍五入（0.5 向上）后夹到网格内，返回 (x, y)"""
    mask = np.asarray(mask)
    foreground = np.argwhere(mask >= 0.5)
    if foreground.size == 0:
        raise EmptyMask("掩膜中没有前景像素")
    cy, cx = foreground.mean(axis=0)
    x = min(max(int(math.floor(cx + 0.5)), 0), mask.shape[1] - 1)
    y = min(max(int(math.floor(cy + 0.5)), 0), mask.shape[0] - 1)
    return x, y


def geo_to_pixel(gt: GeoTransform, lon: float, lat: float) -> Tuple[float, float]:
    """地理坐标转像素坐标（实数，不取整）"""
    if gt.determinant == 0 or not math.isfinite(gt.determinant):
        raise InvalidTransform(f"仿射变换不可逆: {gt}")
    return gt.a * lon + gt.b * lat + gt.c, gt.d * lon + gt.e * lat + gt.f


def is_fully_captured(poly: Polygon, size: int = TILE_SIZE) -> bool:
    """多边形是否完整落在瓦片内"""
    xmin, ymin, xmax, ymax = poly.bounds
    return xmin >= 0 and ymin >= 0 and xmax <= size and ymax <= size


def crop_window(array: np.ndarray, cx: int, cy: int, size: int = PATCH_SIZE) -> np.ndarray:
    """以 (cx, cy) 为中心截取 size×size 窗口，瓦片外区域补零；训练和推理共用"""
    half = size // 2
    top, left = cy - half, cx - half
    out = np.zeros((size, size) + array.shape[2:], dtype=array.dtype)
    r0, r1 = max(top, 0), min(top + size, array.shape[0])
    c0, c1 = max(left, 0), min(left + size, array.shape[1])
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = array[r0:r1, c0:c1]
    return out


def build_centroid_targets(tile: ImageTile, cell_stride: int = CELL_STRIDE) -> CentroidGrid:
    """
    生成质心训练目标

    每个实例（包括被瓦片边缘截断的实例）在 (⌊cy/8⌋, ⌊cx/8⌋) 单元标 1，
    多个质心落入同一单元时只标一次并计入碰撞数。
    """
    side = tile.size // cell_stride
    values = np.zeros((side, side), dtype=np.float32)
    collisions = 0
    for poly, mask in zip(tile.annotations, tile.instance_masks):
        try:
            cx, cy = compute_centroid(mask)
        except EmptyMask:
            logger.debug(f"瓦片 {tile.tile_id} 中有实例未覆盖任何像素中心，已跳过")
            continue
        row, col = cy // cell_stride, cx // cell_stride
        if values[row, col]:
            collisions += 1
            logger.debug(f"瓦片 {tile.tile_id} 质心单元 ({row}, {col}) 发生碰撞")
        values[row, col] = 1.0
    return CentroidGrid(values=values, collisions=collisions, cell_stride=cell_stride)


# 实例不进入训练切片的原因
SKIP_REASONS = ('truncated', 'empty', 'oversized', 'off_window')


def instance_skip_reason(poly: Polygon, mask: np.ndarray, tile_size: int = TILE_SIZE,
                         patch_size: int = PATCH_SIZE,
                         max_instance_size: int = PATCH_SIZE) -> Optional[str]:
    """
    判断实例能否截成训练切片，能则返回 None，否则返回 SKIP_REASONS 之一

    off_window：外接框不超过 64×64，但以质心为中心的窗口装不下整个实例（如 L 形）。
    """
    if not is_fully_captured(poly, tile_size):
        return 'truncated'
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return 'empty'
    height = rows.max() - rows.min() + 1
    width = cols.max() - cols.min() + 1
    if height > max_instance_size or width > max_instance_size:
        return 'oversized'
    cx, cy = compute_centroid(mask)
    if crop_window(mask, cx, cy, patch_size).sum() != mask.sum():
        return 'off_window'
    return None


def count_skipped_instances(tile: ImageTile, patch_size: int = PATCH_SIZE,
                            max_instance_size: int = PATCH_SIZE) -> Counter:
    """按原因统计瓦片中被跳过的实例"""
    reasons = (instance_skip_reason(poly, mask, tile.size, patch_size, max_instance_size)
               for poly, mask in zip(tile.annotations, tile.instance_masks))
    return Counter(reason for reason in reasons if reason is not None)


def extract_instance_patches(tile: ImageTile, patch_size: int = PATCH_SIZE,
                             max_instance_size: int = PATCH_SIZE) -> List[InstancePatch]:
    """
    为每个完整且不超过 64×64 的实例截取以质心为中心的切片

    切片掩膜只包含该实例本身，不包含相邻实例。跳过规则见 instance_skip_reason。
    """
    patches = []
    for index, (poly, mask) in enumerate(zip(tile.annotations, tile.instance_masks)):
        reason = instance_skip_reason(poly, mask, tile.size, patch_size, max_instance_size)
        if reason is not None:
            logger.debug(f"瓦片 {tile.tile_id} 实例 {index} 跳过: {reason}")
            continue
        cx, cy = compute_centroid(mask)
        patches.append(InstancePatch(
            image=crop_window(tile.pixels, cx, cy, patch_size),
            mask=crop_window(mask, cx, cy, patch_size),
            source_tile=tile.tile_id,
            center=(cx, cy),
        ))
    return patches


def rasterize_instances(tile: ImageTile) -> np.ndarray:
    """瓦片全部实例的前景并集"""
    union = np.zeros((tile.size, tile.size), dtype=bool)
    for mask in tile.instance_masks:
        union |= mask > 0.5
    return union


def resample_tile(image: np.ndarray, polygons: List[Polygon],
                  size: int = TILE_SIZE) -> Tuple[np.ndarray, List[Polygon]]:
    """
    图像双线性重采样到 size×size，多边形坐标按同样比例缩放

    Args:
        image: H×W×3 uint8 图像
        polygons: 原始像素坐标下的多边形

    Returns:
        (float32 像素 [0,1], 缩放后的多边形)
    """
    height, width = image.shape[:2]
    if (height, width) != (size, size):
        image = np.asarray(Image.fromarray(image).resize((size, size), Image.Resampling.BILINEAR))
    sx, sy = size / width, size / height
    scaled = [poly.scaled(sx, sy) for poly in polygons] if (sx, sy) != (1.0, 1.0) else list(polygons)
    return image.astype(np.float32) / 255.0, scaled


def load_tile(image_path: Path, annotation_path: Path, size: int = TILE_SIZE) -> ImageTile:
    """
    读取 PNG 瓦片和标注 JSON，并重采样到 size×size

    标注中带 geotransform 时多边形坐标按经纬度解释，先转成像素坐标。
    """
    try:
        record = json.loads(Path(annotation_path).read_text(encoding='utf-8'))
        image = np.asarray(Image.open(image_path).convert('RGB'))
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"读取瓦片失败: {e}")
        raise ConfigError(f"无法读取瓦片 {image_path}: {e}") from e

    gt = GeoTransform(*record['geotransform']) if record.get('geotransform') else None
    polygons = []
    for instance in record.get('instances', []):
        vertices = instance['polygon']
        if gt is not None:
            vertices = [geo_to_pixel(gt, lon, lat) for lon, lat in vertices]
        polygons.append(Polygon.coerce(vertices))

    height, width = image.shape[:2]
    if (record.get('width', width), record.get('height', height)) != (width, height):
        logger.warning(f"标注尺寸与图像尺寸不一致: {annotation_path}")
    pixels, polygons = resample_tile(image, polygons, size)
    return ImageTile(pixels=pixels, annotations=polygons,
                     tile_id=str(record.get('tile_id', Path(image_path).stem)),
                     meta={'synthetic': record['synthetic']} if 'synthetic' in record else {})


def save_tile(tile: ImageTile, image_path: Path, annotation_path: Path) -> None:
    """以 PNG + 像素坐标 JSON 保存瓦片，输出字节稳定"""
    Path(image_path).parent.mkdir(parents=True, exist_ok=True)
    Path(annotation_path).parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(tile.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(image_path, format='PNG')
    record = {
        'tile_id': tile.tile_id,
        'width': tile.size,
        'height': tile.size,
        'instances': [{'polygon': poly.to_list()} for poly in tile.annotations],
    }
    if 'synthetic' in tile.meta:
        record['synthetic'] = tile.meta['synthetic']
    Path(annotation_path).write_text(json.dumps(record, sort_keys=True, indent=2), encoding='utf-8')
