import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from conftest import square
from data_manager import (
    GeoTransform, ImageTile, Polygon, build_centroid_targets, compute_centroid, count_skipped_instances,
    crop_window, extract_instance_patches, geo_to_pixel, is_fully_captured, load_tile, rasterize_instances,
    rasterize_polygon, resample_tile, save_tile,
)
from exceptions import EmptyMask, InvalidPolygon, InvalidTransform


def even_odd_oracle(vertices, size):
    """逐像素中心的奇偶射线判定"""
    mask = np.zeros((size, size), dtype=np.float32)
    n = len(vertices)
    for row in range(size):
        y = row + 0.5
        for col in range(size):
            x = col + 0.5
            inside = False
            j = n - 1
            for i in range(n):
                xi, yi = vertices[i]
                xj, yj = vertices[j]
                if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
                    inside = not inside
                j = i
            mask[row, col] = inside
    return mask


def random_simple_polygon(rng, size):
    """围绕中心按角度排序的随机点，得到星形简单多边形"""
    n = int(rng.integers(3, 10))
    center = rng.uniform(0, size, size=2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(1.0, size / 2.0, size=n)
    pts = center + np.stack([np.cos(angles), np.sin(angles)], axis=1) * radii[:, None]
    return [(float(x), float(y)) for x, y in pts]


class TestRasterize:

    def test_axis_aligned_square(self):
        mask = rasterize_polygon([(0, 0), (4, 0), (4, 4), (0, 4)], 8)
        assert mask.dtype == np.float32
        assert mask[:4, :4].sum() == 16
        assert mask.sum() == 16

    def test_half_pixel_square_covers_centers(self):
        mask = rasterize_polygon([(0.5, 0.5), (2.5, 0.5), (2.5, 2.5), (0.5, 2.5)], 4)
        # 中心恰好在边上：左/上边计入，右/下边不计入
        assert mask.sum() == 4

    def test_clipped_to_grid(self):
        mask = rasterize_polygon([(-10, -10), (4, -10), (4, 4), (-10, 4)], 8)
        assert mask.sum() == 16

    def test_matches_even_odd_oracle_on_random_polygons(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            size = int(rng.integers(4, 65))
            vertices = random_simple_polygon(rng, size)
            try:
                poly = Polygon(tuple(vertices))
            except InvalidPolygon:
                continue
            np.testing.assert_array_equal(rasterize_polygon(poly, size), even_odd_oracle(vertices, size))

    @pytest.mark.parametrize('vertices', [
        [(0, 0), (1, 1)],
        [(0, 0), (1, 1), (2, 2)],
        [(0, 0), (1, float('nan')), (2, 0)],
    ])
    def test_invalid_polygons(self, vertices):
        with pytest.raises(InvalidPolygon):
            rasterize_polygon(vertices, 8)


class TestCentroid:

    def test_single_pixel(self):
        mask = np.zeros((8, 8))
        mask[3, 5] = 1
        assert compute_centroid(mask) == (5, 3)

    def test_rounds_half_up(self):
        mask = np.zeros((4, 8))
        mask[0, 2:4] = 1
        assert compute_centroid(mask) == (3, 0)

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            compute_centroid(np.zeros((4, 4)))


class TestGeoTransform:

    def test_identity(self):
        assert geo_to_pixel(GeoTransform.identity(), 3.5, 7.25) == (3.5, 7.25)

    def test_affine(self):
        gt = GeoTransform(2.0, 0.0, 10.0, 0.0, -2.0, 100.0)
        assert geo_to_pixel(gt, 1.0, 5.0) == (12.0, 90.0)

    def test_singular(self):
        with pytest.raises(InvalidTransform):
            geo_to_pixel(GeoTransform(1.0, 2.0, 0.0, 2.0, 4.0, 0.0), 0.0, 0.0)


def test_crop_window_zero_pads():
    array = np.ones((10, 10), dtype=np.float32)
    window = crop_window(array, 0, 0, 4)
    assert window.shape == (4, 4)
    np.testing.assert_array_equal(window[2:, 2:], 1)
    assert window.sum() == 4


def test_is_fully_captured():
    assert is_fully_captured(square(0, 0, 256))
    assert not is_fully_captured(square(-1, 10, 20))
    assert not is_fully_captured(square(250, 10, 20))


class TestCentroidTargets:

    def _tile(self, polygons):
        return ImageTile(pixels=np.zeros((256, 256, 3), np.float32), annotations=polygons, tile_id='t')

    def test_cell_of_centroid(self):
        grid = build_centroid_targets(self._tile([square(10, 10, 10)]))
        # 像素 10..19，质心 14.5 → 15，单元 15 // 8 = 1
        assert grid.values.shape == (32, 32)
        assert grid.values[1, 1] == 1
        assert grid.values.sum() == 1
        assert grid.collisions == 0

    def test_collision_counted_once(self):
        grid = build_centroid_targets(self._tile([square(8, 8, 2), square(12, 12, 2)]))
        assert grid.values[1, 1] == 1
        assert grid.values.sum() == 1
        assert grid.collisions == 1

    def test_partial_instance_still_targeted(self):
        grid = build_centroid_targets(self._tile([square(-8, 100, 20)]))
        assert grid.values.sum() == 1


class TestInstancePatches:

    def test_patch_centered_on_centroid(self, square_tile):
        patches = extract_instance_patches(square_tile)
        assert len(patches) == 3
        first = patches[0]
        assert first.image.shape == (64, 64, 3)
        assert first.mask.shape == (64, 64)
        assert first.center == (28, 38)
        assert first.mask.sum() == 16 * 16
        assert first.mask[32, 32] == 1

    def test_patch_mask_excludes_neighbours(self):
        pixels = np.zeros((256, 256, 3), np.float32)
        tile = ImageTile(pixels=pixels, annotations=[square(40, 40, 10), square(54, 40, 10)], tile_id='pair')
        patches = extract_instance_patches(tile)
        assert [p.mask.sum() for p in patches] == [100, 100]

    def test_skips_partial_and_oversized(self):
        pixels = np.zeros((256, 256, 3), np.float32)
        tile = ImageTile(pixels=pixels, annotations=[square(-5, 50, 20), square(100, 100, 70), square(20, 200, 20)],
                         tile_id='mixed')
        patches = extract_instance_patches(tile)
        assert len(patches) == 1
        assert patches[0].center == (30, 210)
        assert count_skipped_instances(tile) == Counter({'truncated': 1, 'oversized': 1})

    def test_skips_instance_outside_centred_window(self):
        # 外接框 60×60 的细 L 形，质心窗口装不下两条臂的末端
        l_shape = Polygon(((10, 10), (70, 10), (70, 14), (14, 14), (14, 70), (10, 70)))
        pixels = np.zeros((256, 256, 3), np.float32)
        tile = ImageTile(pixels=pixels, annotations=[l_shape, square(150, 150, 20)], tile_id='l')
        patches = extract_instance_patches(tile)
        assert [p.center for p in patches] == [(160, 160)]
        assert count_skipped_instances(tile) == Counter({'off_window': 1})


def test_rasterize_instances_union(square_tile):
    union = rasterize_instances(square_tile)
    assert union.dtype == bool
    assert union.sum() == 16 * 16 + 24 * 24 + 12 * 12


def test_resample_scales_polygons():
    image = np.zeros((650, 650, 3), dtype=np.uint8)
    pixels, polygons = resample_tile(image, [square(65, 130, 65)], 256)
    assert pixels.shape == (256, 256, 3)
    assert pixels.dtype == np.float32
    xmin, ymin, xmax, ymax = polygons[0].bounds
    assert (xmin, ymin, xmax, ymax) == pytest.approx((25.6, 51.2, 51.2, 76.8))


def test_save_and_load_tile(tmp_path, square_tile):
    save_tile(square_tile, tmp_path / 'tile.png', tmp_path / 'tile.json')
    loaded = load_tile(tmp_path / 'tile.png', tmp_path / 'tile.json')
    assert loaded.tile_id == 'squares'
    assert loaded.annotations == square_tile.annotations
    np.testing.assert_allclose(loaded.pixels, square_tile.pixels, atol=0.5 / 255 + 1e-6)


def test_load_tile_with_geotransform(tmp_path):
    Image.fromarray(np.zeros((256, 256, 3), dtype=np.uint8)).save(tmp_path / 'geo.png')
    record = {
        'tile_id': 'geo',
        'geotransform': [2.0, 0.0, 0.0, 0.0, 2.0, 0.0],
        'instances': [{'polygon': [[5, 5], [15, 5], [15, 15], [5, 15]]}],
    }
    (tmp_path / 'geo.json').write_text(json.dumps(record), encoding='utf-8')
    tile = load_tile(tmp_path / 'geo.png', tmp_path / 'geo.json')
    assert tile.annotations[0].bounds == (10.0, 10.0, 30.0, 30.0)
