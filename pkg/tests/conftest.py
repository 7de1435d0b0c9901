import os

import numpy as np
import pytest
import torch

from config_manager import SynthConfig
from data_manager import ImageTile, Polygon
from dataset_manager import DatasetManager, write_synthetic_dataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get('V2I_RUN_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason="设置 V2I_RUN_SLOW=1 后运行")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)


def square(x0, y0, side):
    return Polygon(((x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)))


@pytest.fixture
def square_tile():
    """三个互不重叠的正方形建筑，均完整落在瓦片内"""
    rng = np.random.default_rng(0)
    pixels = rng.uniform(0.1, 0.3, size=(256, 256, 3)).astype(np.float32)
    polygons = [square(20, 30, 16), square(100, 120, 24), square(200, 40, 12)]
    tile = ImageTile(pixels=pixels, annotations=polygons, tile_id='squares')
    for mask in tile.instance_masks:
        pixels[mask > 0.5] = 0.9
    return tile


SMALL_SYNTH = SynthConfig(min_instances=4, max_instances=6, min_size=10, max_size=24)


@pytest.fixture(scope='session')
def synthetic_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp('synth')
    write_synthetic_dataset(out_dir, 9, seed=0, synth_config=SMALL_SYNTH)
    return out_dir


@pytest.fixture(scope='session')
def instance_set(synthetic_dir):
    return DatasetManager(synthetic_dir).instance_set()
