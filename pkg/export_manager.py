#!/usr/bin/env python3
"""
结果导出管理器
损失日志、评估报告（JSON / 文本 / Excel）、对比曲线以及标签图和叠加图的导出
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from PIL import Image  # noqa: E402
from skimage.segmentation import find_boundaries  # noqa: E402

from data_manager import ImageTile  # noqa: E402
from evaluation_manager import DecoderComparison, EvalReport  # noqa: E402
from training_manager import LossLog  # noqa: E402

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = 'run_config.json'


def _label_colors(n: int, seed: int = 0) -> np.ndarray:
    """标签 0 为黑色，其余标签取随机但确定的颜色"""
    colors = np.random.default_rng(seed).integers(64, 256, size=(n + 1, 3)).astype(np.uint8)
    colors[0] = 0
    return colors


class ExportManager:
    """结果导出管理类"""

    def __init__(self, export_dir: Path = Path('.')):
        self.export_dir = Path(export_dir)

    def _target(self, path: Path) -> Path:
        """相对路径以 export_dir 为根，并确保父目录存在"""
        path = Path(path)
        if not path.is_absolute():
            path = self.export_dir / path
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_run_config(self, directory: Path, echo: Dict[str, Any]) -> Path:
        """在产物目录下写入运行配置"""
        path = self._target(Path(directory) / RUN_CONFIG_NAME)
        path.write_text(json.dumps(echo, sort_keys=True, indent=2), encoding='utf-8')
        return path

    def export_loss_log(self, log: LossLog, path: Path) -> Path:
        return log.to_csv(self._target(path))

    def export_report(self, report: EvalReport, directory: Path, stem: str = 'eval_report') -> Dict[str, Path]:
        """
        导出评估报告：JSON、文本表格、Excel（每个阶段一张表）和逐瓦片 CSV

        Returns:
            各格式文件路径
        """
        directory = Path(directory)
        paths = {
            'json': self._target(directory / f'{stem}.json'),
            'text': self._target(directory / f'{stem}.txt'),
            'xlsx': self._target(directory / f'{stem}.xlsx'),
            'tiles': self._target(directory / f'{stem}_tiles.csv'),
        }
        try:
            paths['json'].write_text(report.to_json(), encoding='utf-8')
            paths['text'].write_text(report.render_text(), encoding='utf-8')
            report.tile_frame().to_csv(paths['tiles'], index=False)
            with pd.ExcelWriter(paths['xlsx'], engine='openpyxl') as writer:
                rows = [{'阶段': stage, '准确率': cm.accuracy, **cm.percentages()}
                        for stage, cm in report.stages().items()]
                rows.append({'阶段': 'foreground_iou', '准确率': report.iou})
                pd.DataFrame(rows).to_excel(writer, sheet_name='汇总', index=False)
                for stage, cm in report.stages().items():
                    pct = cm.percentages()
                    table = pd.DataFrame({'预测 0': [pct['tn'], pct['fn']], '预测 1': [pct['fp'], pct['tp']]},
                                         index=['真值 0', '真值 1'])
                    table.to_excel(writer, sheet_name=stage)
                report.tile_frame().to_excel(writer, sheet_name='逐瓦片', index=False)
        except Exception as e:
            logger.error(f"导出评估报告失败: {e}")
            raise
        logger.info(f"评估报告已导出到 {directory}")
        return paths

    def export_comparison(self, comparison: DecoderComparison, directory: Path) -> Dict[str, Path]:
        """对比实验：每个运行的损失日志、对齐的测试损失 CSV 和曲线图"""
        directory = Path(directory)
        for label, log in comparison.logs.items():
            self.export_loss_log(log, directory / label / 'loss_log.csv')
        frame = comparison.test_loss_frame()
        csv_path = self._target(directory / 'comparison.csv')
        frame.to_csv(csv_path, index=False)
        counts_path = self._target(directory / 'parameter_counts.json')
        counts_path.write_text(json.dumps(comparison.parameter_counts, sort_keys=True, indent=2),
                               encoding='utf-8')
        png_path = self.plot_test_losses(frame, directory / 'comparison.png')
        return {'csv': csv_path, 'counts': counts_path, 'png': png_path}

    def plot_loss_curves(self, logs: Dict[str, LossLog], path: Path) -> Path:
        """训练/测试损失曲线 PNG，旁边写出数据 CSV"""
        path = self._target(path)
        frames = []
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label, log in logs.items():
            frame = log.to_frame().assign(run=label)
            frames.append(frame)
            ax.plot(frame['epoch'], frame['train_loss'], label=f'{label} train')
            ax.plot(frame['epoch'], frame['test_loss'], linestyle='--', label=f'{label} test')
        ax.set_xlabel('epoch')
        ax.set_ylabel('loss')
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        if frames:
            pd.concat(frames, ignore_index=True).to_csv(path.with_suffix('.csv'), index=False)
        return path

    def plot_test_losses(self, frame: pd.DataFrame, path: Path) -> Path:
        path = self._target(path)
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for column in frame.columns:
            if column != 'epoch':
                ax.plot(frame['epoch'], frame[column], label=column)
        ax.set_xlabel('epoch')
        ax.set_ylabel('test RMSE')
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path

    def export_label_map(self, label_map: np.ndarray, path: Path) -> Path:
        """标签图着色后保存为 PNG"""
        path = self._target(path)
        colors = _label_colors(int(label_map.max()))
        Image.fromarray(colors[label_map]).save(path)
        return path

    def export_overlay(self, tile: ImageTile, label_map: np.ndarray, path: Path,
                       gt_label_map: Optional[np.ndarray] = None) -> Path:
        """在瓦片上叠加预测实例边界（红色），可选真值边界（绿色）"""
        path = self._target(path)
        image = (np.clip(tile.pixels, 0.0, 1.0) * 255).astype(np.uint8).copy()
        if gt_label_map is not None:
            image[find_boundaries(gt_label_map, mode='inner')] = (0, 255, 0)
        image[find_boundaries(label_map, mode='inner')] = (255, 0, 0)
        Image.fromarray(image).save(path)
        return path

    def export_sample_grid(self, rows: Sequence[Dict[str, np.ndarray]], path: Path) -> Path:
        """
        结果示例图：每行依次为输入、真值、预测

        Args:
            rows: 每项包含 'image'、'truth'、'prediction' 三个数组
        """
        path = self._target(path)
        titles = ('image', 'truth', 'prediction')
        fig, axes = plt.subplots(len(rows), 3, figsize=(7.5, 2.5 * len(rows)), squeeze=False)
        for r, row in enumerate(rows):
            for c, key in enumerate(titles):
                ax = axes[r][c]
                data = row[key]
                ax.imshow(data, cmap=None if data.ndim == 3 else 'gray', vmin=0, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(key)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


_export_manager_instance: Optional[ExportManager] = None


def get_export_manager(export_dir: Optional[Path] = None) -> ExportManager:
    global _export_manager_instance
    if _export_manager_instance is None or (
            export_dir is not None and Path(export_dir) != _export_manager_instance.export_dir):
        _export_manager_instance = ExportManager(export_dir or Path('.'))
    return _export_manager_instance
