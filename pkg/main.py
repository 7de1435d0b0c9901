#!/usr/bin/env python3
"""
命令行入口
synth / preprocess / train-centroid / train-instance / predict / evaluate / ablate / plot
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import typer
from rich.console import Console
from rich.logging import RichHandler
from typing_extensions import Annotated

from config_manager import RunConfig
from data_manager import SKIP_REASONS, rasterize_instances
from dataset_manager import DatasetManager, preprocess_dataset, write_synthetic_dataset
from evaluation_manager import compare_decoders, evaluate_pipeline
from exceptions import ConfigError, Vec2InstanceError
from export_manager import get_export_manager
from inference_manager import predict_tile
from model_manager import DECODER_KINDS, load_checkpoint
from training_manager import LossLog, train_centroid, train_instance

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, no_args_is_help=True, help="建筑实例分割：数据、训练、推理与评估")

ConfigOpt = Annotated[Optional[Path], typer.Option('--config', help="JSON 配置文件")]
SeedOpt = Annotated[Optional[int], typer.Option('--seed', help="随机种子（默认 0）")]
WorkersOpt = Annotated[Optional[int], typer.Option('--workers', help="并行线程数（默认 1）")]
OutOpt = Annotated[Optional[Path], typer.Option('--out', help="输出目录")]
DataOpt = Annotated[Optional[Path], typer.Option('--data', help="数据集目录（默认取 V2I_DATA_DIR）")]
VerboseOpt = Annotated[bool, typer.Option('--verbose', '-v', help="输出调试日志")]
EpochsOpt = Annotated[Optional[int], typer.Option('--epochs', help="训练轮数")]
BatchOpt = Annotated[Optional[int], typer.Option('--batch-size', help="小批量大小")]
LrOpt = Annotated[Optional[float], typer.Option('--lr', help="Adam 学习率")]
ThresholdOpt = Annotated[Optional[float], typer.Option('--threshold', help="质心检测阈值（默认 0.5）")]
NmsOpt = Annotated[Optional[float], typer.Option('--nms-iou', help="NMS 的 IoU 阈值（默认 0.5）")]
MaskThresholdOpt = Annotated[Optional[float], typer.Option('--mask-threshold', help="掩膜二值化阈值（默认 0.5）")]
CentroidCkptOpt = Annotated[Optional[Path], typer.Option('--centroid-ckpt', help="质心网络检查点")]
InstanceCkptOpt = Annotated[Optional[Path], typer.Option('--instance-ckpt', help="实例网络检查点")]


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(message)s',
        datefmt='[%X]',
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )
    # 第三方库日志只保留警告
    for name in ('matplotlib', 'PIL', 'h5py'):
        logging.getLogger(name).setLevel(logging.WARNING)


def _prepare(config_path: Optional[Path], verbose: bool, overrides: Dict[str, Any]) -> RunConfig:
    setup_logging(verbose)
    config = RunConfig.load(config_path, overrides)
    logger.debug(f"运行配置: {json.dumps(config.echo(), ensure_ascii=False)}")
    return config


def _train_overrides(epochs: Optional[int], batch_size: Optional[int], lr: Optional[float]) -> Dict[str, Any]:
    return {'epochs': epochs, 'batch_size': batch_size, 'learning_rate': lr}


def _output_dir(config: RunConfig, out: Optional[Path], name: str) -> Path:
    target = config.out_dir if out is not None else config.out_dir / name
    target.mkdir(parents=True, exist_ok=True)
    return target


def _checkpoints(config: RunConfig) -> None:
    missing = [flag for flag, value in (('--centroid-ckpt', config.centroid_checkpoint),
                                        ('--instance-ckpt', config.instance_checkpoint)) if value is None]
    if missing:
        raise ConfigError(f"缺少检查点: {', '.join(missing)}")


def _report_dataset(data_dir: Path, workers: int) -> Dict[str, float]:
    """写出数据集后汇报质心碰撞数和跳过的实例数"""
    stats = DatasetManager(data_dir, workers).get_statistics()
    collisions = {split: int(stats[f'{split}_centroid_collisions']) for split in ('train', 'test')}
    skipped = {reason: int(stats[f'train_skipped_{reason}'] + stats[f'test_skipped_{reason}'])
               for reason in SKIP_REASONS}
    logger.info(f"跳过的实例: {skipped}")
    typer.echo(f"质心单元碰撞: 训练 {collisions['train']}, 测试 {collisions['test']}")
    return stats


@app.command('synth')
def synth(tiles: Annotated[int, typer.Option('--tiles', help="瓦片数量")] = 30,
          seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None,
          config: ConfigOpt = None, verbose: VerboseOpt = False):
    """生成合成数据集"""
    run_config = _prepare(config, verbose, {'seed': seed, 'workers': workers, 'data_dir': out})
    out_dir = run_config.data_dir
    manifest = write_synthetic_dataset(out_dir, tiles, run_config.seed, run_config.synth,
                                       run_config.filter, run_config.workers)
    get_export_manager().write_run_config(out_dir, run_config.echo())
    typer.echo(f"{len(manifest.entries)} 个瓦片已写入 {out_dir}")
    _report_dataset(out_dir, run_config.workers)


@app.command('preprocess')
def preprocess(source: Annotated[Path, typer.Option('--source', help="原始数据目录（images/ + annotations/）")],
               seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None,
               config: ConfigOpt = None, verbose: VerboseOpt = False):
    """读取、过滤、划分外部数据"""
    run_config = _prepare(config, verbose, {'seed': seed, 'workers': workers, 'data_dir': out})
    manifest = preprocess_dataset(source, run_config.data_dir, run_config.seed, run_config.filter,
                                  run_config.workers)
    get_export_manager().write_run_config(run_config.data_dir, run_config.echo())
    typer.echo(f"{len(manifest.entries)} 个瓦片已写入 {run_config.data_dir}")
    _report_dataset(run_config.data_dir, run_config.workers)


@app.command('train-centroid')
def train_centroid_command(data: DataOpt = None, epochs: EpochsOpt = None, batch_size: BatchOpt = None,
                           lr: LrOpt = None, seed: SeedOpt = None, workers: WorkersOpt = None,
                           out: OutOpt = None, config: ConfigOpt = None, verbose: VerboseOpt = False):
    """训练质心网络"""
    run_config = _prepare(config, verbose, {
        'seed': seed, 'workers': workers, 'data_dir': data, 'out_dir': out,
        'centroid_train': _train_overrides(epochs, batch_size, lr)})
    out_dir = _output_dir(run_config, out, 'centroid')
    dataset = DatasetManager(run_config.data_dir, run_config.workers).centroid_set()
    exporter = get_export_manager()
    exporter.write_run_config(out_dir, run_config.echo())
    trained, log = train_centroid(dataset, run_config.centroid_train, run_config.net, out_dir, progress=True)
    exporter.plot_loss_curves({'centroid': log}, out_dir / 'loss_curve.png')
    typer.echo(f"检查点: {trained.path}")


@app.command('train-instance')
def train_instance_command(data: DataOpt = None,
                           decoder: Annotated[str, typer.Option('--decoder', help="vec2instance 或 transpose_conv")] = 'vec2instance',
                           budget: Annotated[Optional[int], typer.Option('--budget', help="转置卷积解码器参数预算")] = None,
                           epochs: EpochsOpt = None, batch_size: BatchOpt = None, lr: LrOpt = None,
                           seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None,
                           config: ConfigOpt = None, verbose: VerboseOpt = False):
    """训练实例网络"""
    run_config = _prepare(config, verbose, {
        'seed': seed, 'workers': workers, 'data_dir': data, 'out_dir': out,
        'instance_train': _train_overrides(epochs, batch_size, lr)})
    if decoder not in DECODER_KINDS:
        raise ConfigError(f"未知解码器: {decoder}")
    if decoder == 'transpose_conv' and budget is None:
        budget = run_config.ablation_budgets[0]
    out_dir = _output_dir(run_config, out, 'instance')
    dataset = DatasetManager(run_config.data_dir, run_config.workers).instance_set()
    exporter = get_export_manager()
    exporter.write_run_config(out_dir, run_config.echo())
    trained, log = train_instance(dataset, run_config.instance_train, decoder, budget, run_config.net,
                                  out_dir, progress=True)
    exporter.plot_loss_curves({decoder: log}, out_dir / 'loss_curve.png')
    typer.echo(f"检查点: {trained.path}")


@app.command('predict')
def predict(tile: Annotated[Optional[str], typer.Option('--tile', help="瓦片 ID（默认全部测试瓦片）")] = None,
            centroid_ckpt: CentroidCkptOpt = None, instance_ckpt: InstanceCkptOpt = None,
            data: DataOpt = None, threshold: ThresholdOpt = None, nms_iou: NmsOpt = None,
            mask_threshold: MaskThresholdOpt = None,
            out: OutOpt = None, config: ConfigOpt = None, verbose: VerboseOpt = False):
    """预测实例标签图并导出标签图、叠加图和示例图"""
    run_config = _prepare(config, verbose, {
        'data_dir': data, 'out_dir': out, 'centroid_checkpoint': centroid_ckpt,
        'instance_checkpoint': instance_ckpt,
        'inference': {'detection_threshold': threshold, 'nms_iou': nms_iou, 'mask_threshold': mask_threshold}})
    _checkpoints(run_config)
    centroid_net, _ = load_checkpoint(run_config.centroid_checkpoint)
    instance_net, _ = load_checkpoint(run_config.instance_checkpoint)
    dataset = DatasetManager(run_config.data_dir, run_config.workers)
    tiles = [dataset.get_tile(tile)] if tile else dataset.load_tiles('test')

    out_dir = _output_dir(run_config, out, 'predict')
    exporter = get_export_manager()
    exporter.write_run_config(out_dir, run_config.echo())
    records: List[Dict[str, Any]] = []
    samples = []
    for item in tiles:
        prediction = predict_tile(centroid_net, instance_net, item, run_config.inference)
        records.append(prediction.to_record())
        exporter.export_label_map(prediction.label_map, out_dir / f'{item.tile_id}_labels.png')
        exporter.export_overlay(item, prediction.label_map, out_dir / f'{item.tile_id}_overlay.png')
        samples.append({'image': item.pixels, 'truth': rasterize_instances(item).astype(float),
                        'prediction': prediction.foreground.astype(float)})
    (out_dir / 'predictions.json').write_text(json.dumps(records, sort_keys=True, indent=2), encoding='utf-8')
    if samples:
        exporter.export_sample_grid(samples[:6], out_dir / 'samples.png')
    typer.echo(f"{len(records)} 个瓦片的预测已写入 {out_dir}")


@app.command('evaluate')
def evaluate(centroid_ckpt: CentroidCkptOpt = None, instance_ckpt: InstanceCkptOpt = None,
             data: DataOpt = None, threshold: ThresholdOpt = None, nms_iou: NmsOpt = None,
             mask_threshold: MaskThresholdOpt = None,
             workers: WorkersOpt = None, out: OutOpt = None, config: ConfigOpt = None,
             verbose: VerboseOpt = False):
    """在测试划分上做三阶段评估"""
    run_config = _prepare(config, verbose, {
        'workers': workers, 'data_dir': data, 'out_dir': out, 'centroid_checkpoint': centroid_ckpt,
        'instance_checkpoint': instance_ckpt,
        'inference': {'detection_threshold': threshold, 'nms_iou': nms_iou, 'mask_threshold': mask_threshold}})
    _checkpoints(run_config)
    dataset = DatasetManager(run_config.data_dir, run_config.workers)
    report = evaluate_pipeline(dataset, run_config.centroid_checkpoint, run_config.instance_checkpoint,
                               run_config.inference, run_config.workers, config_echo=run_config.echo())
    out_dir = _output_dir(run_config, out, 'evaluate')
    exporter = get_export_manager()
    exporter.write_run_config(out_dir, run_config.echo())
    exporter.export_report(report, out_dir)
    typer.echo(report.render_text())


@app.command('ablate')
def ablate(data: DataOpt = None,
           budget: Annotated[Optional[List[int]], typer.Option('--budget', help="转置卷积解码器预算，可重复")] = None,
           epochs: EpochsOpt = None, batch_size: BatchOpt = None, lr: LrOpt = None,
           seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None,
           config: ConfigOpt = None, verbose: VerboseOpt = False):
    """固定解码器与转置卷积解码器对比"""
    run_config = _prepare(config, verbose, {
        'seed': seed, 'workers': workers, 'data_dir': data, 'out_dir': out,
        'ablation_budgets': budget or None,
        'instance_train': _train_overrides(epochs, batch_size, lr)})
    out_dir = _output_dir(run_config, out, 'ablate')
    dataset = DatasetManager(run_config.data_dir, run_config.workers).instance_set()
    exporter = get_export_manager()
    exporter.write_run_config(out_dir, run_config.echo())
    comparison = compare_decoders(dataset, run_config.ablation_budgets, run_config.instance_train,
                                  run_config.net, out_dir, progress=True)
    exporter.export_comparison(comparison, out_dir)
    for label, loss in comparison.final_test_losses().items():
        typer.echo(f"{label}: 参数 {comparison.parameter_counts[label]}, 最终测试损失 {loss:.5f}")


@app.command('plot')
def plot(log: Annotated[List[Path], typer.Option('--log', help="loss_log.csv，可重复")],
         out: Annotated[Path, typer.Option('--out', help="输出 PNG")] = Path('loss_curves.png'),
         verbose: VerboseOpt = False):
    """根据损失日志绘制损失曲线（同时写出数据 CSV）"""
    setup_logging(verbose)
    logs = {}
    for path in log:
        if not path.is_file():
            raise ConfigError(f"损失日志不存在: {path}")
        label = path.parent.name or path.stem
        logs[label if label not in logs else str(path)] = LossLog.from_csv(path)
    target = get_export_manager().plot_loss_curves(logs, out)
    get_export_manager().write_run_config(target.parent, {'command': 'plot', 'logs': [str(p) for p in log]})
    typer.echo(f"损失曲线已写入 {target}")


def run(argv: Optional[List[str]] = None) -> int:
    """执行命令并返回退出码：成功 0，运行失败 1，用法错误 2"""
    command = typer.main.get_command(app)
    try:
        result = command.main(args=argv, prog_name='vec2instance', standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        return 1
    except Vec2InstanceError as e:
        logger.debug("运行失败", exc_info=True)
        typer.echo(f"error: {e.error_class}: {e}", err=True)
        return 1
    except Exception as e:
        logger.debug("运行失败", exc_info=True)
        typer.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == '__main__':
    sys.exit(run())
