import json

import pandas as pd
import pytest

import main
from main import run
from training_manager import LossLog


def read_bytes_tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob('*')) if p.is_file()}


def test_evaluate_requires_checkpoints(tmp_path, capsys):
    assert run(['evaluate', '--data', str(tmp_path), '--out', str(tmp_path / 'out')]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_missing_checkpoint_file(synthetic_dir, tmp_path, capsys):
    code = run(['evaluate', '--data', str(synthetic_dir), '--centroid-ckpt', str(tmp_path / 'c.h5'),
                '--instance-ckpt', str(tmp_path / 'i.h5'), '--out', str(tmp_path / 'out')])
    assert code == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert run(['synth', '--no-such-flag']) == 2


def test_invalid_config_value(tmp_path, capsys):
    assert run(['synth', '--workers', '0', '--out', str(tmp_path)]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_synth_is_reproducible(tmp_path):
    args = ['synth', '--tiles', '4', '--seed', '0', '--out', str(tmp_path / 'data')]
    assert run(args) == 0
    first = read_bytes_tree(tmp_path / 'data')
    assert 'manifest.json' in first
    assert 'run_config.json' in first
    assert run(args) == 0
    assert read_bytes_tree(tmp_path / 'data') == first


def test_synth_reports_collisions(tmp_path, capsys):
    assert run(['synth', '--tiles', '3', '--out', str(tmp_path / 'data')]) == 0
    assert '质心单元碰撞: 训练' in capsys.readouterr().out


def test_train_instance(synthetic_dir, tmp_path):
    out = tmp_path / 'instance'
    assert run(['train-instance', '--data', str(synthetic_dir), '--epochs', '5', '--batch-size', '16',
                '--out', str(out)]) == 0
    assert (out / 'last.h5').is_file()
    assert len(LossLog.from_csv(out / 'loss_log.csv')) == 5
    assert (out / 'loss_curve.png').is_file()
    echo = json.loads((out / 'run_config.json').read_text(encoding='utf-8'))
    assert echo['instance_train']['epochs'] == 5
    assert echo['net']['seed'] == 0


def test_unknown_decoder(synthetic_dir, tmp_path, capsys):
    assert run(['train-instance', '--data', str(synthetic_dir), '--decoder', 'unet', '--out', str(tmp_path)]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_plot(tmp_path):
    log = LossLog()
    log.append(1, 0.4, 0.5, 0.1)
    log.append(2, 0.3, 0.45, 0.1)
    path = log.to_csv(tmp_path / 'run_a' / 'loss_log.csv')
    target = tmp_path / 'plots' / 'curves.png'
    assert run(['plot', '--log', str(path), '--out', str(target)]) == 0
    assert target.is_file()
    assert set(pd.read_csv(target.with_suffix('.csv'))['run']) == {'run_a'}


def test_plot_malformed_log(tmp_path, capsys):
    path = tmp_path / 'run_a' / 'loss_log.csv'
    path.parent.mkdir()
    path.write_text('a,b\n1,2\n', encoding='utf-8')
    assert run(['plot', '--log', str(path), '--out', str(tmp_path / 'x.png')]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_config_file_must_be_object(tmp_path, capsys):
    config = tmp_path / 'config.json'
    config.write_text('[1, 2]', encoding='utf-8')
    assert run(['synth', '--config', str(config), '--out', str(tmp_path / 'data')]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_nested_config_section_must_be_object(tmp_path, capsys):
    config = tmp_path / 'config.json'
    config.write_text('{"inference": 3}', encoding='utf-8')
    assert run(['evaluate', '--config', str(config), '--threshold', '0.4']) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


def test_unexpected_error_is_one_line(tmp_path, capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise OSError('disk full')

    monkeypatch.setattr(main, 'write_synthetic_dataset', broken)
    assert run(['synth', '--tiles', '1', '--out', str(tmp_path / 'data')]) == 1
    err = capsys.readouterr().err
    assert 'error: OSError: disk full' in err
    assert 'Traceback' not in err


def test_plot_missing_log(tmp_path, capsys):
    assert run(['plot', '--log', str(tmp_path / 'missing.csv'), '--out', str(tmp_path / 'x.png')]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err


@pytest.fixture(scope='module')
def trained_dir(synthetic_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp('trained')
    assert run(['train-centroid', '--data', str(synthetic_dir), '--epochs', '1', '--batch-size', '3',
                '--out', str(out / 'centroid')]) == 0
    assert run(['train-instance', '--data', str(synthetic_dir), '--epochs', '2', '--batch-size', '16',
                '--out', str(out / 'instance')]) == 0
    return out


def test_predict_and_evaluate(synthetic_dir, trained_dir, tmp_path):
    checkpoints = ['--centroid-ckpt', str(trained_dir / 'centroid' / 'last.h5'),
                   '--instance-ckpt', str(trained_dir / 'instance' / 'last.h5')]
    assert run(['predict', '--data', str(synthetic_dir), '--tile', 'synth_00000', *checkpoints,
                '--out', str(tmp_path / 'predict')]) == 0
    records = json.loads((tmp_path / 'predict' / 'predictions.json').read_text(encoding='utf-8'))
    assert [r['tile_id'] for r in records] == ['synth_00000']
    assert (tmp_path / 'predict' / 'synth_00000_labels.png').is_file()
    assert (tmp_path / 'predict' / 'synth_00000_overlay.png').is_file()

    assert run(['evaluate', '--data', str(synthetic_dir), *checkpoints, '--mask-threshold', '0.6',
                '--out', str(tmp_path / 'eval')]) == 0
    report = json.loads((tmp_path / 'eval' / 'eval_report.json').read_text(encoding='utf-8'))
    assert set(report['stages']) == {'centroid', 'instance', 'overall'}
    assert len(report['tiles']) == 3
    assert report['config']['inference']['nms_iou'] == 0.5
    assert report['config']['inference']['mask_threshold'] == 0.6


def test_mask_threshold_out_of_range(synthetic_dir, tmp_path, capsys):
    assert run(['predict', '--data', str(synthetic_dir), '--mask-threshold', '1.5',
                '--out', str(tmp_path)]) == 1
    assert 'error: ConfigError:' in capsys.readouterr().err
