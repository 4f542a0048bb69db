import json
import os
import shutil
import numpy as np
import pytest
from click.testing import CliRunner
from petsr.cli import cli, main
from petsr.nn import build_network, network_spec, save_checkpoint
from petsr.volume import read_volume

TEST_FOLDER = "tests/temp_cli"


@pytest.fixture(scope='module')
def folder():
    os.mkdir(TEST_FOLDER)
    yield TEST_FOLDER
    shutil.rmtree(TEST_FOLDER)


@pytest.fixture(scope='module')
def phantom_dir(folder):
    out = os.path.join(folder, 'phantom')
    result = CliRunner().invoke(cli, ['phantom', '--seed', '4', '--dims', '32', '32', '2', '--out', out])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope='module')
def lr_file(folder, phantom_dir):
    out = os.path.join(folder, 'lr')
    result = CliRunner().invoke(cli, ['simulate', os.path.join(phantom_dir, 'pet'), '--counts', '1e4', '--iterations', '1',
                                      '--subsets', '4', '--recon-dims', '16', '16', '--recon-voxel', '6', '6', '--blur',
                                      '--upsample', '--out', out])
    assert result.exit_code == 0, result.output
    return out


def test_phantom_command(phantom_dir):
    for name in ('labels.raw', 'labels.json', 'pet.raw', 'mr.raw', 'tissue_table.json'):
        assert os.path.exists(os.path.join(phantom_dir, name))
    assert read_volume(os.path.join(phantom_dir, 'pet')).dims == (32, 32, 2)


def test_simulate_command(lr_file, phantom_dir):
    lr = read_volume(lr_file)
    assert lr.dims == (32, 32, 2)
    assert lr.voxel_size_mm == read_volume(os.path.join(phantom_dir, 'pet')).voxel_size_mm
    assert lr.data.min() >= 0


def test_deconv_and_evaluate_commands(folder, lr_file, phantom_dir):
    out = os.path.join(folder, 'tv')
    runner = CliRunner()
    result = runner.invoke(cli, ['deconv', lr_file, '--penalty', 'TV', '--beta', '0.01', '--max-iters', '2', '--out', out])
    assert result.exit_code == 0, result.output

    result = runner.invoke(cli, ['evaluate', out, os.path.join(phantom_dir, 'pet'), '--labels', os.path.join(phantom_dir, 'labels'),
                                 '--method', 'TV', '--reference-name', 'true', '--out', os.path.join(folder, 'tv_report')])
    assert result.exit_code == 0, result.output
    row = json.loads(result.output)
    assert row['method'] == 'TV'
    assert row['status'] == 'ok'
    assert set(row) >= {'psnr', 'ssim', 'rmse'}
    assert os.path.exists(os.path.join(folder, 'tv_report', 'report.csv'))


def test_evaluate_an_image_against_itself(phantom_dir):
    pet = os.path.join(phantom_dir, 'pet')
    result = CliRunner().invoke(cli, ['evaluate', pet, pet])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)['psnr'] == 'inf'


def test_je_deconv_needs_mr(folder, lr_file):
    with pytest.raises(SystemExit) as raised:
        main(['deconv', lr_file, '--penalty', 'JE', '--out', os.path.join(folder, 'je')])
    assert raised.value.code == 1


def test_infer_command(folder, lr_file, phantom_dir):
    checkpoint = os.path.join(folder, 'S2')
    save_checkpoint(build_network(network_spec('S2', filters=4), seed=0), checkpoint, seed=0, epoch=0)
    out = os.path.join(folder, 'sr')
    runner = CliRunner()

    missing_mr = runner.invoke(cli, ['infer', checkpoint, '--lr', lr_file, '--out', out])
    assert missing_mr.exit_code == 2

    result = runner.invoke(cli, ['infer', checkpoint, '--lr', lr_file, '--mr', os.path.join(phantom_dir, 'mr'), '--out', out])
    assert result.exit_code == 0, result.output
    np.testing.assert_allclose(read_volume(out).data, read_volume(lr_file).data, rtol=1e-12)


def test_study_command(folder):
    config_file = os.path.join(folder, 'study.json')
    settings = {'n_subjects': 3, 'n_train': 2, 'phantom_dims': [32, 32, 1], 'n_angles': 16, 'osem_subsets': 4,
                'osem_iterations': 1, 'counts_per_slice': 1e5, 'lr_recon_dims': [16, 16], 'patch_size': 16,
                'patch_stride': 16, 'panels': False}
    with open(config_file, 'w', encoding='UTF-8') as f:
        json.dump(settings, f)
    out = os.path.join(folder, 'study')

    result = CliRunner().invoke(cli, ['study', '--config', config_file, '--methods', 'LR', '--out', out])
    assert result.exit_code == 0, result.output
    assert 'PSNR' in result.output
    assert os.path.exists(os.path.join(out, 'report.json'))


def test_train_command(folder):
    config_file = os.path.join(folder, 'train.json')
    settings = {'n_subjects': 3, 'n_train': 2, 'phantom_dims': [32, 32, 1], 'n_angles': 16, 'osem_subsets': 4,
                'osem_iterations': 1, 'counts_per_slice': 1e5, 'lr_recon_dims': [16, 16], 'patch_size': 16,
                'patch_stride': 16, 'filters': 4, 'batch_size': 4}
    with open(config_file, 'w', encoding='UTF-8') as f:
        json.dump(settings, f)
    out = os.path.join(folder, 'train')

    result = CliRunner().invoke(cli, ['train', '--config', config_file, '--variant', 'S1', '--epochs', '1', '--out', out])
    assert result.exit_code == 0, result.output
    for name in ('S1.json', 'S1.bin', 'S1_history.csv'):
        assert os.path.exists(os.path.join(out, 'checkpoints', name))


def test_failure_prints_a_json_error(folder, capsys):
    with pytest.raises(SystemExit) as raised:
        main(['deconv', os.path.join(folder, 'does_not_exist'), '--out', os.path.join(folder, 'never')])

    assert raised.value.code == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['error'] == 'VolumeFormatError'


def test_usage_errors_exit_with_2(capsys):
    with pytest.raises(SystemExit) as raised:
        main(['deconv'])
    assert raised.value.code == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['error'] == 'MissingParameter'
    assert 'LR' in error['message']
