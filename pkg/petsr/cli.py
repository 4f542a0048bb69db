"""Command line entry point: `petsr <command>`

Every command exits with 0 on success. Failures print a one-line JSON object {"error": ..., "message": ...}
to stderr and exit with 1; usage errors print the same object after the usage text and exit with 2.
"""

import json
import logging
import os
import sys
import click
import numpy as np
from petsr import config
from petsr.common import configure_logging, ensure_folder, error_payload
from petsr.deconv import DeconvConfig, PENALTIES, penalized_deconvolve
from petsr.metrics import MetricsReport, evaluate
from petsr.nn import load_checkpoint
from petsr.phantom import LabelGrid, default_tissue_table, read_tissue_table, write_tissue_table, generate_phantom, labels_to_activity, labels_to_mr, brain_mask
from petsr.psf import make_hrplus_like_model, read_psf_model, apply_spatially_variant_blur
from petsr.recon import ScannerGeometry, simulate_scan
from petsr.volume import ImageGrid, Modality, read_volume, write_volume, gaussian_filter, resample_bicubic
from petsr import pipeline

logger = logging.getLogger(__name__)


def _psf_for(image: ImageGrid, psf_file):
    if psf_file:
        return read_psf_model(psf_file)
    return make_hrplus_like_model(axial_extent_mm=image.dims[2] * image.voxel_size_mm[2])


def _study_config(config_file, **overrides) -> pipeline.StudyConfig:
    cfg = pipeline.StudyConfig.from_json(config_file) if config_file else pipeline.StudyConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if 'methods' in changes:
        changes['methods'] = tuple(m.strip() for m in changes['methods'].split(',') if m.strip())
    cfg = cfg._replace(**changes)
    pipeline.validate_study_config(cfg)
    return cfg


@click.group()
@click.option('--log-level', default='INFO', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']), show_default=True)
def cli(log_level):
    """Super-resolution workbench for PET images"""
    configure_logging(log_level)


@cli.command()
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--dims', nargs=3, default=(64, 64, 8), show_default=True, type=int, help='nx ny nz')
@click.option('--voxel', nargs=3, default=(3.0, 3.0, 3.0), show_default=True, type=float, help='voxel size in mm')
@click.option('--variability', default=0.5, show_default=True, type=float)
@click.option('--tissue-table', type=click.Path(exists=True, dir_okay=False), help='JSON tissue table')
@click.option('--out', required=True, type=click.Path(file_okay=False))
def phantom(seed, dims, voxel, variability, tissue_table, out):
    """Generate a phantom: labels, true PET, MR and the tissue table used"""
    ensure_folder(out)
    table = read_tissue_table(tissue_table) if tissue_table else default_tissue_table()
    labels = generate_phantom(seed, dims, voxel, variability)
    write_volume(labels.to_grid(), os.path.join(out, 'labels'))
    write_volume(labels_to_activity(labels, table), os.path.join(out, 'pet'))
    write_volume(labels_to_mr(labels, table, seed), os.path.join(out, 'mr'))
    write_tissue_table(table, os.path.join(out, 'tissue_table.json'))


@cli.command()
@click.argument('activity', type=click.Path())
@click.option('--scanner', default='LR-like', show_default=True, type=click.Choice(sorted(config.scanner_presets)))
@click.option('--counts', default=config.counts_per_slice, show_default=True, type=float, help='counts per slice')
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--iterations', default=config.osem_iterations, show_default=True, type=int)
@click.option('--subsets', default=config.osem_subsets, show_default=True, type=int)
@click.option('--recon-dims', nargs=2, type=int, default=None, help='reconstruction grid nx ny')
@click.option('--recon-voxel', nargs=2, type=float, default=None, help='reconstruction voxel size in mm')
@click.option('--psf', 'psf_file', type=click.Path(exists=True, dir_okay=False), help='blur the reconstruction with this PSF model')
@click.option('--blur/--no-blur', default=False, help='blur with the default spatially-variant PSF')
@click.option('--post-filter', type=float, default=None, help='Gaussian post-filter FWHM in mm')
@click.option('--upsample/--no-upsample', default=False, help='resample the result onto the activity grid')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
def simulate(activity, scanner, counts, seed, iterations, subsets, recon_dims, recon_voxel, psf_file, blur, post_filter, upsample, out):
    """Simulate a scan of ACTIVITY: projection, Poisson counts, OSEM"""
    truth = read_volume(activity)
    geometry = ScannerGeometry.from_preset(scanner)
    image = simulate_scan(truth, geometry, counts, seed, recon_dims or None, recon_voxel or None, iterations, subsets)
    if psf_file or blur:
        image = apply_spatially_variant_blur(image, _psf_for(image, psf_file))
    if post_filter:
        image = gaussian_filter(image, post_filter)
    if upsample:
        image = resample_bicubic(image, truth.dims, truth.voxel_size_mm)
    write_volume(image, out)


@cli.command()
@click.argument('lr', type=click.Path())
@click.option('--penalty', default='TV', show_default=True, type=click.Choice(PENALTIES))
@click.option('--beta', default=0.01, show_default=True, type=float)
@click.option('--mr', type=click.Path(), help='MR volume (required for JE)')
@click.option('--psf', 'psf_file', type=click.Path(exists=True, dir_okay=False))
@click.option('--max-iters', default=config.deconv_max_iters, show_default=True, type=int)
@click.option('--out', required=True, type=click.Path(dir_okay=False))
def deconv(lr, penalty, beta, mr, psf_file, max_iters, out):
    """Penalised deconvolution of an LR PET volume"""
    image = read_volume(lr)
    mr_image = read_volume(mr) if mr else None
    cfg = DeconvConfig(penalty=penalty, beta=beta, max_iters=max_iters)
    write_volume(penalized_deconvolve(image, _psf_for(image, psf_file), mr_image, cfg), out)


@cli.command()
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), help='study config JSON')
@click.option('--variant', required=True, type=click.Choice(config.cnn_methods))
@click.option('--seed', type=int, default=None)
@click.option('--epochs', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
def train(config_file, variant, seed, epochs, out):
    """Train one network variant on the training subjects of a study"""
    cfg = _study_config(config_file, seed=seed, epochs=epochs, output_dir=out)
    train_cases, val_cases = pipeline.make_study_dataset(cfg)
    folder = ensure_folder(os.path.join(ensure_folder(cfg.output_dir), 'checkpoints'))
    pipeline.train_variant(cfg, variant, train_cases, val_cases, folder)


@cli.command()
@click.argument('checkpoint', type=click.Path())
@click.option('--lr', required=True, type=click.Path())
@click.option('--mr', type=click.Path(), help='MR volume (required by variants with an MR input)')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
def infer(checkpoint, lr, mr, out):
    """Super-resolve an LR PET volume with a trained network"""
    lr_image = read_volume(lr)
    if mr:
        mr_image = read_volume(mr)
    else:
        mr_image = lr_image.like(np.zeros_like(lr_image.data), modality=Modality.MR)
    net = load_checkpoint(checkpoint)[0]
    if config.HR_MR in net.spec.inputs and not mr:
        raise click.UsageError(f"variant {net.spec.variant} needs --mr")
    write_volume(pipeline.infer(net, pipeline.SubjectCase(0, lr_image, mr_image)), out)


@cli.command(name='evaluate')
@click.argument('estimate', type=click.Path())
@click.argument('reference', type=click.Path())
@click.option('--labels', type=click.Path(), help='label volume; restricts the metrics to the head')
@click.option('--method', default='estimate', show_default=True)
@click.option('--reference-name', default='reference', show_default=True)
@click.option('--out', type=click.Path(file_okay=False), help='folder for report.csv/report.json')
def evaluate_command(estimate, reference, labels, method, reference_name, out):
    """PSNR, SSIM and RMSE of ESTIMATE against REFERENCE"""
    mask = brain_mask(LabelGrid.from_grid(read_volume(labels))) if labels else None
    values = evaluate(read_volume(estimate), read_volume(reference), mask)
    report = MetricsReport.from_per_subject([{'method': method, 'reference': reference_name, 'subject': 0, 'status': 'ok', **values}],
                                            {'estimate': estimate, 'reference': reference})
    if out:
        ensure_folder(out)
        report.to_csv(os.path.join(out, 'report.csv'))
        report.to_json(os.path.join(out, 'report.json'))
    click.echo(json.dumps(report.to_dict()['rows'][0], sort_keys=True))


@cli.command()
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), help='study config JSON')
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--methods', default=None, help='comma separated, e.g. LR,TV,S1')
@click.option('--epochs', type=int, default=None)
def study(config_file, seed, out, methods, epochs):
    """Run a full study and write its report"""
    cfg = _study_config(config_file, seed=seed, output_dir=out, methods=methods, epochs=epochs)
    report = pipeline.run_study(cfg)
    click.echo(report.format_table().to_string())


def main(argv=None):
    try:
        cli.main(args=argv, prog_name='petsr', standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as ex:
        ex.show()
        click.echo(json.dumps({'error': type(ex).__name__, 'message': ex.format_message()}), err=True)
        sys.exit(ex.exit_code)
    except Exception as ex:
        logger.error("Error '%s' while processing '%s'", ex, ' '.join(argv if argv is not None else sys.argv[1:]), exc_info=True)
        click.echo(error_payload(ex), err=True)
        sys.exit(1)
    return 0


if __name__ == "__main__":
    main()
