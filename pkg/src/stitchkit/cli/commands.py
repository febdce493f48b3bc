"""CLI commands for stitchkit."""

from pathlib import Path
from typing import Any, Dict, Optional, get_args

import click

from ..api import (
    MODEL_FILE,
    OFFSETS_FILE,
    REPORT_JSON,
    REPORT_TEXT,
    SAMPLES_CSV,
    TRACE_FILE,
    StitchPipeline,
    default_manifest,
)
from ..exceptions import (
    ConfigurationError,
    NumericError,
    StitchKitError,
    ValidationError,
)
from ..reconstruct import Variant
from ..utils.config import PipelineConfig, apply_overrides, load_config
from ..utils.log import configure_logging
from .interface import (
    progress_tui,
    show_error_tui,
    show_manifest_tui,
    show_offsets_tui,
    show_outputs_tui,
    show_report_tui,
    show_training_tui,
    written_files,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULTS = PipelineConfig()
VARIANTS = list(get_args(Variant))

existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
output_dir = click.Path(file_okay=False, path_type=Path)


def exit_code_for(error: Exception) -> int:
    """Map a library error to the process exit code."""
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, (ConfigurationError, ValidationError)):
        return EXIT_USAGE
    return EXIT_DATA


def _fail(ctx: click.Context, error: StitchKitError, action: str, hint: str) -> None:
    show_error_tui(f"{action} failed: {error}", hint)
    ctx.exit(exit_code_for(error))


def shared_options(command):
    """Attach the per-command --config and --seed options; they override the group values."""
    command = click.option(
        "--seed", "command_seed", type=int, default=None, show_default=str(DEFAULTS.seed), help="Root random seed"
    )(command)
    return click.option(
        "--config", "-c", "command_config", type=click.Path(dir_okay=False), help="Configuration file path (YAML or JSON)"
    )(command)


def _use_command_options(ctx: click.Context, config: Optional[str], seed: Optional[int]) -> None:
    if config is None and seed is None:
        return
    seed = seed if seed is not None else ctx.obj["seed"]
    try:
        base = load_config(config) if config is not None else ctx.obj["config"]
        ctx.obj["config"] = apply_overrides(base, {"seed": seed})
    except StitchKitError as e:
        _fail(ctx, e, "Loading configuration", "Fix the configuration file or the --seed value.")


def _pipeline(ctx: click.Context, overrides: Dict[str, Any]) -> StitchPipeline:
    """Pipeline for one command; flag values override the loaded configuration."""
    try:
        config = apply_overrides(ctx.obj["config"], overrides)
    except ConfigurationError as e:
        _fail(ctx, e, "Configuration", "Check the flag values against the configuration schema.")
    return StitchPipeline(config)


def _out(ctx: click.Context, out: Optional[Path]) -> Path:
    return out if out is not None else ctx.obj["config"].output_dir


def _manifest(ctx: click.Context, manifest: Optional[Path]) -> Path:
    path = manifest if manifest is not None else ctx.obj["config"].data.manifest
    if path is None:
        raise click.UsageError("Pass --manifest or set data.manifest in the configuration")
    if not Path(path).is_file():
        raise click.UsageError(f"Manifest {path} does not exist")
    return Path(path)


@click.group()
@click.option("--config", "-c", type=click.Path(dir_okay=False), help="Configuration file path (YAML or JSON)")
@click.option("--verbose", "-v", is_flag=True, help="Verbose output")
@click.option("--quiet", "-q", is_flag=True, help="Quiet mode")
@click.option("--seed", type=int, default=None, show_default=str(DEFAULTS.seed), help="Root random seed")
@click.pass_context
def cli(ctx, config, verbose, quiet, seed):
    """stitchkit: unsupervised two-stage image stitching.

    Coarse alignment by photometric optimization of four corner offsets, then
    low/high-resolution reconstruction of the stitched image.

    Exit codes: 0 success, 1 usage or configuration error, 2 data error,
    3 numeric failure. Paths passed as flags are checked before a command
    runs, so a missing one is a usage error; unreadable images and files
    named inside a manifest are data errors.
    """
    configure_logging(verbose=verbose, quiet=quiet)
    ctx.ensure_object(dict)
    ctx.obj["quiet"] = quiet
    ctx.obj["seed"] = seed
    try:
        ctx.obj["config"] = apply_overrides(load_config(config), {"seed": seed})
    except ConfigurationError as e:
        _fail(ctx, e, "Loading configuration", "Fix the configuration file or pass --config.")


@cli.command("gen-synth")
@shared_options
@click.option("--source", type=existing_file, help="Source photograph (procedural textures when omitted)")
@click.option("--n", "count", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS.synth.count), help="Number of pairs")
@click.option("--disturbance", type=click.FloatRange(min=0.0), default=None, show_default=str(DEFAULTS.synth.disturbance), help="Maximum corner disturbance (px)")
@click.option("--crop-size", type=click.IntRange(min=32), default=None, show_default=str(DEFAULTS.synth.crop_size), help="Square crop size (px)")
@click.option("--jitter/--no-jitter", default=None, show_default=str(DEFAULTS.synth.jitter), help="Photometric gain/bias on targets")
@click.option("--sweep", is_flag=True, help="One dataset per synth.disturbance_sweep entry")
@click.option("--out", type=output_dir, default=None, help="Dataset directory")
@click.pass_context
def gen_synth(ctx, command_config, command_seed, source, count, disturbance, crop_size, jitter, sweep, out):
    """Generate a synthetic dataset with known ground-truth offsets."""
    _use_command_options(ctx, command_config, command_seed)
    pipeline = _pipeline(
        ctx,
        {
            "synth.count": count,
            "synth.disturbance": disturbance,
            "synth.crop_size": crop_size,
            "synth.jitter": jitter,
        },
    )
    out = _out(ctx, out)
    try:
        if sweep:
            manifests = pipeline.generate_sweep(out, source_path=source)
        else:
            manifests = {"": pipeline.generate(out, source_path=source)}
    except StitchKitError as e:
        _fail(ctx, e, "Synthetic generation", "Use a larger source image or a smaller disturbance/crop.")
        return
    if not ctx.obj["quiet"]:
        for manifest in manifests.values():
            show_manifest_tui(manifest)
        show_outputs_tui("Dataset written", [default_manifest(out / name) for name in manifests])


@cli.command()
@shared_options
@click.option("--ref", type=existing_file, help="Reference image")
@click.option("--target", type=existing_file, help="Target image")
@click.option("--manifest", type=existing_file, help="Align every pair of a manifest instead")
@click.option("--levels", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS.pyramid.levels), help="Pyramid levels")
@click.option("--iterations", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS.pyramid.iterations_per_level), help="Iterations per level")
@click.option("--out", type=output_dir, default=None, help="Output directory")
@click.pass_context
def align(ctx, command_config, command_seed, ref, target, manifest, levels, iterations, out):
    """Estimate the aligning homography and write offsets, warps and masks."""
    _use_command_options(ctx, command_config, command_seed)
    if manifest is None and (ref is None or target is None):
        raise click.UsageError("Pass --ref and --target, or --manifest")
    pipeline = _pipeline(ctx, {"pyramid.levels": levels, "pyramid.iterations_per_level": iterations})
    out = _out(ctx, out)
    quiet = ctx.obj["quiet"]
    try:
        if manifest is not None:
            with progress_tui("Aligning", quiet) as progress:
                results = pipeline.align_manifest(manifest, out, progress)
            if not quiet:
                show_outputs_tui("Alignments written", [out / rid / OFFSETS_FILE for rid in results])
            return
        result = pipeline.align_files(ref, target, out)
    except StitchKitError as e:
        _fail(ctx, e, "Alignment", "Check that both images have the same size and enough texture.")
        return
    if not quiet:
        show_offsets_tui(result)
        show_outputs_tui("Alignment written", [out / OFFSETS_FILE])


@cli.command()
@shared_options
@click.option("--ref", type=existing_file, required=True, help="Reference image")
@click.option("--target", type=existing_file, required=True, help="Target image")
@click.option("--checkpoint", type=existing_file, help="Trained model (fresh initialization when omitted)")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, show_default=DEFAULTS.branch.variant, help="Reconstruction variant (ablations drop the named loss terms)")
@click.option("--out", type=output_dir, default=None, help="Output directory")
@click.pass_context
def stitch(ctx, command_config, command_seed, ref, target, checkpoint, variant, out):
    """Align a pair and reconstruct the stitched image."""
    _use_command_options(ctx, command_config, command_seed)
    pipeline = _pipeline(ctx, {"branch.variant": variant})
    out = _out(ctx, out)
    try:
        output = pipeline.stitch_files(ref, target, out, checkpoint)
    except StitchKitError as e:
        _fail(ctx, e, "Stitching", "Check the checkpoint and the input images.")
        return
    if not ctx.obj["quiet"]:
        show_offsets_tui(output.alignment)
        show_outputs_tui(
            "Stitched images written",
            written_files(out, ["s_lr.png", "s_hr.png", "fused.png", OFFSETS_FILE]),
        )


@cli.command()
@shared_options
@click.option("--manifest", type=existing_file, help="Training manifest (defaults to data.manifest)")
@click.option("--checkpoint", type=existing_file, help="Resume from this model")
@click.option("--epochs", type=click.IntRange(min=1), default=None, show_default=str(DEFAULTS.train.epochs), help="Training epochs")
@click.option("--max-iterations", type=click.IntRange(min=1), default=None, help="Stop after this many iterations")
@click.option("--learning-rate", type=click.FloatRange(min=0.0, min_open=True), default=None, show_default=str(DEFAULTS.optimizer.learning_rate), help="Initial Adam learning rate")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, show_default=DEFAULTS.branch.variant, help="Reconstruction variant (ablations drop the named loss terms)")
@click.option("--out", type=output_dir, default=None, help="Output directory")
@click.pass_context
def train(ctx, command_config, command_seed, manifest, checkpoint, epochs, max_iterations, learning_rate, variant, out):
    """Train both reconstruction branches jointly."""
    _use_command_options(ctx, command_config, command_seed)
    manifest = _manifest(ctx, manifest)
    pipeline = _pipeline(
        ctx,
        {
            "train.epochs": epochs,
            "train.max_iterations": max_iterations,
            "optimizer.learning_rate": learning_rate,
            "branch.variant": variant,
        },
    )
    out = _out(ctx, out)
    try:
        with progress_tui("Training", ctx.obj["quiet"]) as progress:
            _, trace = pipeline.train_manifest(manifest, out, checkpoint, progress)
    except StitchKitError as e:
        _fail(ctx, e, "Training", "Lower the learning rate or check the dataset.")
        return
    if not ctx.obj["quiet"]:
        show_training_tui(trace)
        show_outputs_tui("Training outputs", written_files(out, [MODEL_FILE, TRACE_FILE]))


@cli.command("eval")
@shared_options
@click.option("--manifest", type=existing_file, help="Dataset manifest (defaults to data.manifest)")
@click.option("--results", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Directory of <id>/offsets.json (aligns on the fly when omitted)")
@click.option("--metric", type=click.Choice(["rmse", "psnr", "ssim"]), default=None, show_default=DEFAULTS.eval.metric, help="Metric to bucket")
@click.option("--out", type=output_dir, default=None, help="Report directory (defaults to --results)")
@click.pass_context
def evaluate(ctx, command_config, command_seed, manifest, results, metric, out):
    """Score alignments and write a bucketed report."""
    _use_command_options(ctx, command_config, command_seed)
    manifest = _manifest(ctx, manifest)
    if results is None:
        results = ctx.obj["config"].data.results
    pipeline = _pipeline(ctx, {"eval.metric": metric})
    if out is None:
        out = results if results is not None else _out(ctx, None)
    try:
        with progress_tui("Evaluating", ctx.obj["quiet"]) as progress:
            report = pipeline.evaluate(manifest, out, results, progress)
    except StitchKitError as e:
        _fail(ctx, e, "Evaluation", "Evaluation needs at least 10 pairs with alignment results.")
        return
    if not ctx.obj["quiet"]:
        show_report_tui(report)
        show_outputs_tui("Report written", written_files(out, [REPORT_JSON, REPORT_TEXT, SAMPLES_CSV]))


@cli.command("dump-features")
@shared_options
@click.option("--ref", type=existing_file, required=True, help="Reference image")
@click.option("--target", type=existing_file, required=True, help="Target image")
@click.option("--checkpoint", type=existing_file, help="Trained model")
@click.option("--out", type=output_dir, default=None, help="Output directory")
@click.pass_context
def dump_features(ctx, command_config, command_seed, ref, target, checkpoint, out):
    """Write one PNG per LR-branch layer activation."""
    _use_command_options(ctx, command_config, command_seed)
    pipeline = _pipeline(ctx, {})
    out = _out(ctx, out)
    try:
        paths = pipeline.dump_features(ref, target, out, checkpoint)
    except StitchKitError as e:
        _fail(ctx, e, "Feature dump", "Check the checkpoint and the input images.")
        return
    if not ctx.obj["quiet"]:
        show_outputs_tui(f"{len(paths)} feature maps written", [out])
