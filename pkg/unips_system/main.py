# unips_system/main.py

import contextlib
import logging
import os
import sys
from typing import List, Optional

import click

from unips_system.business_logic.ablation_service import AblationService
from unips_system.business_logic.evaluation_service import EvaluationService, export_normal_png
from unips_system.business_logic.pipeline_service import PipelineService
from unips_system.business_logic.training_service import TrainingService
from unips_system.config.schemas import RunConfig, UnipsConfig, load_config, write_resolved_config
from unips_system.config.settings import get_runs_dir
from unips_system.core.exceptions import ConfigurationError, UnipsError
from unips_system.data.database import get_db, init_db
from unips_system.network.geometry_encoder import export_features, load_trunk
from unips_system.network.inference import infer_full
from unips_system.network.model import load_model
from unips_system.simulator.dataset_generator import gen_dataset
from unips_system.simulator.scene_io import (GEO_FEATURE_FILE, load_manifest, read_normal_map, read_scene,
                                             write_geo_features, write_normal_map)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def setup_logging(verbose: int, quiet: bool):
    level = logging.WARNING if quiet else (logging.DEBUG if verbose else logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


@contextlib.contextmanager
def registry_session():
    init_db()
    sessions = get_db()
    db = next(sessions)
    try:
        yield db
    finally:
        sessions.close()


def _default_output(path: Optional[str], fallback: str) -> str:
    if path:
        return path
    logger.info(f"No --out given, writing to {fallback}")
    return fallback


def _refuse_clobber(path: str, overwrite: bool):
    if os.path.exists(path) and not overwrite:
        raise ConfigurationError(f"{path} already exists; pass --overwrite to replace it")


def _resolve(ctx: click.Context, config_path: Optional[str], output_dir: str, seed: Optional[int],
             overwrite: bool) -> UnipsConfig:
    """Load the config, apply a --seed override to every section and snapshot it into ``output_dir``."""
    config = load_config(config_path)
    if seed is not None:
        config = config.model_copy(update={
            section: getattr(config, section).model_copy(update={"seed": seed})
            for section in ("generation", "model", "pretrain", "train")
        })
    run = RunConfig(subcommand=ctx.info_name, config_path=config_path, seed=seed if seed is not None else 0,
                    output_dir=output_dir, verbosity=ctx.obj["verbosity"], overwrite=overwrite)
    write_resolved_config(run, config)
    return config


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             default=None, help="JSON config file (desk-scale defaults when omitted).")
seed_option = click.option("--seed", type=int, default=None, help="Override every section's seed.")
overwrite_option = click.option("--overwrite", is_flag=True, help="Replace existing outputs.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="Warnings and errors only.")
@click.pass_context
def cli(ctx: click.Context, verbose: int, quiet: bool):
    """Universal photometric stereo: data generation, training, evaluation and inference."""
    setup_logging(verbose, quiet)
    ctx.ensure_object(dict)
    ctx.obj["verbosity"] = -1 if quiet else verbose


@cli.command("gen-data")
@config_option
@click.option("--out", "output_dir", required=True, type=click.Path(file_okay=False))
@seed_option
@overwrite_option
@click.option("--workers", type=int, default=None, help="Worker processes (default UNIPS_THREADS).")
@click.pass_context
def gen_data_command(ctx, config_path, output_dir, seed, overwrite, workers):
    """Render a synthetic multi-illumination dataset."""
    config = load_config(config_path)
    manifest = gen_dataset(config.generation, output_dir, seed=seed, overwrite=overwrite, workers=workers)
    _resolve(ctx, config_path, output_dir, seed, overwrite)
    click.echo(f"{len(manifest.entries)} scenes written to {output_dir}")


@cli.command("pretrain-geo")
@config_option
@click.option("--data", "manifest_path", type=click.Path(exists=True), default=None)
@click.option("--out", "output_path", default=None, type=click.Path(dir_okay=False),
              help="Trunk checkpoint file to write (default <runs>/pretrain-geo/geo_trunk.ckpt).")
@seed_option
@overwrite_option
@click.pass_context
def pretrain_geo_command(ctx, config_path, manifest_path, output_path, seed, overwrite):
    """Pretrain and freeze the geometry trunk."""
    output_path = _default_output(output_path, os.path.join(get_runs_dir(), "pretrain-geo", "geo_trunk.ckpt"))
    _refuse_clobber(output_path, overwrite)
    config = _resolve(ctx, config_path, os.path.dirname(os.path.abspath(output_path)), seed, overwrite)
    with registry_session() as db:
        result = TrainingService(config, db).pretrain_geo(output_path, manifest_path=manifest_path)
    click.echo(f"Trunk saved to {result.trunk_path}: single-image MAE "
               f"{result.val_mae_before:.2f} -> {result.val_mae_after:.2f} deg")


@cli.command("train")
@config_option
@click.option("--data", "manifest_path", type=click.Path(exists=True), default=None)
@click.option("--out", "output_dir", default=None, type=click.Path(file_okay=False),
              help="Run directory (default: the --resume checkpoint's directory, else <runs>/train).")
@click.option("--trunk", "trunk_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Geometry trunk checkpoint (overrides model.geo_trunk_path).")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@seed_option
@overwrite_option
@click.pass_context
def train_command(ctx, config_path, manifest_path, output_dir, trunk_path, resume, seed, overwrite):
    """Train the full model."""
    output_dir = _default_output(output_dir, os.path.dirname(os.path.abspath(resume)) if resume
                                 else os.path.join(get_runs_dir(), "train"))
    if not resume:
        _refuse_clobber(os.path.join(output_dir, "last.ckpt"), overwrite)
    config = _resolve(ctx, config_path, output_dir, seed, overwrite)
    model_config = config.model
    if trunk_path:
        model_config = model_config.model_copy(update={"geo_trunk_path": trunk_path})
    with registry_session() as db:
        result = TrainingService(config, db).train_full(output_dir, manifest_path=manifest_path,
                                                       model_config=model_config, resume=resume)
    click.echo(f"Checkpoint {result.checkpoint_path}; best val MAE {result.best_val_mae}")


@cli.command("eval")
@config_option
@click.option("--ckpt", "checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "manifest_path", type=click.Path(exists=True), default=None)
@click.option("--k", type=int, default=None, help="Use the first K images per scene.")
@click.option("--out", "output_dir", default=None, type=click.Path(file_okay=False),
              help="Report directory (default: eval/ or eval_k<K>/ next to the checkpoint).")
@click.option("--force", is_flag=True, help="Load despite a config hash mismatch.")
@overwrite_option
@click.pass_context
def eval_command(ctx, config_path, checkpoint, manifest_path, k, output_dir, force, overwrite):
    """Mean angular error of a checkpoint on a dataset split."""
    output_dir = _default_output(output_dir, os.path.join(os.path.dirname(os.path.abspath(checkpoint)),
                                                          "eval" if k is None else f"eval_k{k}"))
    _refuse_clobber(os.path.join(output_dir, "eval_report.json"), overwrite)
    config = _resolve(ctx, config_path, output_dir, None, overwrite)
    with registry_session() as db:
        report = EvaluationService(config, db).evaluate(checkpoint, manifest_path, k=k, output_dir=output_dir,
                                                        model_config=config.model if config_path else None,
                                                        force=force)
    click.echo(f"MAE mean {report.mean:.3f} deg, median {report.median:.3f} deg over {len(report.per_scene)} scenes")


@cli.command("ablate")
@config_option
@click.option("--kind", type=click.Choice(["encoders", "projection", "kscale"]), default=None,
              help="Study to run (default ablation.kind).")
@click.option("--out", "output_dir", default=None, type=click.Path(file_okay=False),
              help="Study directory (default <runs>/ablate_<kind>).")
@overwrite_option
@click.pass_context
def ablate_command(ctx, config_path, kind, output_dir, overwrite):
    """Encoder, projection or K-scaling study."""
    config = load_config(config_path)
    kind = kind or config.ablation.kind
    output_dir = _default_output(output_dir, os.path.join(get_runs_dir(), f"ablate_{kind}"))
    _refuse_clobber(os.path.join(output_dir, f"{kind}.json"), overwrite)
    _resolve(ctx, config_path, output_dir, None, overwrite)
    with registry_session() as db:
        result = AblationService(config, db).run(kind, output_dir, overwrite=overwrite)
    failed = [c.name for c in result.checks if not c.passed]
    click.echo(f"{kind}: {len(result.checks) - len(failed)}/{len(result.checks)} trend checks hold"
               + (f" (not reproduced: {'; '.join(failed)})" if failed else ""))


@cli.command("infer")
@config_option
@click.option("--ckpt", "checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", "scene_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "output_dir", required=True, type=click.Path(file_okay=False))
@click.option("--chunk", type=int, default=None, help="Decoder pixels per chunk.")
@click.option("--apply-mask", is_flag=True, help="Zero normals outside the scene mask.")
@click.option("--force", is_flag=True, help="Load despite a config hash mismatch.")
@overwrite_option
@click.pass_context
def infer_command(ctx, config_path, checkpoint, scene_dir, output_dir, chunk, apply_mask, force, overwrite):
    """Full-resolution normal map for one scene directory."""
    _refuse_clobber(os.path.join(output_dir, "normals.f32"), overwrite)
    model_config = load_config(config_path).model if config_path else None
    model, _ = load_model(checkpoint, model_config, force=force)
    result = infer_full(read_scene(scene_dir), model, chunk=chunk, apply_mask=apply_mask)
    os.makedirs(output_dir, exist_ok=True)
    write_normal_map(result.normals, os.path.join(output_dir, "normals.f32"))
    export_normal_png(result.normals, os.path.join(output_dir, "normals.png"))
    run = RunConfig(subcommand="infer", seed=0, output_dir=output_dir, verbosity=ctx.obj["verbosity"],
                    overwrite=overwrite)
    write_resolved_config(run, UnipsConfig(model=model.config))
    click.echo(f"Normals written to {output_dir} ({result.chunks} chunk(s))")


@cli.command("export")
@click.option("--normals", "normals_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="normals.f32 map to convert to PNG.")
@click.option("--out", "output_path", default=None, type=click.Path(), help="PNG path for --normals.")
@click.option("--trunk", "trunk_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Geometry trunk used to export precomputed features.")
@click.option("--scene", "scene_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--data", "manifest_path", type=click.Path(exists=True), default=None)
@config_option
@overwrite_option
def export_command(normals_path, output_path, trunk_path, scene_dir, manifest_path, config_path, overwrite):
    """Convert a normal map to PNG, or write geometry features next to scene images."""
    if normals_path:
        output_path = output_path or os.path.splitext(normals_path)[0] + ".png"
        _refuse_clobber(output_path, overwrite)
        export_normal_png(read_normal_map(normals_path), output_path)
        click.echo(f"Wrote {output_path}")
        return
    if not trunk_path or not (scene_dir or manifest_path):
        raise click.UsageError("export needs --normals, or --trunk with --scene or --data")
    config = load_config(config_path)
    trunk = load_trunk(trunk_path, config.model)
    if scene_dir:
        directories = [scene_dir]
    else:
        manifest = load_manifest(manifest_path)
        directories = [manifest.scene_path(entry) for entry in manifest.entries]
    for directory in directories:
        target = os.path.join(directory, GEO_FEATURE_FILE)
        _refuse_clobber(target, overwrite)
        write_geo_features(export_features(trunk, read_scene(directory).images), target)
    click.echo(f"Geometry features written for {len(directories)} scene(s)")


@cli.command("smoke")
@click.option("--seed", type=int, default=0)
@click.option("--out", "output_dir", default=None, type=click.Path(file_okay=False))
def smoke_command(seed, output_dir):
    """Miniature end-to-end pipeline run."""
    with registry_session() as db:
        report = PipelineService(db).pipeline_smoke(seed, output_dir)
    for stage in report.stages:
        click.echo(f"{stage.name}: {'passed' if stage.passed else 'FAILED'} ({stage.seconds:.1f}s) {stage.detail}")
    click.echo(f"final loss {report.final_loss!r}")


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map outcomes to exit codes: 0 success, 1 failure, 2 usage."""
    try:
        result = cli.main(args=argv, prog_name="unips", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except UnipsError as e:
        logger.debug("Command failed", exc_info=True)
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        click.echo(f"error: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(dispatch())
