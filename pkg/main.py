"""
heightmap-eds 主启动文件
子命令：terrain / sensor / dataset / project / pretrain / train / eval / bench
"""
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from config import RunConfig, settings, write_resolved_config
from data_pipeline import Dataset, build_dataset, build_sensor_models
from errors import EXIT_OK, EXIT_USAGE, PerceptionError
from evaluation import evaluate
from storage import formats
from tools.geometry import TERRAIN_ORDER, Pose, TerrainKind
from tools.range_image import preprocess, preprocess_with_mask, rasterize
from tools.sensors import depth_render, lidar_scan
from tools.terrain import derive_seed, generate, sampled_spec
from training import train_stage1, train_stage2

logger = logging.getLogger(__name__)
console = Console()

BENCH_BUDGET_MS = 10.0


def setup_logging(level: str):
    """根 logger 只配置一次"""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def _out_dir(path: Optional[str], name: str) -> Path:
    return Path(path) if path else Path(settings.OUTPUT_ROOT) / name


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="RunConfig JSON document")
@click.option("--jobs", type=int, default=None, help="Worker count for episode-parallel stages")
@click.option("--reproducible", is_flag=True, help="Single-threaded deterministic execution")
@click.option("--log-level", default=None, help="Override LOG_LEVEL")
@click.pass_context
def cli(ctx, config_path, jobs, reproducible, log_level):
    """robot-centric heightmap reconstruction pipeline"""
    setup_logging(log_level or settings.LOG_LEVEL)
    config = RunConfig.load(config_path)
    if jobs is not None:
        config.jobs = jobs
    elif config_path is None:
        config.jobs = settings.JOBS
    if reproducible:
        config.reproducible = True
        config.jobs = 1
    config.validate()
    ctx.obj = config


@cli.command()
@click.option("--kind", type=click.Choice([k.value for k in TERRAIN_ORDER]), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="HeightField file (.hfld)")
@click.option("--preview", type=click.Path(dir_okay=False), default=None, help="16-bit PGM preview")
@click.pass_obj
def terrain(config: RunConfig, kind, seed, out, preview):
    """Generate one terrain heightfield."""
    spec = sampled_spec(TerrainKind(kind), seed, config.terrain.footprint_m)
    field = generate(spec)
    out = Path(out)
    formats.save_heightfield(field, out, spec.to_dict())
    write_resolved_config(config, out.parent, settings.VERSION)
    if preview:
        formats.write_preview_pgm(preview, field)
    logger.info(f"Terrain {kind} (seed {seed}) written to {out}: "
                f"{field.length}x{field.width} nodes, z [{field.min_elevation:.3f}, {field.max_elevation:.3f}] m")


@cli.command()
@click.option("--terrain", "terrain_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--x", type=float, default=None, help="Base x (default: terrain center)")
@click.option("--y", type=float, default=None, help="Base y (default: terrain center)")
@click.option("--yaw", type=float, default=0.0, help="Base yaw in degrees")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def sensor(config: RunConfig, terrain_path, x, y, yaw, out):
    """Render one LiDAR range image and one depth image to PGM."""
    field = formats.load_heightfield(terrain_path)
    x_min, x_max, y_min, y_max = field.footprint
    x = (x_min + x_max) / 2.0 if x is None else x
    y = (y_min + y_max) / 2.0 if y is None else y
    pose = Pose.from_xyz_rpy(x, y, field.height_at(x, y) + config.episodes.nominal_base_height,
                             yaw=np.deg2rad(yaw))
    lidar_model, depth_model = build_sensor_models(config.sensors)
    out_dir = _out_dir(out, "sensor")
    write_resolved_config(config, out_dir, settings.VERSION)

    cloud = lidar_scan(lidar_model, pose, field)
    formats.save_point_cloud(cloud, out_dir / "lidar.pcld")
    formats.write_range_pgm(out_dir / "lidar_raw.pgm", rasterize(cloud))
    image, measured = preprocess_with_mask(cloud, config.sensors.clip_min, config.sensors.clip_max,
                                           config.sensors.max_gap)
    formats.write_range_pgm(out_dir / "lidar.pgm", image)
    depth = depth_render(depth_model, pose, field, config.sensors.clip_min, config.sensors.clip_max)
    formats.write_range_pgm(out_dir / "depth.pgm", depth)
    logger.info(f"LiDAR: {len(cloud)} returns, {measured.mean():.1%} measured pixels; "
                f"depth: {depth.valid_fraction:.1%} valid pixels -> {out_dir}")


@cli.command()
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def dataset(config: RunConfig, out):
    """Simulate episodes and write the dataset container + manifest."""
    manifest = build_dataset(config, _out_dir(out, "dataset"), jobs=config.jobs)
    splits = manifest.splits
    console.print(f"[green]dataset[/green]: {manifest.episode_count} episodes, {manifest.sample_count} samples "
                  f"(train/val/test {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])})")


@cli.command()
@click.option("--cloud", type=click.Path(exists=True, dir_okay=False), required=True, help="Point cloud (.pcld)")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Range image PGM")
@click.pass_obj
def project(config: RunConfig, cloud, out):
    """Run range-image preprocessing on a stored point cloud."""
    points = formats.load_point_cloud(cloud)
    image = preprocess(points, config.sensors.clip_min, config.sensors.clip_max, config.sensors.max_gap)
    out = Path(out)
    formats.write_range_pgm(out, image)
    write_resolved_config(config, out.parent, settings.VERSION)
    logger.info(f"Projected {len(points)} points -> {out} ({image.shape[0]}x{image.shape[1]})")


@cli.command()
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--modality", type=click.Choice(["depth", "lidar"]), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def pretrain(config: RunConfig, dataset_dir, modality, out):
    """Stage 1: denoising autoencoder pretraining for one modality."""
    result = train_stage1(Dataset(dataset_dir), modality, config, _out_dir(out, f"pretrain_{modality}"))
    console.print(f"[green]pretrain[/green] {modality}: best epoch {result.best_epoch}, "
                  f"val {result.initial_val:.5f} -> {result.best_val:.5f}, checkpoint {result.checkpoint}")


@cli.command()
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--mode", type=click.Choice(["fused", "depth_only", "lidar_only"]), default=None)
@click.option("--seq", type=click.Choice(["8", "32", "64"]), default=None, help="BPTT window length")
@click.option("--depth-ae", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Stage-1 depth checkpoint")
@click.option("--lidar-ae", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Stage-1 lidar checkpoint")
@click.option("--scratch", is_flag=True, help="Skip pretrained encoders")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def train(config: RunConfig, dataset_dir, mode, seq, depth_ae, lidar_ae, scratch, out):
    """Stage 2: supervised EDS training with truncated BPTT."""
    if scratch:
        config = dataclasses.replace(config, stage2=dataclasses.replace(config.stage2, use_pretrained=False))
    pretrained = {m: Path(p) for m, p in (("depth", depth_ae), ("lidar", lidar_ae)) if p}
    result = train_stage2(Dataset(dataset_dir), config, _out_dir(out, "train"), mode=mode,
                          sequence_length=int(seq) if seq else None, pretrained=pretrained or None)
    console.print(f"[green]train[/green]: best epoch {result.best_epoch}, val MAE "
                  f"{result.initial_val * 100:.2f} -> {result.best_val * 100:.2f} cm, checkpoint {result.checkpoint}")


@cli.command("eval")
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--checkpoint", "checkpoints", type=click.Path(exists=True, dir_okay=False), multiple=True,
              help="Stage-2 checkpoint; repeat to fill the comparison table")
@click.option("--oracle", is_flag=True, help="Evaluate the geometric fusion baseline")
@click.option("--split", type=click.Choice(["val", "test"]), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def evaluate_cmd(config: RunConfig, dataset_dir, checkpoints, oracle, split, out):
    """Evaluate checkpoints and/or the oracle on a held-out split."""
    if not checkpoints and not oracle:
        raise click.UsageError("pass --checkpoint and/or --oracle")
    report = evaluate(Dataset(dataset_dir), config, _out_dir(out, "eval"), [Path(p) for p in checkpoints],
                      oracle, split, config.jobs)

    table = Table(title=f"MAE on {report['split']} ({report['episodes']} episodes)")
    table.add_column("source", style="cyan")
    table.add_column("mode")
    table.add_column("seq", justify="right")
    table.add_column("MAE (cm)", justify="right", style="green")
    for row in report["sources"]:
        table.add_row(row["source"], str(row["modality_mode"] or "-"), str(row["sequence_length"] or "-"),
                      f"{row['mae_cm']:.2f}")
    console.print(table)
    for name, value in report["gates"].items():
        console.print(f"  {name}: {'-' if value is None else ('pass' if value else 'FAIL')}")


@cli.command()
@click.option("--scan-count", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON report")
@click.pass_obj
def bench(config: RunConfig, scan_count, seed, out):
    """Preprocessing throughput against the 10 Hz budget."""
    if scan_count < 1:
        raise click.UsageError("--scan-count must be >= 1")
    lidar_model, _ = build_sensor_models(config.sensors)
    fields = [generate(sampled_spec(kind, derive_seed(seed, i), config.terrain.footprint_m))
              for i, kind in enumerate(TERRAIN_ORDER)]
    rng = np.random.default_rng(seed)
    clouds = []
    for i in range(scan_count):
        field = fields[i % len(fields)]
        x, y = rng.uniform(-2.0, 2.0, size=2)
        pose = Pose.from_xyz_rpy(x, y, field.height_at(x, y) + config.episodes.nominal_base_height,
                                 yaw=rng.uniform(-np.pi, np.pi))
        clouds.append(lidar_scan(lidar_model, pose, field))

    timings = []
    for cloud in clouds:
        start = time.perf_counter()
        preprocess(cloud, config.sensors.clip_min, config.sensors.clip_max, config.sensors.max_gap)
        timings.append((time.perf_counter() - start) * 1000.0)
    timings = np.array(timings)
    report = {
        "scans": scan_count,
        "mean_ms": float(timings.mean()),
        "p95_ms": float(np.percentile(timings, 95)),
        "max_ms": float(timings.max()),
        "budget_ms": BENCH_BUDGET_MS,
        "within_budget": bool(timings.mean() < BENCH_BUDGET_MS),
    }

    table = Table(title="Range-image preprocessing")
    table.add_column("metric", style="cyan")
    table.add_column("value", justify="right", style="green")
    for key in ("scans", "mean_ms", "p95_ms", "max_ms", "budget_ms", "within_budget"):
        value = report[key]
        table.add_row(key, f"{value:.3f}" if isinstance(value, float) else str(value))
    console.print(table)
    if out:
        formats.write_json(out, report)
        write_resolved_config(config, Path(out).parent, settings.VERSION)


def run(argv: Optional[List[str]] = None) -> int:
    """执行 CLI 并映射退出码：0 成功，1 用法错误，2 数据错误，3 数值发散"""
    try:
        rv = cli.main(args=argv, prog_name="heightmap-eds", standalone_mode=False)
    except click.exceptions.Abort:
        console.print("Aborted")
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except PerceptionError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
