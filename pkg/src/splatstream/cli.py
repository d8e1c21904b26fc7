"""Command line entry point: gen / train / render / eval / inspect."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ABLATIONS, ConfigError, load_config
from .geometry import Camera
from .io_utils import save_f32, save_png, write_json
from .pipeline import (
    inspect_stream, load_scene, render_playback, run_eval, run_training,
    write_scene,
)
from .scenes import SceneSpec, generate_scene


def _fail(msg: str, code: int = 1):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Streamed LoD Gaussian scene reconstruction toolkit."""


def _config_options(fn):
    fn = click.option(
        "--config", "config_path", type=click.Path(), default=None,
        help="JSON config file with flat dotted keys.",
    )(fn)
    fn = click.option(
        "--set", "overrides", multiple=True, metavar="KEY=VALUE",
        help="Override one config key (value parsed as JSON).",
    )(fn)
    fn = click.option("--seed", type=int, default=None, help="Override seed.")(fn)
    return fn


def _load_runcfg(config_path, overrides, seed, ablate=(), variant=None):
    try:
        items = list(overrides)
        if seed is not None:
            items.append(f"seed={seed}")
        if variant is not None:
            items.append(f'variant="{variant}"')
        return load_config(config_path, items, list(ablate))
    except ConfigError as e:
        raise click.UsageError(str(e))
    except FileNotFoundError as e:
        raise click.UsageError(str(e))


@main.command()
@click.argument("spec_path", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
def gen(spec_path, out_dir, seed):
    """Generate a synthetic scene directory from a scene spec JSON."""
    if not Path(spec_path).exists():
        raise click.UsageError(f"spec not found: {spec_path}")
    try:
        spec = SceneSpec.from_json(spec_path)
        scene = generate_scene(spec, seed=seed)
    except (ValueError, KeyError) as e:
        raise click.UsageError(str(e))
    try:
        manifest = write_scene(scene, Path(out_dir))
    except OSError as e:
        _fail(str(e))
    click.echo(f"scene written to {out_dir} ({scene.spec.frames} frames, "
               f"{scene.spec.n_cameras} views, hash {manifest['hash'][:12]})")


@main.command()
@click.argument("scene_dir", type=click.Path())
@click.argument("out_dir", type=click.Path())
@_config_options
@click.option("--variant", type=click.Choice(["standard", "star"]), default=None)
@click.option("--ablate", multiple=True, type=click.Choice(ABLATIONS),
              help="Disable one component (repeatable).")
def train(scene_dir, out_dir, config_path, overrides, seed, variant, ablate):
    """Train frame 0, then stream the remaining frames."""
    if not (Path(scene_dir) / "meta.json").exists():
        raise click.UsageError(f"scene directory not found: {scene_dir}")
    runcfg = _load_runcfg(config_path, overrides, seed, ablate, variant)
    try:
        scene = load_scene(scene_dir)
        out = run_training(scene, runcfg, Path(out_dir))
    except click.ClickException:
        raise
    except Exception as e:  # runtime failure -> exit 1 with context
        _fail(f"training failed: {e}")
    last = out["rows"][-1]
    click.echo(f"trained {len(out['rows'])} frames; "
               f"final train PSNR {last[3]:.2f} dB; run dir {out_dir}")


@main.command()
@click.argument("checkpoint", type=click.Path())
@click.argument("stream_dir", type=click.Path())
@click.argument("camera_json", type=click.Path())
@click.argument("t", type=int)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Output PNG path (a matching .f32 dump is written too).")
@_config_options
def render(checkpoint, stream_dir, camera_json, t, out_path,
           config_path, overrides, seed):
    """Playback render: apply residual frames 1..t, then rasterize."""
    for p in (checkpoint, camera_json):
        if not Path(p).exists():
            raise click.UsageError(f"not found: {p}")
    runcfg = _load_runcfg(config_path, overrides, seed)
    with open(camera_json) as f:
        cam = Camera.from_dict(json.load(f))
    try:
        img = render_playback(
            checkpoint, stream_dir, cam, t, runcfg.render_settings()
        )
    except FileNotFoundError as e:
        _fail(str(e))
    except Exception as e:
        _fail(f"render failed: {e}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_png(out_path, img)
    save_f32(out_path.with_suffix(".f32"), img)
    click.echo(f"rendered frame {t} -> {out_path}")


@main.command("eval")
@click.argument("scene_dir", type=click.Path())
@click.argument("run_dir", type=click.Path())
def eval_cmd(scene_dir, run_dir):
    """Held-out PSNR/SSIM per frame plus storage accounting."""
    for p, name in ((scene_dir, "scene"), (run_dir, "run")):
        if not Path(p).exists():
            raise click.UsageError(f"{name} directory not found: {p}")
    try:
        summary = run_eval(scene_dir, run_dir)
    except FileNotFoundError as e:
        _fail(str(e))
    except Exception as e:
        _fail(f"eval failed: {e}")
    click.echo(
        f"frames={summary['frames']} views={summary['eval_views']} "
        f"mean_psnr={summary['mean_psnr']:.3f} mean_ssim={summary['mean_ssim']:.4f} "
        f"stream_bytes={summary['stream_bytes']}"
    )


@main.command()
@click.argument("stream_dir", type=click.Path())
def inspect(stream_dir):
    """Dump residual-frame headers and byte accounting."""
    if not Path(stream_dir).exists():
        raise click.UsageError(f"stream directory not found: {stream_dir}")
    try:
        entries = inspect_stream(stream_dir)
    except ValueError as e:
        _fail(str(e))
    total = 0
    for e in entries:
        click.echo(
            f"{e['file']}: frame={e['frame']} version={e['version']} "
            f"dyn={e['dyn_count']} bytes={e['bytes']} "
            f"dq=({e['dq_feat']:g},{e['dq_off']:g})"
        )
        total += e["bytes"]
    click.echo(f"total: {len(entries)} frames, {total} bytes")


if __name__ == "__main__":
    main()
