"""End-to-end pipeline: scene directories, training runs, playback, eval.

Directory layouts
    scene dir:  scene.json, meta.json, cameras.json, points.npy,
                frames/frame_NNNN/view_MM.{png,f32}, masks/..., manifest.json
    run dir:    effective_config.json, checkpoint.slod, report.csv,
                loss_trace.csv, stream/frame_NNNN.slrf + manifest.txt,
                renders/frame_NNNN/view_MM.{png,f32}, figures/*.png
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import init_hierarchy
from .checkpoint import load_model, save_model
from .config import RunConfig
from .decoder import SeparateMLPs, SharedMLP
from .geometry import Camera
from .io_utils import (
    load_f32, save_f32, save_mask_png, save_png, write_json, write_manifest,
)
from .metrics import psnr, ssim
from .motion import write_partition
from .rasterizer import RenderSettings
from .report import eval_figures, training_figures, write_csv
from .residuals import decode_frame
from .scenes import SceneSpec, SyntheticScene, generate_scene, scene_bounds
from .trainer import (
    SceneModel, TrainConfig, identify_dynamic, train_frame, train_initial,
)

REPORT_HEADER = ["epoch", "frame", "loss", "psnr", "dyn_count", "bytes"]


# -- scene directories -------------------------------------------------------

def write_scene(scene: SyntheticScene, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    t_total, n = spec.frames, spec.n_cameras
    files = []

    spec_path = out_dir / "scene.json"
    write_json(spec_path, _spec_dict(spec))
    files.append(spec_path)

    meta_path = out_dir / "meta.json"
    write_json(meta_path, {
        "frames": t_total,
        "views": n,
        "image_size": list(spec.image_size),
        "dynamic_bounds": scene.dynamic_bounds,
    })
    files.append(meta_path)

    cam_path = out_dir / "cameras.json"
    write_json(cam_path, [cam.to_dict() for cam in scene.cameras])
    files.append(cam_path)

    pts_path = out_dir / "points.npy"
    np.save(pts_path, scene.points)
    files.append(pts_path)

    for t in range(t_total):
        fdir = out_dir / "frames" / f"frame_{t:04d}"
        mdir = out_dir / "masks" / f"frame_{t:04d}"
        fdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            png = fdir / f"view_{i:02d}.png"
            raw = fdir / f"view_{i:02d}.f32"
            save_png(png, scene.images[t, i])
            save_f32(raw, scene.images[t, i])
            mask = mdir / f"view_{i:02d}.png"
            save_mask_png(mask, scene.masks[t, i])
            files.extend([png, raw, mask])

    return write_manifest(out_dir, files)


def _spec_dict(spec: SceneSpec) -> dict:
    return {
        "seed": spec.seed,
        "frames": spec.frames,
        "image_size": list(spec.image_size),
        "cameras": {
            "count": spec.n_cameras,
            "radius": spec.ring_radius,
            "height": spec.ring_height,
            "look_at": spec.look_at.tolist(),
            "fov_deg": spec.fov_deg,
            "near": spec.near,
        },
        "points_per_element": spec.points_per_element,
        "elements": [
            {
                "center": e.center.tolist(),
                "scale": e.scale.tolist(),
                "color": e.color.tolist(),
                "opacity": e.opacity,
                "rotation": e.rotation.tolist(),
                "velocity": e.velocity.tolist(),
            }
            for e in spec.elements
        ],
    }


@dataclass
class LoadedScene:
    cameras: list[Camera]
    images: np.ndarray      # (T, N, H, W, 3)
    points: np.ndarray
    meta: dict

    @property
    def frames(self) -> int:
        return self.images.shape[0]

    @property
    def views(self) -> int:
        return self.images.shape[1]


def load_scene(scene_dir) -> LoadedScene:
    scene_dir = Path(scene_dir)
    with open(scene_dir / "meta.json") as f:
        meta = json.load(f)
    with open(scene_dir / "cameras.json") as f:
        cameras = [Camera.from_dict(d) for d in json.load(f)]
    h, w = meta["image_size"]
    t_total, n = meta["frames"], meta["views"]
    images = np.empty((t_total, n, h, w, 3), dtype=np.float64)
    for t in range(t_total):
        for i in range(n):
            images[t, i] = load_f32(
                scene_dir / "frames" / f"frame_{t:04d}" / f"view_{i:02d}.f32", h, w
            )
    points = np.load(scene_dir / "points.npy")
    return LoadedScene(cameras=cameras, images=images, points=points, meta=meta)


# -- training runs ------------------------------------------------------------

def _copy_hierarchy(h):
    import copy

    clone = copy.copy(h)
    for name in (
        "ids", "levels", "centers", "features", "offsets", "raw_scales",
        "dynamic", "promoted", "grad_sum", "grad_count", "opacity_sum",
        "opacity_count", "visibility_count",
    ):
        setattr(clone, name, getattr(h, name).copy())
    clone._index = dict(h._index)
    import dataclasses

    clone.config = dataclasses.replace(h.config)
    return clone


def run_training(scene: LoadedScene, runcfg: RunConfig, out_dir) -> dict:
    """Train on frame 0, stream the rest, and write all run artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = runcfg.train_config()
    settings = runcfg.render_settings()
    write_json(out_dir / "effective_config.json", runcfg.echo())

    train_idx = runcfg["train.views"]
    if train_idx is None:
        train_idx = list(range(scene.views))
    train_cams = [scene.cameras[i] for i in train_idx]

    d_max = runcfg["lod.d_max"]
    d_min = runcfg["lod.d_min"]
    if d_max is None or d_min is None:
        auto_max, auto_min = scene_bounds(scene.points, train_cams)
        d_max = auto_max if d_max is None else d_max
        d_min = auto_min if d_min is None else d_min
    hierarchy = init_hierarchy(scene.points, (d_max, d_min), **runcfg.lod_overrides())

    mlp_cls = SeparateMLPs if "separate-mlps" in runcfg.ablations else SharedMLP
    mlp = mlp_cls(
        feature_dim=hierarchy.config.feature_dim, hidden=32,
        k=hierarchy.config.k, seed=runcfg.seed,
    )
    model = SceneModel(hierarchy=hierarchy, mlp=mlp)

    views0 = [(cam, scene.images[0, i]) for i, cam in zip(train_idx, train_cams)]
    report0 = train_initial(
        model, views0, cfg, settings,
        use_dropout="no-dropout" not in runcfg.ablations,
    )
    write_csv(
        out_dir / "loss_trace.csv", ["epoch", "loss"],
        [[e, v] for e, v in enumerate(report0.loss_trace)],
    )
    canonical = _copy_hierarchy(model.hierarchy)

    _archive_renders(model, scene, settings, out_dir, frame=0)
    rows = [[report0.epochs, 0, report0.final_loss, report0.final_psnr, 0, 0]]

    stream_dir = out_dir / "stream"
    stream_dir.mkdir(exist_ok=True)
    manifest_lines = []
    quantized = "no-quantize" not in runcfg.ablations
    star = runcfg.variant == "star"
    cadence = runcfg["motion.star_cadence"]
    prev_dyn_ids = None

    for t in range(1, scene.frames):
        views_t = [(cam, scene.images[t, i]) for i, cam in zip(train_idx, train_cams)]
        views_prev = [(cam, scene.images[t - 1, i])
                      for i, cam in zip(train_idx, train_cams)]
        reused = False
        if "no-partition" in runcfg.ablations:
            dyn_ids = model.hierarchy.ids.copy()
            model.hierarchy.dynamic[:] = True
        elif star and prev_dyn_ids is not None and (t - 1) % cadence != 0:
            dyn_ids = prev_dyn_ids
            reused = True
        else:
            dyn_ids, ledger, gmm = identify_dynamic(
                model, views_t, views_prev, cfg, settings, runcfg.rho()
            )
            if gmm is not None:
                gmm_dump = out_dir / "partitions"
                gmm_dump.mkdir(exist_ok=True)
                write_partition(
                    gmm_dump / f"frame_{t:04d}.txt", ledger, gmm, dyn_ids,
                )
        prev_dyn_ids = dyn_ids

        result = train_frame(
            model, views_t, t, cfg, settings, dyn_ids, quantized=quantized
        )
        result.partition_reused = reused
        frame_file = stream_dir / f"frame_{t:04d}.slrf"
        frame_file.write_bytes(result.payload)
        manifest_lines.append(frame_file.name)

        _archive_renders(model, scene, settings, out_dir, frame=t)
        vals = [
            psnr(load_f32(out_dir / "renders" / f"frame_{t:04d}" / f"view_{i:02d}.f32",
                          *_hw(scene)), scene.images[t, i])
            for i in train_idx
        ]
        rows.append([
            result.epochs, t, result.final_loss, float(np.mean(vals)),
            result.dyn_count, len(result.payload),
        ])

    (stream_dir / "manifest.txt").write_text("".join(l + "\n" for l in manifest_lines))
    write_csv(out_dir / "report.csv", REPORT_HEADER, rows)
    training_figures(out_dir / "figures", report0.loss_trace, rows[1:])

    canonical_model = SceneModel(
        hierarchy=canonical, mlp=model.mlp, decoders=model.decoders
    )
    save_model(canonical_model, out_dir / "checkpoint.slod")
    return {"rows": rows, "report0": report0}


def _hw(scene: LoadedScene) -> tuple[int, int]:
    return scene.images.shape[2], scene.images.shape[3]


def _archive_renders(model: SceneModel, scene: LoadedScene,
                     settings: RenderSettings, out_dir: Path, frame: int):
    rdir = out_dir / "renders" / f"frame_{frame:04d}"
    rdir.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(scene.cameras):
        img = model.render_view(cam, settings)
        save_png(rdir / f"view_{i:02d}.png", img)
        save_f32(rdir / f"view_{i:02d}.f32", img)


# -- playback -----------------------------------------------------------------

def playback(checkpoint_path, stream_dir, t: int) -> SceneModel:
    """Reconstruct the model at frame t from the checkpoint plus residuals."""
    model = load_model(checkpoint_path)
    stream_dir = Path(stream_dir)
    for k in range(1, t + 1):
        frame_file = stream_dir / f"frame_{k:04d}.slrf"
        if not frame_file.exists():
            raise FileNotFoundError(f"stream gap at frame {k}")
        res = decode_frame(frame_file.read_bytes(), k=model.hierarchy.config.k)
        apply_playback_residual(model, res)
    return model


def apply_playback_residual(model: SceneModel, res) -> None:
    """The stream defines the frame's dynamic set; mark it, then apply."""
    from .residuals import apply_residual

    h = model.hierarchy
    h.dynamic[:] = False
    if len(res):
        lookup = {int(a): i for i, a in enumerate(h.ids)}
        rows = np.array([lookup[int(a)] for a in res.ids], dtype=np.int64)
        h.dynamic[rows] = True
    apply_residual(h, res, model.decoders)


def render_playback(checkpoint_path, stream_dir, camera: Camera, t: int,
                    settings: RenderSettings) -> np.ndarray:
    model = playback(checkpoint_path, stream_dir, t)
    return model.render_view(camera, settings)


# -- evaluation ---------------------------------------------------------------

def run_eval(scene_dir, run_dir) -> dict:
    scene_dir, run_dir = Path(scene_dir), Path(run_dir)
    scene = load_scene(scene_dir)
    with open(run_dir / "effective_config.json") as f:
        eff = json.load(f)
    train_views = eff.get("train.views")
    if train_views is None:
        train_views = list(range(scene.views))
    heldout = [i for i in range(scene.views) if i not in train_views]
    eval_views = heldout if heldout else train_views

    h, w = _hw(scene)
    rows = []
    psnr_means, ssim_means = [], []
    for t in range(scene.frames):
        per_frame_psnr, per_frame_ssim = [], []
        for i in eval_views:
            rpath = run_dir / "renders" / f"frame_{t:04d}" / f"view_{i:02d}.f32"
            if not rpath.exists():
                raise FileNotFoundError(f"missing render: {rpath}")
            img = load_f32(rpath, h, w)
            p = psnr(img, scene.images[t, i])
            s = ssim(img, scene.images[t, i])
            rows.append([t, i, p, s])
            per_frame_psnr.append(p)
            per_frame_ssim.append(s)
        psnr_means.append(float(np.mean(per_frame_psnr)))
        ssim_means.append(float(np.mean(per_frame_ssim)))

    stream_dir = run_dir / "stream"
    storage_rows = [[0, 0]]
    for t in range(1, scene.frames):
        f = stream_dir / f"frame_{t:04d}.slrf"
        storage_rows.append([t, f.stat().st_size if f.exists() else 0])

    write_csv(run_dir / "metrics.csv", ["frame", "view", "psnr", "ssim"], rows)
    write_csv(run_dir / "storage.csv", ["frame", "bytes"], storage_rows)
    eval_figures(
        run_dir / "figures", list(range(scene.frames)), psnr_means, ssim_means,
        [r[1] for r in storage_rows],
    )
    total_bytes = sum(r[1] for r in storage_rows)
    summary = {
        "frames": scene.frames,
        "eval_views": eval_views,
        "mean_psnr": float(np.mean([r[2] for r in rows])),
        "mean_ssim": float(np.mean([r[3] for r in rows])),
        "stream_bytes": total_bytes,
    }
    write_json(run_dir / "summary.json", summary)
    return summary


def inspect_stream(stream_dir) -> list[dict]:
    import struct

    stream_dir = Path(stream_dir)
    out = []
    for f in sorted(stream_dir.glob("frame_*.slrf")):
        data = f.read_bytes()
        if data[:4] != b"SLRF" or len(data) < 24:
            raise ValueError(f"not a residual frame: {f}")
        version, frame, n, dq_f, dq_o = struct.unpack("<IIIff", data[4:24])
        out.append({
            "file": f.name, "version": version, "frame": frame,
            "dyn_count": n, "bytes": len(data),
            "dq_feat": dq_f, "dq_off": dq_o,
        })
    return out
