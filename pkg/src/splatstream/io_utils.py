"""Small file helpers: 8-bit PNGs, raw planar f32 dumps, hashes."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image


def save_png(path, image: np.ndarray):
    """Write an (H, W, 3) unit-range float image as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def save_mask_png(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(
        path, format="PNG"
    )


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_f32(path, image: np.ndarray):
    """Raw little-endian f32 dump, channel-planar: C planes of H x W."""
    arr = np.asarray(image, dtype=np.float64)
    planes = arr.transpose(2, 0, 1) if arr.ndim == 3 else arr[None]
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(planes, dtype="<f4").tobytes())


def load_f32(path, height: int, width: int, channels: int = 3) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    planes = raw.reshape(channels, height, width)
    return planes.transpose(1, 2, 0).astype(np.float64)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_manifest(root: Path, files: list[Path]) -> dict:
    entries = {}
    for p in sorted(files):
        entries[str(p.relative_to(root))] = sha256_file(p)
    combined = hashlib.sha256(
        json.dumps(entries, sort_keys=True).encode()
    ).hexdigest()
    manifest = {"files": entries, "hash": combined}
    write_json(root / "manifest.json", manifest)
    return manifest
