"""Binary checkpoint for the trained scene model.

Little-endian layout:
    magic "SLOD" | version u32 | L u32 | anchor_count u64 | K u32 | feat_dim u32
    per anchor: id u64 | level u32 | center 3xf32 | feature 32xf32
                | offsets Kx3xf32 | raw_scales Kx3xf32 | state u8
                  (bit0 = dynamic, bit1 = promoted)
    config section: delta, d_max, d_min, beta, d0, grad_threshold,
                    opacity_prune (7xf64) | l_max u32 | delta_l u32
    MLP section: arch u8 (0 shared / 1 separate) | net count u32, then per
                 net: dim count u32, dims u32..., then per layer w (f32
                 row-major) and b (f32)
    latent-decoder section: present u8, then d_feat rows/cols u32, f32 data,
                 d_off rows/cols u32, f32 data

All f32 fields are exact images of the in-memory values (the model is
snapped to f32 after training), so save -> load reproduces renders
bit-for-bit.
"""

from __future__ import annotations

import struct

import numpy as np

from .anchors import LoDConfig, LoDHierarchy
from .decoder import Mlp2, SeparateMLPs, SharedMLP
from .residuals import LatentDecoders
from .trainer import SceneModel

MAGIC = b"SLOD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_f32(out: bytearray, arr: np.ndarray):
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_f32(buf: memoryview, pos: int, shape: tuple) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf[pos:pos + 4 * n], dtype="<f4").reshape(shape)
    return arr.astype(np.float64), pos + 4 * n


def _write_net(out: bytearray, net: Mlp2):
    dims = (net.w1.shape[1], net.w1.shape[0], net.w2.shape[0])
    out += struct.pack("<I", len(dims))
    out += struct.pack(f"<{len(dims)}I", *dims)
    for arr in (net.w1, net.b1, net.w2, net.b2):
        _write_f32(out, arr)


def _read_net(buf: memoryview, pos: int) -> tuple[Mlp2, int]:
    (ndims,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    dims = struct.unpack_from(f"<{ndims}I", buf, pos)
    pos += 4 * ndims
    in_dim, hidden, out_dim = dims
    w1, pos = _read_f32(buf, pos, (hidden, in_dim))
    b1, pos = _read_f32(buf, pos, (hidden,))
    w2, pos = _read_f32(buf, pos, (out_dim, hidden))
    b2, pos = _read_f32(buf, pos, (out_dim,))
    return Mlp2(w1=w1, b1=b1, w2=w2, b2=b2), pos


def save_model(model: SceneModel, path):
    h = model.hierarchy
    cfg = h.config
    n, k, fd = len(h), cfg.k, cfg.feature_dim
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIQII", VERSION, cfg.levels, n, k, fd)
    for i in range(n):
        out += struct.pack("<QI", int(h.ids[i]), int(h.levels[i]))
        _write_f32(out, h.centers[i])
        _write_f32(out, h.features[i])
        _write_f32(out, h.offsets[i])
        _write_f32(out, h.raw_scales[i])
        state = int(h.dynamic[i]) | (int(h.promoted[i]) << 1)
        out += struct.pack("<B", state)
    out += struct.pack(
        "<7d", cfg.delta, cfg.d_max, cfg.d_min, cfg.beta, cfg.d0,
        cfg.grad_threshold, cfg.opacity_prune,
    )
    out += struct.pack("<II", cfg.l_max, cfg.delta_l)

    if isinstance(model.mlp, SeparateMLPs):
        nets = [model.mlp.nets[name] for name in model.mlp.HEAD_DIMS]
        out += struct.pack("<BI", 1, len(nets))
    else:
        nets = [model.mlp.net]
        out += struct.pack("<BI", 0, 1)
    for net in nets:
        _write_net(out, net)

    if model.decoders is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        for arr in (model.decoders.d_feat, model.decoders.d_off):
            out += struct.pack("<II", arr.shape[0], arr.shape[1])
            _write_f32(out, arr)

    with open(path, "wb") as f:
        f.write(bytes(out))


def load_model(path) -> SceneModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    buf = memoryview(data)
    version, levels, n, k, fd = struct.unpack_from("<IIQII", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unknown version {version}")
    pos = 4 + struct.calcsize("<IIQII")

    ids = np.empty(n, dtype=np.int64)
    level_arr = np.empty(n, dtype=np.int32)
    centers = np.empty((n, 3))
    features = np.empty((n, fd))
    offsets = np.empty((n, k, 3))
    raw_scales = np.empty((n, k, 3))
    dynamic = np.empty(n, dtype=bool)
    promoted = np.empty(n, dtype=bool)
    for i in range(n):
        ids[i], level_arr[i] = struct.unpack_from("<QI", buf, pos)
        pos += struct.calcsize("<QI")
        centers[i], pos = _read_f32(buf, pos, (3,))
        features[i], pos = _read_f32(buf, pos, (fd,))
        offsets[i], pos = _read_f32(buf, pos, (k, 3))
        raw_scales[i], pos = _read_f32(buf, pos, (k, 3))
        (state,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dynamic[i] = bool(state & 1)
        promoted[i] = bool(state & 2)

    vals = struct.unpack_from("<7d", buf, pos)
    pos += struct.calcsize("<7d")
    l_max, delta_l = struct.unpack_from("<II", buf, pos)
    pos += 8
    cfg = LoDConfig(
        delta=vals[0], levels=int(levels), d_max=vals[1], d_min=vals[2],
        beta=vals[3], d0=vals[4], l_max=int(l_max), k=int(k),
        grad_threshold=vals[5], delta_l=int(delta_l), opacity_prune=vals[6],
        feature_dim=int(fd),
    )
    h = LoDHierarchy(cfg)
    h.ids, h.levels = ids, level_arr
    h.centers, h.features = centers, features
    h.offsets, h.raw_scales = offsets, raw_scales
    h.dynamic, h.promoted = dynamic, promoted
    h.grad_sum = np.zeros(n)
    h.grad_count = np.zeros(n, dtype=np.int64)
    h.opacity_sum = np.zeros(n)
    h.opacity_count = np.zeros(n, dtype=np.int64)
    h.visibility_count = np.zeros(n, dtype=np.int64)
    h._next_id = int(ids.max()) + 1 if n else 0
    h.rebuild_index()

    arch, n_nets = struct.unpack_from("<BI", buf, pos)
    pos += struct.calcsize("<BI")
    nets = []
    for _ in range(n_nets):
        net, pos = _read_net(buf, pos)
        nets.append(net)
    if arch == 0:
        mlp = SharedMLP(feature_dim=fd, hidden=nets[0].b1.shape[0], k=k, seed=0)
        mlp.net = nets[0]
    else:
        mlp = SeparateMLPs(feature_dim=fd, hidden=nets[0].b1.shape[0], k=k, seed=0)
        for name, net in zip(mlp.HEAD_DIMS, nets):
            mlp.nets[name] = net

    (present,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    decoders = None
    if present:
        r1, c1 = struct.unpack_from("<II", buf, pos)
        pos += 8
        d_feat, pos = _read_f32(buf, pos, (r1, c1))
        r2, c2 = struct.unpack_from("<II", buf, pos)
        pos += 8
        d_off, pos = _read_f32(buf, pos, (r2, c2))
        decoders = LatentDecoders(d_feat=d_feat, d_off=d_off)

    return SceneModel(hierarchy=h, mlp=mlp, decoders=decoders)
