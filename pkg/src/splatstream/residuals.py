"""Per-frame dynamic-anchor residuals and their bit-exact wire format.

Each dynamic anchor streams an unquantized position delta (3 x f32) plus two
quantized 12-dim latents (i16 grids) that fixed linear decoders expand into
feature and offset deltas. Quantization trains through a straight-through
estimator: round in the forward pass, identity gradient in the backward.

Frame layout (little-endian), version 1:
    magic "SLRF" | version u32 | frame u32 | dyn_count u32
    | dq_feat f32 | dq_off f32                      -> 24-byte header
    per anchor: id u64 | pos_delta 3xf32 | feat 12xi16 | off 12xi16  -> 68 bytes

Version 2 is the no-quantize ablation: feature/offset deltas stored as raw
f32 vectors (decode then needs K, known from the checkpoint).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SLRF"
VERSION_QUANTIZED = 1
VERSION_FLOAT = 2
LATENT_DIM = 12
HEADER_BYTES = 24
RECORD_BYTES = 68  # 8 + 12 + 24 + 24
DEFAULT_STEP = 0.02
I16_MAX = 32767


class StreamFormatError(ValueError):
    """Base class for malformed residual streams."""


class BadMagicError(StreamFormatError):
    pass


class TruncatedStreamError(StreamFormatError):
    pass


class UnknownVersionError(StreamFormatError):
    pass


class LatentOverflowError(ValueError):
    pass


def quantize_ste(latent: np.ndarray, step: float) -> np.ndarray:
    """Forward value of the straight-through quantizer: round(l/step)*step.

    The backward rule is the identity: callers propagate upstream gradients
    to the latent unchanged.
    """
    if step <= 0:
        raise ValueError("quantization step must be positive")
    return np.rint(np.asarray(latent, dtype=np.float64) / step) * step


def quantize_indices(latent: np.ndarray, step: float) -> np.ndarray:
    """Integer grid indices, range-checked for i16 storage."""
    idx = np.rint(np.asarray(latent, dtype=np.float64) / step)
    if np.any(np.abs(idx) > I16_MAX):
        raise LatentOverflowError("latent overflow")
    return idx.astype(np.int16)


@dataclass
class LatentDecoders:
    """Fixed linear maps from the 12-dim latents to attribute deltas."""

    d_feat: np.ndarray  # (feature_dim, 12)
    d_off: np.ndarray   # (K*3, 12)

    @classmethod
    def create(cls, feature_dim: int, k: int, seed) -> "LatentDecoders":
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(LATENT_DIM)
        snap = lambda a: a.astype(np.float32).astype(np.float64)
        return cls(
            d_feat=snap(rng.normal(0.0, s, size=(feature_dim, LATENT_DIM))),
            d_off=snap(rng.normal(0.0, s, size=(k * 3, LATENT_DIM))),
        )

    def feat_delta(self, latents: np.ndarray) -> np.ndarray:
        return latents @ self.d_feat.T

    def off_delta(self, latents: np.ndarray) -> np.ndarray:
        n = latents.shape[0]
        return (latents @ self.d_off.T).reshape(n, -1, 3)

    def snap_to_storage(self):
        self.d_feat = self.d_feat.astype(np.float32).astype(np.float64)
        self.d_off = self.d_off.astype(np.float32).astype(np.float64)


@dataclass
class ResidualSet:
    """Finalized per-frame residual payload for the dynamic anchors."""

    frame: int
    ids: np.ndarray                      # (n,) int64
    pos_delta: np.ndarray                # (n, 3) float32
    feat_q: np.ndarray | None = None     # (n, 12) int16
    off_q: np.ndarray | None = None      # (n, 12) int16
    dq_feat: float = DEFAULT_STEP
    dq_off: float = DEFAULT_STEP
    quantized: bool = True
    feat_delta: np.ndarray | None = None  # (n, feature_dim) f32, version 2
    off_delta: np.ndarray | None = None   # (n, K, 3) f32, version 2

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.pos_delta = np.asarray(self.pos_delta, dtype=np.float32)
        # Hold the steps at wire (f32) precision so applying a residual set
        # before and after an encode/decode round trip is bit-identical.
        self.dq_feat = float(np.float32(self.dq_feat))
        self.dq_off = float(np.float32(self.dq_off))

    def __len__(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def empty(cls, frame: int, dq_feat: float = DEFAULT_STEP,
              dq_off: float = DEFAULT_STEP, quantized: bool = True) -> "ResidualSet":
        return cls(
            frame=frame, ids=np.empty(0, dtype=np.int64),
            pos_delta=np.empty((0, 3), dtype=np.float32),
            feat_q=np.empty((0, LATENT_DIM), dtype=np.int16),
            off_q=np.empty((0, LATENT_DIM), dtype=np.int16),
            dq_feat=dq_feat, dq_off=dq_off, quantized=quantized,
        )


def encode_frame(res: ResidualSet) -> bytes:
    """Serialize one frame's residual set."""
    n = len(res)
    version = VERSION_QUANTIZED if res.quantized else VERSION_FLOAT
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIIff", version, res.frame, n, res.dq_feat, res.dq_off)
    if res.quantized:
        for i in range(n):
            out += struct.pack("<Q", int(res.ids[i]))
            out += np.ascontiguousarray(res.pos_delta[i], dtype="<f4").tobytes()
            out += np.ascontiguousarray(res.feat_q[i], dtype="<i2").tobytes()
            out += np.ascontiguousarray(res.off_q[i], dtype="<i2").tobytes()
    else:
        for i in range(n):
            out += struct.pack("<Q", int(res.ids[i]))
            out += np.ascontiguousarray(res.pos_delta[i], dtype="<f4").tobytes()
            out += np.ascontiguousarray(res.feat_delta[i], dtype="<f4").tobytes()
            out += np.ascontiguousarray(res.off_delta[i], dtype="<f4").tobytes()
    return bytes(out)


def decode_frame(data: bytes, k: int | None = None) -> ResidualSet:
    """Exact inverse of `encode_frame`."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic")
    if len(data) < HEADER_BYTES:
        raise TruncatedStreamError("truncated stream")
    version, frame, n, dq_feat, dq_off = struct.unpack("<IIIff", data[4:HEADER_BYTES])
    body = data[HEADER_BYTES:]
    if version == VERSION_QUANTIZED:
        if len(body) != n * RECORD_BYTES:
            raise TruncatedStreamError("truncated stream")
        ids = np.empty(n, dtype=np.int64)
        pos = np.empty((n, 3), dtype=np.float32)
        feat_q = np.empty((n, LATENT_DIM), dtype=np.int16)
        off_q = np.empty((n, LATENT_DIM), dtype=np.int16)
        for i in range(n):
            rec = body[i * RECORD_BYTES:(i + 1) * RECORD_BYTES]
            ids[i] = struct.unpack("<Q", rec[:8])[0]
            pos[i] = np.frombuffer(rec[8:20], dtype="<f4")
            feat_q[i] = np.frombuffer(rec[20:44], dtype="<i2")
            off_q[i] = np.frombuffer(rec[44:68], dtype="<i2")
        return ResidualSet(
            frame=frame, ids=ids, pos_delta=pos, feat_q=feat_q, off_q=off_q,
            dq_feat=dq_feat, dq_off=dq_off, quantized=True,
        )
    if version == VERSION_FLOAT:
        if k is None:
            raise ValueError("decoding a float-residual stream requires K")
        feat_dim = _float_feat_dim(len(body), n, k)
        rec_bytes = 8 + 12 + 4 * feat_dim + 12 * k
        ids = np.empty(n, dtype=np.int64)
        pos = np.empty((n, 3), dtype=np.float32)
        feat = np.empty((n, feat_dim), dtype=np.float32)
        off = np.empty((n, k, 3), dtype=np.float32)
        for i in range(n):
            rec = body[i * rec_bytes:(i + 1) * rec_bytes]
            ids[i] = struct.unpack("<Q", rec[:8])[0]
            pos[i] = np.frombuffer(rec[8:20], dtype="<f4")
            feat[i] = np.frombuffer(rec[20:20 + 4 * feat_dim], dtype="<f4")
            off[i] = np.frombuffer(rec[20 + 4 * feat_dim:], dtype="<f4").reshape(k, 3)
        return ResidualSet(
            frame=frame, ids=ids, pos_delta=pos, dq_feat=dq_feat, dq_off=dq_off,
            quantized=False, feat_delta=feat, off_delta=off,
        )
    raise UnknownVersionError(f"unknown version {version}")


def _float_feat_dim(body_len: int, n: int, k: int) -> int:
    if n == 0:
        if body_len != 0:
            raise TruncatedStreamError("truncated stream")
        return 0
    if body_len % n != 0:
        raise TruncatedStreamError("truncated stream")
    feat_dim = (body_len // n - 20 - 12 * k) // 4
    if feat_dim < 0 or body_len != n * (20 + 4 * feat_dim + 12 * k):
        raise TruncatedStreamError("truncated stream")
    return feat_dim


def frame_bytes(dyn_count: int, quantized: bool = True,
                feature_dim: int = 32, k: int = 10) -> int:
    """Exact on-disk size of a frame with the given dynamic-anchor count."""
    if quantized:
        return HEADER_BYTES + RECORD_BYTES * dyn_count
    return HEADER_BYTES + dyn_count * (20 + 4 * feature_dim + 12 * k)


def apply_residual(hierarchy, res: ResidualSet, decoders: LatentDecoders | None):
    """Add one frame's residuals onto the dynamic anchors, in place."""
    if len(res) == 0:
        return
    lookup = {int(a): i for i, a in enumerate(hierarchy.ids)}
    rows = np.array([lookup[int(a)] for a in res.ids], dtype=np.int64)
    if not np.all(hierarchy.dynamic[rows]):
        raise ValueError("residual on static anchor")
    hierarchy.centers[rows] += res.pos_delta.astype(np.float64)
    if res.quantized:
        if decoders is None:
            raise ValueError("quantized residuals require latent decoders")
        feat_lat = res.feat_q.astype(np.float64) * res.dq_feat
        off_lat = res.off_q.astype(np.float64) * res.dq_off
        hierarchy.features[rows] += decoders.feat_delta(feat_lat)
        hierarchy.offsets[rows] += decoders.off_delta(off_lat)
    else:
        hierarchy.features[rows] += res.feat_delta.astype(np.float64)
        hierarchy.offsets[rows] += res.off_delta.astype(np.float64)
