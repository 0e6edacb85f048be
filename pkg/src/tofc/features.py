"""Visual feature tensors: file format, patch arithmetic and synthetic data.

Real deployments feed encoder outputs of shape ``(n_p, n_v, d_v)``; at desk
scale :func:`synth_features` produces clustered Laplacian stand-ins.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CRCError, FormatError, InvalidArgumentError, TruncationError

TOFCF_MAGIC = b"TFCF"
TOFCF_VERSION = 1
_HEADER = struct.Struct("<4sB3xIII")


@dataclass(frozen=True)
class FeatureTensor:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"feature tensor must be 3-D (n_p, n_v, d_v), got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvalidArgumentError(f"empty feature tensor {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("feature tensor contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_p(self):
        return self.data.shape[0]

    @property
    def n_v(self):
        return self.data.shape[1]

    @property
    def d_v(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class PatchGrid:
    h: int
    w: int
    p: int
    n_h: int
    n_w: int
    n_p: int


def patch_grid(h, w, p):
    """Detail-patch grid for an ``h x w`` image plus one thumbnail patch."""
    if min(h, w, p) <= 0:
        raise InvalidArgumentError(f"image and patch sizes must be positive, got h={h}, w={w}, p={p}")
    n_h = -(-h // p)
    n_w = -(-w // p)
    return PatchGrid(h=h, w=w, p=p, n_h=n_h, n_w=n_w, n_p=n_h * n_w + 1)


def dumps_features(features):
    x = features.data if isinstance(features, FeatureTensor) else np.asarray(features)
    if x.ndim != 3:
        raise InvalidArgumentError("expected a (n_p, n_v, d_v) array")
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    head = _HEADER.pack(TOFCF_MAGIC, TOFCF_VERSION, *x.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def loads_features(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise TruncationError(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, n_p, n_v, d_v = _HEADER.unpack_from(buf, 0)
    if magic != TOFCF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TOFCF_MAGIC!r}", 0)
    if version != TOFCF_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(n_p, n_v, d_v) < 1:
        raise FormatError(f"degenerate shape ({n_p}, {n_v}, {d_v})", 8)
    count = n_p * n_v * d_v
    expected = _HEADER.size + 4 * count + 4
    if len(buf) < expected:
        have = max(0, (len(buf) - _HEADER.size - 4) // 4)
        raise TruncationError(f"header declares {count} elements, payload holds {have}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    payload = buf[_HEADER.size : _HEADER.size + 4 * count]
    (crc,) = struct.unpack_from("<I", buf, expected - 4)
    if zlib.crc32(payload) != crc:
        raise CRCError("payload CRC mismatch", expected - 4)
    data = np.frombuffer(payload, dtype="<f4").reshape(n_p, n_v, d_v).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(data.ravel()))
    if bad.size:
        raise FormatError("non-finite feature value", _HEADER.size + 4 * int(bad[0]))
    return FeatureTensor(data)


def save_features(features, path):
    with open(path, "wb") as fh:
        fh.write(dumps_features(features))


def load_features(path):
    with open(path, "rb") as fh:
        return loads_features(fh.read())


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the clustered Laplacian feature generator.

    ``cluster_count`` centers are shared by every patch; each feature is a
    center plus Laplace noise of scale ``spread``. ``center_scale`` sets the
    center spacing, which keeps blobs well separated when it is large
    relative to ``spread``.
    """

    cluster_count: int = 4
    d_v: int = 32
    n_v: int = 64
    spread: float = 0.5
    seed: int = 0
    n_p: int = 1
    center_scale: float = 4.0
    channel_scales: tuple = field(default=None)

    def __post_init__(self):
        for name in ("cluster_count", "d_v", "n_v", "n_p"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.cluster_count > self.n_v:
            raise InvalidArgumentError(
                f"cluster_count ({self.cluster_count}) cannot exceed n_v ({self.n_v})"
            )
        if self.spread < 0:
            raise InvalidArgumentError("spread must be >= 0")


def _rng(seed, stream):
    # Philox is counter-based: same (seed, stream) gives the same draws everywhere.
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))


def synth_centers(spec):
    rng = _rng(spec.seed, 0)
    centers = rng.normal(0.0, spec.center_scale, size=(spec.cluster_count, spec.d_v))
    if spec.channel_scales is not None:
        centers = centers * np.asarray(spec.channel_scales, dtype=np.float64)
    return centers


def synth_features(spec, return_labels=False):
    """Draw ``(n_p, n_v, d_v)`` features from ``spec``; bitwise reproducible."""
    centers = synth_centers(spec)
    rng = _rng(spec.seed, 1)
    base = np.arange(spec.n_v) % spec.cluster_count
    labels = np.stack([rng.permutation(base) for _ in range(spec.n_p)])
    noise = rng.laplace(0.0, 1.0, size=(spec.n_p, spec.n_v, spec.d_v))
    scales = spec.spread
    if spec.channel_scales is not None:
        scales = spec.spread * np.asarray(spec.channel_scales, dtype=np.float64)
    x = (centers[labels] + scales * noise).astype(np.float32)
    ft = FeatureTensor(x)
    return (ft, labels) if return_labels else ft


def synth_two_source(n_p, n_v=64, d_v=32, cluster_count=1, seed=0):
    """Patches drawn from two distinct feature distributions.

    Source 0 has compact blobs with emphasis on the first half of the
    channels; source 1 has wide blobs emphasising the second half. With
    one blob per source the source is the dominant statistical split; more
    blobs make other partitions competitive. Returns
    ``(FeatureTensor, source_per_patch)``.
    """
    half = d_v // 2
    prof0 = np.r_[np.full(half, 1.5), np.full(d_v - half, 0.25)]
    prof1 = prof0[::-1].copy()
    specs = [
        SyntheticSpec(cluster_count, d_v, n_v, 0.3, seed, n_p, 4.0, tuple(prof0)),
        SyntheticSpec(cluster_count, d_v, n_v, 1.2, seed + 7919, n_p, 4.0, tuple(prof1)),
    ]
    parts = [synth_features(s).data for s in specs]
    source = _rng(seed, 2).permutation(np.arange(n_p) % 2)
    x = np.where(source[:, None, None] == 0, parts[0], parts[1])
    return FeatureTensor(x.astype(np.float32)), source


def raw_feature_bits(n_p, n_v, d_v, bits_per_value=32):
    return n_p * n_v * d_v * bits_per_value


def token_ratio(n_c, n_v):
    return n_c / n_v


def ceil_log2(n):
    return 0 if n <= 1 else math.ceil(math.log2(n))
