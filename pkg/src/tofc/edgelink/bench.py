"""Latency comparison between raw-feature upload and TOFC pipelines."""

import csv
import time
from dataclasses import dataclass

from ..codec.container import compress_request, decode_request
from ..errors import ConfigError
from ..features import FeatureTensor, raw_feature_bits
from ..merge import DEFAULT_K, merge
from .channel import ServerComputeModel, account_latency

PIPELINE_KINDS = ("raw", "tofc")
BENCH_FIELDS = ("pipeline", "bits", "device_ms", "tx_ms", "server_ms", "total_ms")


@dataclass(frozen=True)
class PipelineConfig:
    """One pipeline to compare.

    ``raw`` uploads every feature as float32; ``tofc`` merges to ``n_c``
    features per patch and entropy-codes them with the bank.
    """

    name: str
    kind: str
    n_c: int = 16
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise ConfigError(f"pipeline kind must be one of {PIPELINE_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class DeviceComputeModel:
    """Affine device cost for merging and coding: ``c0_ms + c1_ms_per_feature * n_p * n_v``."""

    c0_ms: float = 0.0
    c1_ms_per_feature: float = 0.0

    def modeled_ms(self, n_features):
        return self.c0_ms + self.c1_ms_per_feature * n_features


def compare_pipelines(
    features, configs, channel, compute_model=None, bank=None, device_model=None, timing="modeled"
):
    """One latency row per pipeline config.

    With ``timing="modeled"`` every time is computed from the device and
    server models, so identical inputs give identical rows. With
    ``timing="measured"`` wall-clock time of the TOFC device work and of a
    local decode is added on top.
    """
    if timing not in ("modeled", "measured"):
        raise ConfigError(f"timing must be 'modeled' or 'measured', got {timing!r}")
    if len(configs) < 2:
        raise ConfigError("need at least two pipelines to compare")
    features = features if isinstance(features, FeatureTensor) else FeatureTensor(features)
    compute_model = compute_model or ServerComputeModel()
    device_model = device_model or DeviceComputeModel()
    n_p, n_v, d_v = features.data.shape
    rows = []
    for cfg in configs:
        device_ms = 0.0
        server_measured = 0.0
        if cfg.kind == "raw":
            bits = raw_feature_bits(n_p, n_v, d_v)
            tokens = n_p * n_v
        else:
            if bank is None:
                raise ConfigError(f"pipeline {cfg.name!r} needs a parameter bank")
            start = time.perf_counter()
            merged = merge(features, cfg.n_c, cfg.k)
            encoded = compress_request(merged, bank)
            elapsed = (time.perf_counter() - start) * 1000.0
            device_ms = device_model.modeled_ms(n_p * n_v)
            if timing == "measured":
                device_ms += elapsed
                start = time.perf_counter()
                decode_request(encoded.bitstream, bank)
                server_measured = (time.perf_counter() - start) * 1000.0
            bits = encoded.bitstream.total_bits
            tokens = n_p * cfg.n_c
        report = account_latency(device_ms, bits, channel, tokens, compute_model, server_measured)
        rows.append(
            {
                "pipeline": cfg.name,
                "bits": bits,
                "device_ms": report.device_ms,
                "tx_ms": report.tx_ms,
                "server_ms": report.server_ms,
                "total_ms": report.total_ms,
            }
        )
    return rows


def write_bench(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(BENCH_FIELDS))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
