"""Bandwidth-shaped channel model and three-part latency accounting."""

from dataclasses import dataclass

from ..errors import ConfigError

MODES = ("simulated", "real-socket")


@dataclass(frozen=True)
class ChannelConfig:
    uplink_bps: float = 1e6
    downlink_bps: float = 1e7
    base_rtt_ms: float = 0.0
    mode: str = "simulated"

    def __post_init__(self):
        if not (self.uplink_bps > 0 and self.downlink_bps > 0):
            raise ConfigError("channel rates must be positive")
        if self.base_rtt_ms < 0:
            raise ConfigError("base_rtt_ms must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"channel mode must be one of {MODES}, got {self.mode!r}")

    def uplink_ms(self, bits):
        """Simulated transmission time of ``bits`` plus the base round trip."""
        return bits / self.uplink_bps * 1000.0 + self.base_rtt_ms


@dataclass(frozen=True)
class ServerComputeModel:
    """Affine server cost: ``c0_ms + c1_ms_per_token * tokens``."""

    c0_ms: float = 0.0
    c1_ms_per_token: float = 0.0

    def __post_init__(self):
        if self.c0_ms < 0 or self.c1_ms_per_token < 0:
            raise ConfigError("compute model coefficients must be >= 0")

    def modeled_ms(self, token_count):
        return self.c0_ms + self.c1_ms_per_token * token_count


@dataclass(frozen=True)
class LatencyReport:
    device_ms: float
    tx_ms: float
    server_ms: float
    total_ms: float
    payload_bits: int
    token_count: int


def account_latency(
    device_ms, payload_bits, channel, token_count, compute_model, measured_server_ms=0.0, measured_tx_ms=None
):
    """Split end-to-end latency into device, transmission and server time.

    In simulated mode the transmission time is a pure function of the bit
    count and channel; in real-socket mode ``measured_tx_ms`` is used as
    given. The server term adds the modeled token cost to any measured
    decode time, and ``total_ms`` is the plain sum of the three parts.
    """
    if channel.mode == "simulated":
        tx_ms = channel.uplink_ms(payload_bits)
    else:
        if measured_tx_ms is None:
            raise ConfigError("real-socket mode needs a measured transmission time")
        tx_ms = float(measured_tx_ms)
    server_ms = measured_server_ms + compute_model.modeled_ms(token_count)
    return LatencyReport(
        device_ms=device_ms,
        tx_ms=tx_ms,
        server_ms=server_ms,
        total_ms=device_ms + tx_ms + server_ms,
        payload_bits=payload_bits,
        token_count=token_count,
    )
