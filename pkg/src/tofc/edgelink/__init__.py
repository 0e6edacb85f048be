"""Device-edge transport: framing, channel model, server, client and benchmark."""

from .bench import DeviceComputeModel, PipelineConfig, compare_pipelines, write_bench
from .channel import ChannelConfig, LatencyReport, ServerComputeModel, account_latency
from .client import EdgeClient, LoopbackClient, request_frame
from .protocol import (
    DEFAULT_MAX_FRAME,
    FRAME_REQUEST,
    FRAME_RESPONSE,
    Frame,
    Request,
    Response,
    Status,
    decode_frame,
    decode_request_body,
    decode_response_body,
    encode_frame,
    encode_request_body,
    encode_response_body,
)
from .server import EdgeServer, TcpEdgeServer

__all__ = [
    "DEFAULT_MAX_FRAME",
    "FRAME_REQUEST",
    "FRAME_RESPONSE",
    "ChannelConfig",
    "DeviceComputeModel",
    "EdgeClient",
    "EdgeServer",
    "Frame",
    "LatencyReport",
    "LoopbackClient",
    "PipelineConfig",
    "Request",
    "Response",
    "ServerComputeModel",
    "Status",
    "TcpEdgeServer",
    "account_latency",
    "compare_pipelines",
    "decode_frame",
    "decode_request_body",
    "decode_response_body",
    "encode_frame",
    "encode_request_body",
    "encode_response_body",
    "request_frame",
    "write_bench",
]
